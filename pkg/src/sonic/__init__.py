"""Oriented continuous spectral convolutions with analytic gradients."""

__version__ = "0.1.0"

from .errors import ConfigurationError, DiagnosticError, InvalidArgumentError
from .grid import (
    FrequencyGrid,
    Signal,
    Spectrum,
    build_frequency_grid,
    dft_forward,
    dft_inverse,
    enforce_dc_real,
    standardize_input,
)
from .modes import Mode, ModeRaw, StabilityConfig, constrain_mode, physical_direction, transfer_at, transfer_field
from .operator import (
    MixingMatrices,
    SonicBlock,
    SonicNetwork,
    SpectralSymbol,
    apply_symbol,
    assemble_symbol,
    block_forward,
    count_parameters,
    load_network,
    network_forward,
    resample_to_grid,
    rms_gain_normalize,
    save_network,
    spatial_kernel,
)

__all__ = [name for name in dir() if not name.startswith("_")]
