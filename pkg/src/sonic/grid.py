"""Discretization layer: DFT frequency grids, real-signal transforms, input hygiene.

Frequency convention: axis ``d`` with ``N_d`` samples at spacing ``delta_d``
carries the angular frequencies ``2*pi*k / (N_d * delta_d)`` for
``k = -floor(N_d/2) .. ceil(N_d/2)-1``, stored in standard DFT index order
(non-negative ``k`` first, then negative).  Spectra of real signals are kept
as half-spectra: the last axis is reduced to ``N_D//2 + 1`` bins, the rest
stay full.  The forward transform is unnormalized; the inverse carries 1/N.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

TWO_PI = 2.0 * math.pi

# Variance floor used when standardizing nearly-constant channels.
STD_FLOOR = 1e-6

# Stream id for the standardization noise draw (Philox key word 2).
_STREAM_STANDARDIZE = 0x5354_4421


def _dft_index_order(n: int) -> np.ndarray:
    """Integer DFT indices [0 .. ceil(n/2)-1, -floor(n/2) .. -1] as float64."""
    pos = np.arange(0, (n + 1) // 2, dtype=np.float64)
    neg = np.arange(-(n // 2), 0, dtype=np.float64)
    return np.concatenate([pos, neg])


@dataclass(frozen=True)
class FrequencyGrid:
    """DFT frequency lattice for a D-dimensional sampling of physical space."""

    dims: tuple[int, ...]
    spacings: tuple[float, ...]
    freqs: tuple[np.ndarray, ...]

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def half_shape(self) -> tuple[int, ...]:
        return self.dims[:-1] + (self.dims[-1] // 2 + 1,)

    @property
    def half_size(self) -> int:
        return int(np.prod(self.half_shape))

    def half_freqs(self) -> tuple[np.ndarray, ...]:
        """Per-axis frequencies of the stored half-spectrum bins.

        Full DFT order on all axes except the last, which keeps bins
        ``0 .. N//2``.  For even N the last stored bin is the Nyquist entry
        and carries the negative frequency from the full DFT-order list, so
        stored values are always members of the full per-axis sets.
        """
        out = list(self.freqs[:-1])
        out.append(self.freqs[-1][: self.dims[-1] // 2 + 1])
        return tuple(out)

    def omega_axes(self) -> tuple[np.ndarray, ...]:
        """Half-grid frequencies per axis, shaped for broadcasting."""
        hf = self.half_freqs()
        shaped = []
        for d, f in enumerate(hf):
            shape = [1] * self.ndim
            shape[d] = len(f)
            shaped.append(f.reshape(shape))
        return tuple(shaped)

    def hermitian_weights(self) -> np.ndarray:
        """Multiplicity of each stored bin in the full spectrum (1 or 2).

        Bins whose last-axis index reflects onto a stored bin (index 0 and,
        for even dims, the Nyquist index) count once; all others stand in for
        a conjugate pair and count twice.
        """
        n_last = self.dims[-1]
        m = n_last // 2 + 1
        w_last = np.full(m, 2.0)
        w_last[0] = 1.0
        if n_last % 2 == 0:
            w_last[-1] = 1.0
        shape = [1] * self.ndim
        shape[-1] = m
        return np.broadcast_to(w_last.reshape(shape), self.half_shape).copy()


def build_frequency_grid(dims, spacings) -> FrequencyGrid:
    """Construct the frequency lattice for given sample counts and spacings."""
    dims = tuple(int(n) for n in np.atleast_1d(dims))
    spacings = tuple(float(s) for s in np.atleast_1d(spacings))
    if len(dims) != len(spacings):
        raise InvalidArgumentError(
            f"dims/spacings rank mismatch: {len(dims)} vs {len(spacings)}"
        )
    if not dims:
        raise InvalidArgumentError("grid must have at least one axis")
    for n in dims:
        if n < 1:
            raise InvalidArgumentError(f"dimension must be >= 1, got {n}")
    for s in spacings:
        if not (s > 0.0) or not math.isfinite(s):
            raise InvalidArgumentError(f"spacing must be positive, got {s}")
    freqs = []
    for n, delta in zip(dims, spacings):
        k = _dft_index_order(n)
        # Fixed evaluation order (2*pi*k) / (n*delta): grids whose dims are
        # scaled by powers of two share bitwise-identical frequency values.
        freqs.append((TWO_PI * k) / (n * delta))
    return FrequencyGrid(dims=dims, spacings=spacings, freqs=tuple(freqs))


@dataclass
class Signal:
    """Real multichannel field sampled on a grid: data is channels x N1 x ... x ND."""

    data: np.ndarray
    grid: FrequencyGrid

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        expected = (self.channels,) + self.grid.dims
        if self.data.ndim != self.grid.ndim + 1 or self.data.shape != expected:
            raise InvalidArgumentError(
                f"signal shape {self.data.shape} does not match grid dims {self.grid.dims}"
            )
        if not np.all(np.isfinite(self.data)):
            raise InvalidArgumentError("signal contains non-finite entries")

    @property
    def channels(self) -> int:
        return self.data.shape[0]


@dataclass
class Spectrum:
    """Half-spectrum counterpart of a Signal: channels x N1 x ... x (ND//2+1)."""

    data: np.ndarray
    grid: FrequencyGrid

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        expected = (self.channels,) + self.grid.half_shape
        if self.data.ndim != self.grid.ndim + 1 or self.data.shape != expected:
            raise InvalidArgumentError(
                f"spectrum shape {self.data.shape} does not match half grid {self.grid.half_shape}"
            )

    @property
    def channels(self) -> int:
        return self.data.shape[0]


def _spatial_axes(ndim: int) -> tuple[int, ...]:
    return tuple(range(-ndim, 0))


def dft_forward(x: Signal) -> Spectrum:
    """Unnormalized real-input DFT, half-spectrum over the last axis."""
    axes = _spatial_axes(x.grid.ndim)
    return Spectrum(np.fft.rfftn(x.data, axes=axes), x.grid)


def dft_inverse(spec: Spectrum) -> Signal:
    """Inverse of dft_forward (1/N normalization), returning a real signal."""
    axes = _spatial_axes(spec.grid.ndim)
    data = np.fft.irfftn(spec.data, s=spec.grid.dims, axes=axes)
    return Signal(data, spec.grid)


def enforce_dc_real(spec: Spectrum) -> Spectrum:
    """Zero the imaginary part of the all-zero-frequency coefficient."""
    data = spec.data.copy()
    dc = (slice(None),) + (0,) * spec.grid.ndim
    data[dc] = data[dc].real
    return Spectrum(data, spec.grid)


def standardize_input(x: Signal, noise_scale: float = 0.0, seed: int = 0) -> Signal:
    """Per-channel zero-mean unit-variance rescaling plus optional seeded noise."""
    if x.grid.size < 2:
        raise InvalidArgumentError("standardize_input needs more than one sample per channel")
    if noise_scale < 0.0:
        raise InvalidArgumentError("noise_scale must be non-negative")
    data = standardize_array(x.data, channel_axis=0)
    if noise_scale > 0.0:
        rng = np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), _STREAM_STANDARDIZE]))
        data = data + noise_scale * rng.standard_normal(data.shape)
    return Signal(data, x.grid)


def standardize_array(data: np.ndarray, channel_axis: int = 0) -> np.ndarray:
    """Zero mean, unit population variance per channel; floored for constants."""
    axes = tuple(i for i in range(data.ndim) if i != channel_axis % data.ndim)
    mean = data.mean(axis=axes, keepdims=True)
    std = data.std(axis=axes, keepdims=True)
    return (data - mean) / np.maximum(std, STD_FLOOR)


def hermitian_extend(half: np.ndarray, dims: tuple[int, ...]) -> np.ndarray:
    """Expand a half-spectrum field to the full grid of a real-signal spectrum.

    Interior last-axis bins are reflected with conjugation; the self-paired
    planes (last-axis index 0 and, for even dims, Nyquist) are replaced by
    their Hermitian part, matching what the inverse real transform actually
    uses from those bins.
    """
    half = np.asarray(half, dtype=np.complex128)
    lead = half.shape[: -len(dims)]
    full = np.zeros(lead + tuple(dims), dtype=np.complex128)
    m = dims[-1] // 2 + 1
    full[..., :m] = half

    # Reflect interior bins: full[k] = conj(half[-k mod N]).
    grids = np.meshgrid(*[np.arange(n) for n in dims[:-1]], indexing="ij")
    refl = tuple((-g) % n for g, n in zip(grids, dims[:-1]))
    for k_last in range(m, dims[-1]):
        src = (dims[-1] - k_last) % dims[-1]
        full[(Ellipsis,) + refl + (k_last,)] = np.conj(half[..., src])

    # Hermitianize self-paired planes within the leading axes.
    planes = [0] + ([dims[-1] // 2] if dims[-1] % 2 == 0 else [])
    for k_last in planes:
        plane = full[..., k_last]
        mirrored = np.conj(plane[(Ellipsis,) + refl]) if dims[:-1] else np.conj(plane)
        full[..., k_last] = 0.5 * (plane + mirrored)
    return full
