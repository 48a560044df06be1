"""Rank-M spectral operator: symbol assembly, application, and the block recursion.

A block owns M oriented modes shared across channel pairs.  Its frequency
response factorizes as ``H[k,c](w) = sum_m Cmat[k,m] * T_m(w) * B[m,c]``,
applied frequency-wise to the input half-spectrum, inverse-transformed, added
to a pointwise skip projection, and passed through a GELU.  All parameters
define continuous functions of frequency, so the same block evaluates on any
sampling grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ConfigurationError, InvalidArgumentError
from .grid import (
    FrequencyGrid,
    Signal,
    Spectrum,
    dft_forward,
    dft_inverse,
    hermitian_extend,
)
from .modes import Mode, ModeRaw, StabilityConfig, constrain_mode, init_mode_raw, transfer_field

GAIN_FLOOR = 1e-8

_STREAM_DROPOUT = 0x44524F50
_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """Gaussian error linear unit, exact (erf) form."""
    return 0.5 * x * (1.0 + erf(x * _SQRT1_2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    phi = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return 0.5 * (1.0 + erf(x * _SQRT1_2)) + x * phi


@dataclass
class MixingMatrices:
    """Complex channel mixing: B maps inputs to modes, Cmat maps modes to outputs."""

    B: np.ndarray
    Cmat: np.ndarray

    def __post_init__(self):
        self.B = np.asarray(self.B, dtype=np.complex128)
        self.Cmat = np.asarray(self.Cmat, dtype=np.complex128)
        if self.B.ndim != 2 or self.Cmat.ndim != 2 or self.B.shape[0] != self.Cmat.shape[1]:
            raise InvalidArgumentError("mixing shapes must be B:(M,C), Cmat:(K,M)")
        if not (np.all(np.isfinite(self.B.view(np.float64)))
                and np.all(np.isfinite(self.Cmat.view(np.float64)))):
            raise InvalidArgumentError("mixing matrices must be finite")


@dataclass
class SonicBlock:
    """One spectral convolution block: M modes, mixing, skip projection."""

    sigma: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    t: np.ndarray
    u: np.ndarray
    mixing: MixingMatrices
    skip: np.ndarray
    stability: StabilityConfig = field(default_factory=StabilityConfig)
    gain_normalize: bool = True
    mode_dropout_rate: float = 0.0

    def __post_init__(self):
        for name in ("sigma", "alpha", "beta", "t"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.u = np.asarray(self.u, dtype=np.float64)
        self.skip = np.asarray(self.skip, dtype=np.float64)
        m = self.sigma.shape[0]
        if not (self.alpha.shape == self.beta.shape == self.t.shape == (m,)):
            raise InvalidArgumentError("per-mode parameter arrays must share length M")
        if self.u.ndim != 2 or self.u.shape[0] != m:
            raise InvalidArgumentError("u must have shape (M, D)")
        if m < 1:
            raise InvalidArgumentError("at least one mode is required")
        if self.mixing.B.shape[0] != m or self.mixing.Cmat.shape[1] != m:
            raise InvalidArgumentError("mixing matrices disagree with mode count")
        if self.skip.shape != (self.out_channels, self.in_channels):
            raise InvalidArgumentError(
                f"skip shape {self.skip.shape} must be (K={self.out_channels}, C={self.in_channels})"
            )
        if not 0.0 <= self.mode_dropout_rate < 1.0:
            raise InvalidArgumentError("mode_dropout_rate must lie in [0, 1)")
        if np.any(np.linalg.norm(self.u, axis=1) == 0.0):
            raise InvalidArgumentError("every mode direction seed u must be nonzero")

    @property
    def n_modes(self) -> int:
        return self.sigma.shape[0]

    @property
    def in_channels(self) -> int:
        return self.mixing.B.shape[1]

    @property
    def out_channels(self) -> int:
        return self.mixing.Cmat.shape[0]

    @property
    def ndim(self) -> int:
        return self.u.shape[1]

    @property
    def modes(self) -> list[ModeRaw]:
        return [
            ModeRaw(sigma=float(self.sigma[m]), alpha=float(self.alpha[m]),
                    beta=float(self.beta[m]), u=self.u[m].copy(), t=float(self.t[m]))
            for m in range(self.n_modes)
        ]

    def constrained_modes(self) -> list[Mode]:
        return [constrain_mode(raw, self.stability) for raw in self.modes]


@dataclass
class SpectralSymbol:
    """Assembled frequency response on a specific grid: values are K x C x half."""

    values: np.ndarray
    grid: FrequencyGrid

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.shape[2:] != self.grid.half_shape:
            raise InvalidArgumentError("symbol shape does not match grid half-spectrum")

    @property
    def out_channels(self) -> int:
        return self.values.shape[0]

    @property
    def in_channels(self) -> int:
        return self.values.shape[1]


@dataclass
class SonicNetwork:
    """Stack of blocks plus a pointwise real head projection."""

    blocks: list[SonicBlock]
    head: np.ndarray

    def __post_init__(self):
        self.head = np.asarray(self.head, dtype=np.float64)
        if not self.blocks:
            raise ConfigurationError("network needs at least one block")
        for i in range(len(self.blocks) - 1):
            k, c_next = self.blocks[i].out_channels, self.blocks[i + 1].in_channels
            if k != c_next:
                raise ConfigurationError(
                    f"block {i} emits {k} channels but block {i + 1} expects {c_next}"
                )
        if self.head.ndim != 2 or self.head.shape[1] != self.blocks[-1].out_channels:
            raise ConfigurationError(
                f"head shape {self.head.shape} incompatible with final width "
                f"{self.blocks[-1].out_channels}"
            )

    @property
    def in_channels(self) -> int:
        return self.blocks[0].in_channels

    @property
    def out_channels(self) -> int:
        return self.head.shape[0]


def dropout_scale(block: SonicBlock, training: bool, seed: int) -> np.ndarray:
    """Per-mode multiplier: Bernoulli keep mask with inverse-rate rescaling."""
    m = block.n_modes
    if not training or block.mode_dropout_rate == 0.0:
        return np.ones(m)
    rng = np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), _STREAM_DROPOUT]))
    keep = rng.random(m) >= block.mode_dropout_rate
    return keep.astype(np.float64) / (1.0 - block.mode_dropout_rate)


def mode_fields(block: SonicBlock, grid: FrequencyGrid,
                slab_rows: int | None = None) -> np.ndarray:
    """Stacked transfer fields of the block's modes, flattened: (M, F)."""
    fields = [
        transfer_field(mode, grid, slab_rows=slab_rows).reshape(-1)
        for mode in block.constrained_modes()
    ]
    return np.stack(fields, axis=0)


def gain_factors(values_flat: np.ndarray) -> np.ndarray:
    """Per-output-channel RMS magnitude over (input channel, frequency), floored."""
    rms = np.sqrt(np.mean(np.abs(values_flat) ** 2, axis=(1, 2)))
    return np.maximum(rms, GAIN_FLOOR)


def assemble_symbol(block: SonicBlock, grid: FrequencyGrid, training: bool = False,
                    seed: int = 0, slab_rows: int | None = None) -> SpectralSymbol:
    """Evaluate the block's continuous frequency response on a grid."""
    if block.ndim != grid.ndim:
        raise InvalidArgumentError(
            f"block is {block.ndim}-dimensional but grid has rank {grid.ndim}"
        )
    t_fields = mode_fields(block, grid, slab_rows=slab_rows)
    t_fields = t_fields * dropout_scale(block, training, seed)[:, None]
    values = np.einsum("km,mf,mc->kcf", block.mixing.Cmat, t_fields, block.mixing.B,
                       optimize=True)
    if block.gain_normalize:
        values = values / gain_factors(values)[:, None, None]
    shape = (block.out_channels, block.in_channels) + grid.half_shape
    return SpectralSymbol(values.reshape(shape), grid)


def rms_gain_normalize(symbol: SpectralSymbol) -> SpectralSymbol:
    """Divide each output channel by its RMS transfer gain over the half-spectrum."""
    flat = symbol.values.reshape(symbol.values.shape[0], symbol.values.shape[1], -1)
    values = flat / gain_factors(flat)[:, None, None]
    return SpectralSymbol(values.reshape(symbol.values.shape), symbol.grid)


def apply_symbol(symbol: SpectralSymbol, x: Spectrum) -> Spectrum:
    """Frequency-wise channel mixing of an input half-spectrum."""
    if x.channels != symbol.in_channels:
        raise InvalidArgumentError(
            f"spectrum has {x.channels} channels, symbol expects {symbol.in_channels}"
        )
    if x.grid.dims != symbol.grid.dims or x.grid.spacings != symbol.grid.spacings:
        raise InvalidArgumentError("spectrum grid does not match symbol grid")
    flat_sym = symbol.values.reshape(symbol.out_channels, symbol.in_channels, -1)
    flat_x = x.data.reshape(x.channels, -1)
    out = np.einsum("kcf,cf->kf", flat_sym, flat_x, optimize=True)
    out[:, 0] = out[:, 0].real  # DC coefficient of a real-output operator is real
    return Spectrum(out.reshape((symbol.out_channels,) + x.grid.half_shape), x.grid)


def block_forward(block: SonicBlock, x: Signal, training: bool = False,
                  seed: int = 0) -> Signal:
    """One block step: spectral filter + pointwise skip, then GELU."""
    if x.channels != block.in_channels:
        raise InvalidArgumentError(
            f"signal has {x.channels} channels, block expects {block.in_channels}"
        )
    symbol = assemble_symbol(block, x.grid, training=training, seed=seed)
    y = dft_inverse(apply_symbol(symbol, dft_forward(x)))
    pre = y.data + np.einsum("kc,c...->k...", block.skip, x.data)
    return Signal(gelu(pre), x.grid)


def network_forward(net: SonicNetwork, x: Signal, training: bool = False,
                    seed: int = 0) -> Signal:
    """Sequential block composition followed by the pointwise head."""
    out = x
    for i, block in enumerate(net.blocks):
        out = block_forward(block, out, training=training, seed=seed + i)
    logits = np.einsum("ok,k...->o...", net.head, out.data)
    return Signal(logits, x.grid)


def count_parameters(n_modes: int, in_channels: int, out_channels: int, ndim: int) -> int:
    """Learnable real scalars of the spectral operator: 2KM + 2MC + (4+D)M + 1."""
    if min(n_modes, in_channels, out_channels, ndim) < 1:
        raise InvalidArgumentError("all size arguments must be >= 1")
    return (2 * out_channels * n_modes + 2 * n_modes * in_channels
            + (4 + ndim) * n_modes + 1)


def operator_scalar_count(block: SonicBlock) -> int:
    """Enumerate the spectral operator's scalar parameter record.

    Counts the per-mode raws, the direction seeds, both complex mixing
    matrices as real pairs, and the single oscillation bound rho (stored with
    the operator, held fixed during training).  The skip projection belongs
    to the block recursion, not the operator, and is excluded.
    """
    per_mode = block.sigma.size + block.alpha.size + block.beta.size + block.t.size
    return int(per_mode + block.u.size + 2 * block.mixing.B.size
               + 2 * block.mixing.Cmat.size + 1)


def resample_to_grid(block: SonicBlock, new_grid: FrequencyGrid) -> SpectralSymbol:
    """Evaluate the same parameters on a different grid (Eq.-for-Eq. resampling)."""
    if block.ndim != new_grid.ndim:
        raise InvalidArgumentError(
            f"block is {block.ndim}-dimensional but grid has rank {new_grid.ndim}"
        )
    return assemble_symbol(block, new_grid)


def spatial_kernel(symbol: SpectralSymbol, k: int, c: int) -> tuple[Signal, float]:
    """Real spatial kernel of one channel pair, plus its imaginary residual.

    The half-spectrum entry is Hermitian-extended to the full grid before the
    inverse transform, matching what the real-output application path uses.
    """
    if not (0 <= k < symbol.out_channels and 0 <= c < symbol.in_channels):
        raise InvalidArgumentError("channel index out of range")
    full = hermitian_extend(symbol.values[k, c], symbol.grid.dims)
    kernel = np.fft.ifftn(full)
    scale = max(float(np.max(np.abs(kernel.real))), 1e-30)
    residual = float(np.max(np.abs(kernel.imag))) / scale
    return Signal(kernel.real[None], symbol.grid), residual


def random_block(rng: np.random.Generator, n_modes: int, in_channels: int,
                 out_channels: int, ndim: int,
                 stability: StabilityConfig | None = None,
                 gain_normalize: bool = True,
                 mode_dropout_rate: float = 0.0) -> SonicBlock:
    """Block with default-initialized modes and scaled Gaussian mixing."""
    stability = stability or StabilityConfig()
    raws = [init_mode_raw(rng, ndim) for _ in range(n_modes)]
    mix_scale = 1.0 / np.sqrt(n_modes)
    b = mix_scale * (rng.standard_normal((n_modes, in_channels))
                     + 1j * rng.standard_normal((n_modes, in_channels)))
    cmat = mix_scale * (rng.standard_normal((out_channels, n_modes))
                        + 1j * rng.standard_normal((out_channels, n_modes)))
    skip = rng.standard_normal((out_channels, in_channels)) / np.sqrt(in_channels)
    return SonicBlock(
        sigma=np.array([r.sigma for r in raws]),
        alpha=np.array([r.alpha for r in raws]),
        beta=np.array([r.beta for r in raws]),
        t=np.array([r.t for r in raws]),
        u=np.stack([r.u for r in raws]),
        mixing=MixingMatrices(B=b, Cmat=cmat),
        skip=skip,
        stability=stability,
        gain_normalize=gain_normalize,
        mode_dropout_rate=mode_dropout_rate,
    )


def build_network(rng: np.random.Generator, in_channels: int, out_channels: int,
                  width: int, depth: int, n_modes: int, ndim: int = 2,
                  gain_normalize: bool = True,
                  mode_dropout_rate: float = 0.0) -> SonicNetwork:
    """First block lifts C -> K, later blocks keep K; pointwise head on top."""
    blocks = []
    for i in range(depth):
        c_in = in_channels if i == 0 else width
        blocks.append(random_block(rng, n_modes, c_in, width, ndim,
                                   gain_normalize=gain_normalize,
                                   mode_dropout_rate=mode_dropout_rate))
    head = rng.standard_normal((out_channels, width)) / np.sqrt(width)
    return SonicNetwork(blocks=blocks, head=head)


def block_to_dict(block: SonicBlock) -> dict:
    return {
        "modes": block.n_modes,
        "in_channels": block.in_channels,
        "out_channels": block.out_channels,
        "ndim": block.ndim,
        "rho": block.stability.rho,
        "epsilon": block.stability.epsilon,
        "mode_dropout_rate": block.mode_dropout_rate,
        "gain_normalize": block.gain_normalize,
        "sigma": block.sigma.tolist(),
        "alpha": block.alpha.tolist(),
        "beta": block.beta.tolist(),
        "t": block.t.tolist(),
        "u": block.u.tolist(),
        "B_re": block.mixing.B.real.tolist(),
        "B_im": block.mixing.B.imag.tolist(),
        "C_re": block.mixing.Cmat.real.tolist(),
        "C_im": block.mixing.Cmat.imag.tolist(),
        "W_s": block.skip.tolist(),
    }


def block_from_dict(doc: dict) -> SonicBlock:
    return SonicBlock(
        sigma=np.array(doc["sigma"]),
        alpha=np.array(doc["alpha"]),
        beta=np.array(doc["beta"]),
        t=np.array(doc["t"]),
        u=np.array(doc["u"]),
        mixing=MixingMatrices(
            B=np.array(doc["B_re"]) + 1j * np.array(doc["B_im"]),
            Cmat=np.array(doc["C_re"]) + 1j * np.array(doc["C_im"]),
        ),
        skip=np.array(doc["W_s"]),
        stability=StabilityConfig(rho=doc["rho"], epsilon=doc["epsilon"]),
        gain_normalize=bool(doc["gain_normalize"]),
        mode_dropout_rate=float(doc["mode_dropout_rate"]),
    )


def network_to_dict(net: SonicNetwork) -> dict:
    return {
        "format": "sonic-model",
        "version": 1,
        "blocks": [block_to_dict(b) for b in net.blocks],
        "head": net.head.tolist(),
    }


def network_from_dict(doc: dict) -> SonicNetwork:
    if doc.get("format") != "sonic-model":
        raise InvalidArgumentError("not a sonic model document")
    return SonicNetwork(
        blocks=[block_from_dict(b) for b in doc["blocks"]],
        head=np.array(doc["head"]),
    )


def save_network(net: SonicNetwork, path) -> None:
    with open(path, "w") as fh:
        json.dump(network_to_dict(net), fh, indent=1)
        fh.write("\n")


def load_network(path) -> SonicNetwork:
    with open(path) as fh:
        return network_from_dict(json.load(fh))
