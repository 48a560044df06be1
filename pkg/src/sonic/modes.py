"""Oriented spectral modes: constraint reparameterization and frequency response.

A mode's response at frequency ``w`` is::

    T(w) = 1 / ( i*s*(w . v) - a + tau*|w_perp|^2 )

with unit direction ``v``, scale ``s > 0``, pole ``a`` (Re a < 0), and
transverse penalty ``tau >= 0``.  ``|w_perp|^2`` is evaluated as
``|w|^2 - (w . v)^2``, valid because ``v`` is unit.  The real part of the
denominator is at least ``-Re(a) > 0``, so the response is finite everywhere
and bounded by ``1/|Re(a)|``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidArgumentError
from .grid import FrequencyGrid


def softplus(x):
    """Numerically stable log(1 + exp(x))."""
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class StabilityConfig:
    """Bounds baked into the reparameterization: oscillation cap and scale floor."""

    rho: float = math.pi
    epsilon: float = 1e-4

    def __post_init__(self):
        if not (self.rho > 0.0 and self.epsilon > 0.0):
            raise InvalidArgumentError("rho and epsilon must be positive")


@dataclass
class ModeRaw:
    """Unconstrained parameters behind one mode."""

    sigma: float
    alpha: float
    beta: float
    u: np.ndarray
    t: float

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.u.ndim != 1 or self.u.size == 0:
            raise InvalidArgumentError("u must be a non-empty vector")
        if not np.linalg.norm(self.u) > 0.0:
            raise InvalidArgumentError("u must have positive norm")


@dataclass(frozen=True)
class Mode:
    """Constrained mode parameters; invariants hold by construction."""

    direction: np.ndarray
    scale: float
    pole_re: float
    pole_im: float
    transverse: float


def constrain_mode(raw: ModeRaw, cfg: StabilityConfig) -> Mode:
    """Map unconstrained parameters onto the stable-mode manifold."""
    norm = float(np.linalg.norm(raw.u))
    if not norm > 0.0:
        raise InvalidArgumentError("u must have positive norm")
    return Mode(
        direction=raw.u / norm,
        scale=float(softplus(raw.sigma)) + cfg.epsilon,
        pole_re=-float(softplus(raw.alpha)),
        pole_im=float(cfg.rho * np.tanh(raw.beta)),
        transverse=float(softplus(raw.t)),
    )


def physical_direction(v: np.ndarray, spacings) -> np.ndarray:
    """Rescale a unit direction by inverse spacings and renormalize.

    Keeps the meaning of "along v" fixed in physical units when axes are
    sampled at different rates.  Isotropic spacings return v unchanged.
    """
    v = np.asarray(v, dtype=np.float64)
    spacings = np.asarray(spacings, dtype=np.float64)
    if np.all(spacings == spacings[0]):
        return v.copy()
    scaled = v / spacings
    return scaled / np.linalg.norm(scaled)


def init_mode_raw(rng: np.random.Generator, ndim: int) -> ModeRaw:
    """Default initialization: uniform orientation, moderate bandwidth."""
    if ndim == 2:
        theta = rng.uniform(0.0, math.pi)
        u = np.array([math.cos(theta), math.sin(theta)])
    else:
        u = rng.standard_normal(ndim)
        u = u / np.linalg.norm(u)
    return ModeRaw(sigma=0.0, alpha=0.0, beta=float(rng.uniform(-0.5, 0.5)), u=u, t=-2.0)


def transfer_at(mode: Mode, omega) -> complex:
    """Response of a single mode at one frequency vector."""
    omega = np.asarray(omega, dtype=np.float64).reshape(-1)
    axes = tuple(np.full((1,) * omega.size, omega[d]) for d in range(omega.size))
    return complex(_evaluate(mode, axes, (1,) * omega.size).reshape(-1)[0])


def transfer_field(mode: Mode, grid: FrequencyGrid, slab_rows: int | None = None) -> np.ndarray:
    """Sample the mode response on a grid's half-spectrum.

    The direction is first renormalized to physical units for the grid's
    spacings.  ``slab_rows`` chunks the leading frequency axis to bound peak
    memory; results are bitwise identical to whole-grid evaluation because
    every operation is per-frequency.
    """
    if mode.direction.size != grid.ndim:
        raise InvalidArgumentError(
            f"mode dimension {mode.direction.size} does not match grid rank {grid.ndim}"
        )
    direction = physical_direction(mode.direction, grid.spacings)
    phys = replace(mode, direction=direction)
    omega = grid.omega_axes()
    if slab_rows is None or grid.ndim == 1:
        return _evaluate(phys, omega, grid.half_shape)
    n_rows = grid.half_shape[0]
    slabs = []
    for start in range(0, n_rows, slab_rows):
        stop = min(start + slab_rows, n_rows)
        slab_omega = (omega[0][start:stop],) + omega[1:]
        slab_shape = (stop - start,) + grid.half_shape[1:]
        slabs.append(_evaluate(phys, slab_omega, slab_shape))
    return np.concatenate(slabs, axis=0)


def _evaluate(mode: Mode, omega_axes, shape) -> np.ndarray:
    # Fixed accumulation order over axes keeps evaluation deterministic.
    p = np.zeros(shape)
    wsq = np.zeros(shape)
    for d, w in enumerate(omega_axes):
        p = p + w * mode.direction[d]
        wsq = wsq + w * w
    perp = wsq - p * p
    denom_re = -mode.pole_re + mode.transverse * perp
    denom_im = mode.scale * p - mode.pole_im
    return 1.0 / (denom_re + 1j * denom_im)
