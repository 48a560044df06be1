"""Brute-force reference implementations used only for verification.

Everything here is deliberately slow and structure-free: direct summation
instead of fast transforms, dense linear solves, and a hand-rolled matrix
exponential, so no code is shared with the production path being checked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .grid import FrequencyGrid, build_frequency_grid
from .modes import Mode, transfer_field


@dataclass(frozen=True)
class LtiSystem:
    """State-space triple (A, B, C) of a linear time-invariant system."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", np.atleast_2d(np.asarray(self.A, dtype=np.complex128)))
        object.__setattr__(self, "B", np.atleast_2d(np.asarray(self.B, dtype=np.complex128)))
        object.__setattr__(self, "C", np.atleast_2d(np.asarray(self.C, dtype=np.complex128)))
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape[0] != n or self.C.shape[1] != n:
            raise InvalidArgumentError("inconsistent state-space shapes")


def circular_convolve_direct(kernel: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Periodic convolution by direct summation over all shifts.

    kernel: (C_out, C_in, N1..ND) or (C_in, N1..ND); x: (C_in, N1..ND).
    Returns (C_out, N1..ND).  O(N^2) multiplies, no transforms.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if kernel.ndim == x.ndim:
        kernel = kernel[None]
    ndim = x.ndim - 1
    dims = x.shape[1:]
    if kernel.shape[1:] != x.shape:
        raise InvalidArgumentError("kernel/input shape mismatch")
    out = np.zeros((kernel.shape[0],) + dims)
    axes = tuple(range(1, ndim + 1))
    for tau in np.ndindex(*dims):
        shifted = np.roll(x, shift=tau, axis=axes)
        k_tau = kernel[(slice(None), slice(None)) + tau]  # (C_out, C_in)
        out += np.einsum("oc,c...->o...", k_tau, shifted)
    return out


def direct_dft(x: np.ndarray, grid: FrequencyGrid, inverse: bool = False) -> np.ndarray:
    """Full-grid DFT by explicit O(N^2) summation over the flattened lattice."""
    x = np.asarray(x)
    dims = grid.dims
    lead = x.shape[: x.ndim - grid.ndim]
    n_tot = grid.size
    idx = [np.arange(n) for n in dims]
    mesh = np.meshgrid(*idx, indexing="ij")
    flat = np.stack([m.reshape(-1) for m in mesh], axis=1)  # (N, D)
    phase = np.zeros((n_tot, n_tot))
    for d, n in enumerate(dims):
        phase += np.outer(flat[:, d], flat[:, d]) * (2.0 * np.pi / n)
    sign = 1.0 if inverse else -1.0
    mat = np.exp(sign * 1j * phase)
    flat_x = x.reshape(lead + (n_tot,))
    out = flat_x @ mat.T
    if inverse:
        out = out / n_tot
    return out.reshape(lead + dims)


def direct_dft_half(x: np.ndarray, grid: FrequencyGrid) -> np.ndarray:
    """Stored half-spectrum bins of the direct full DFT of a real signal."""
    full = direct_dft(x, grid)
    return full[..., : grid.dims[-1] // 2 + 1]


def resolvent_transfer(sys: LtiSystem, s: complex) -> np.ndarray:
    """Transfer matrix C (sI - A)^-1 B by dense linear solve."""
    n = sys.A.shape[0]
    lhs = s * np.eye(n, dtype=np.complex128) - sys.A
    try:
        z = np.linalg.solve(lhs, sys.B)
    except np.linalg.LinAlgError as exc:
        raise InvalidArgumentError(f"(sI - A) singular at s={s}") from exc
    return sys.C @ z


_PADE6 = [1.0, 0.5, 5.0 / 44.0, 1.0 / 66.0, 1.0 / 792.0, 1.0 / 15840.0, 1.0 / 665280.0]


def expm_pade6(a: np.ndarray) -> np.ndarray:
    """Matrix exponential by scaling-and-squaring with a degree-6 Pade approximant."""
    a = np.atleast_2d(np.asarray(a, dtype=np.complex128))
    norm = np.linalg.norm(a, 1)
    squarings = max(0, int(np.ceil(np.log2(norm))) + 1) if norm > 0 else 0
    a_scaled = a / (2.0**squarings)
    power = np.eye(a.shape[0], dtype=np.complex128)
    num = _PADE6[0] * power
    den = _PADE6[0] * power
    for k in range(1, 7):
        power = power @ a_scaled
        num = num + _PADE6[k] * power
        den = den + _PADE6[k] * ((-1.0) ** k) * power
    result = np.linalg.solve(den, num)
    for _ in range(squarings):
        result = result @ result
    return result


def impulse_response_numeric(sys: LtiSystem, t_max: float, dt: float):
    """Sampled kernel K(t) = C e^{At} B on [0, t_max] with step dt."""
    if dt <= 0:
        raise InvalidArgumentError("dt must be positive")
    ts = np.arange(0.0, t_max + 0.5 * dt, dt)
    p, m = sys.C.shape[0], sys.B.shape[1]
    kernel = np.empty((len(ts), p, m), dtype=np.complex128)
    for i, t in enumerate(ts):
        kernel[i] = sys.C @ expm_pade6(sys.A * t) @ sys.B
    return ts, kernel


def laplace_numeric(ts: np.ndarray, kernel: np.ndarray, s: complex) -> np.ndarray:
    """Trapezoidal Laplace transform of a sampled kernel at a single point s."""
    weights = np.exp(-s * ts)
    integrand = kernel * weights[:, None, None]
    return np.trapezoid(integrand, ts, axis=0)


def s4nd_reduction_check(mode: Mode, axis: int, grid: FrequencyGrid) -> float:
    """Max deviation of an axis-aligned, tau=0 mode from the scalar resolvent form."""
    from .modes import physical_direction

    direction = physical_direction(mode.direction, grid.spacings)
    e_axis = np.zeros(grid.ndim)
    e_axis[axis] = 1.0
    if not np.array_equal(direction, e_axis):
        raise InvalidArgumentError("mode direction is not the requested axis after normalization")
    if mode.transverse != 0.0:
        raise InvalidArgumentError("reduction check requires zero transverse penalty")
    field = transfer_field(mode, grid)
    omega_axis = grid.omega_axes()[axis]
    pole = mode.pole_re + 1j * mode.pole_im
    scalar = 1.0 / (1j * mode.scale * omega_axis - pole)
    scalar = np.broadcast_to(scalar, grid.half_shape)
    return float(np.max(np.abs(field - scalar)))


def verify_all(seed: int = 0) -> list[tuple[str, bool, str]]:
    """Run every oracle-backed property; returns (name, passed, detail) rows."""
    from . import operator as op
    from .grid import Signal, dft_forward, dft_inverse

    rng = np.random.default_rng(seed)
    results = []

    def record(name, passed, detail):
        results.append((name, bool(passed), detail))

    # Direct DFT vs fast transform, including odd sizes.
    worst = 0.0
    for dims in [(4,), (7,), (8, 8), (5, 6), (3, 5, 4), (16, 16)]:
        g = build_frequency_grid(dims, (1.0,) * len(dims))
        x = rng.standard_normal((2,) + dims)
        fast = dft_forward(Signal(x, g)).data
        slow = direct_dft_half(x, g)
        scale = max(np.max(np.abs(slow)), 1e-30)
        worst = max(worst, float(np.max(np.abs(fast - slow)) / scale))
    record("direct_dft_matches_fast", worst < 1e-10, f"max rel dev {worst:.3e}")

    # Convolution theorem on random discrete signals, via direct paths only.
    worst = 0.0
    for dims in [(6,), (4, 4), (6, 6), (3, 4)]:
        g = build_frequency_grid(dims, (1.0,) * len(dims))
        f = rng.standard_normal((1,) + dims)
        h = rng.standard_normal((1, 1) + dims)
        conv = circular_convolve_direct(h, f)
        lhs = direct_dft(conv, g)
        rhs = direct_dft(h[0], g) * direct_dft(f, g)
        scale = max(np.max(np.abs(lhs)), 1e-30)
        worst = max(worst, float(np.max(np.abs(lhs - rhs)) / scale))
    record("convolution_theorem", worst < 1e-9, f"max rel dev {worst:.3e}")

    # Absorbed-parameter identity: 1/(i s w - a) == (1/s) * C(i w I - a/s)^-1 B.
    worst = 0.0
    for _ in range(100):
        s = float(rng.uniform(0.3, 3.0))
        a = complex(-rng.uniform(0.2, 3.0), rng.uniform(-2.0, 2.0))
        w = float(rng.uniform(-np.pi, np.pi))
        direct = 1.0 / (1j * s * w - a)
        sys = LtiSystem(A=[[a / s]], B=[[1.0]], C=[[1.0]])
        absorbed = resolvent_transfer(sys, 1j * w)[0, 0] / s
        worst = max(worst, abs(direct - absorbed) / max(abs(direct), 1e-30))
    record("absorbed_parameter_identity", worst < 1e-12, f"max rel dev {worst:.3e}")

    # Impulse-response quadrature converges to the resolvent on the imaginary axis.
    sys = LtiSystem(A=[[-1.0]], B=[[1.0]], C=[[1.0]])
    ts, kern = impulse_response_numeric(sys, t_max=40.0, dt=1e-3)
    approx = laplace_numeric(ts, kern, 1j)[0, 0]
    exact = resolvent_transfer(sys, 1j)[0, 0]
    dev = abs(approx - exact)
    record("impulse_laplace_quadrature", dev < 1e-3, f"dev {dev:.3e}")

    # Axis-aligned reduction to the scalar resolvent on a 16x16 grid sweep.
    g = build_frequency_grid((16, 16), (1.0, 1.0))
    worst = 0.0
    for axis in (0, 1):
        e = np.zeros(2)
        e[axis] = 1.0
        mode = Mode(direction=e, scale=float(rng.uniform(0.5, 2.0)),
                    pole_re=-float(rng.uniform(0.5, 2.0)),
                    pole_im=float(rng.uniform(-1.0, 1.0)), transverse=0.0)
        worst = max(worst, s4nd_reduction_check(mode, axis, g))
    record("s4nd_axis_reduction", worst < 1e-15, f"max abs dev {worst:.3e}")

    # Spectral application equals direct circular convolution with the
    # symbol's spatial kernel.
    worst = 0.0
    for _ in range(5):
        dims = (int(rng.integers(3, 8)), int(rng.integers(3, 8)))
        g = build_frequency_grid(dims, (1.0, 1.0))
        block = op.random_block(rng, n_modes=2, in_channels=2, out_channels=2,
                                ndim=2, gain_normalize=False)
        symbol = op.assemble_symbol(block, g)
        x = rng.standard_normal((2,) + dims)
        spectral = dft_inverse(op.apply_symbol(symbol, dft_forward(Signal(x, g)))).data
        kernel = np.stack([
            np.stack([op.spatial_kernel(symbol, k, c)[0].data[0] for c in range(2)])
            for k in range(2)
        ])
        direct = circular_convolve_direct(kernel, x)
        scale = max(np.max(np.abs(direct)), 1e-30)
        worst = max(worst, float(np.max(np.abs(spectral - direct)) / scale))
    record("spectral_equals_direct_convolution", worst < 1e-9, f"max rel dev {worst:.3e}")

    return results
