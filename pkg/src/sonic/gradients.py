"""Hand-derived reverse-mode gradients over the fixed operator graph.

Complex quantities use the pair convention: the gradient stored for a complex
parameter z is dL/dRe(z) + i*dL/dIm(z).  Cotangents of half-spectrum arrays
carry the multiplicity of the full spectrum: interior last-axis bins stand in
for a conjugate pair and weigh twice, the self-paired planes once.

The analytic path is audited against :func:`finite_difference_gradients`, a
central-difference oracle sharing nothing with it but the forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DiagnosticError, InvalidArgumentError
from .grid import FrequencyGrid, build_frequency_grid, standardize_array
from .modes import physical_direction, sigmoid, softplus
from .operator import (
    SonicBlock,
    SonicNetwork,
    GAIN_FLOOR,
    dropout_scale,
    gelu,
    gelu_grad,
)

BLOCK_PARAM_KEYS = ("sigma", "alpha", "beta", "t", "u",
                    "B_re", "B_im", "C_re", "C_im", "W_s")


@dataclass
class LossSpec:
    """What to optimize: pixelwise segmentation or center-patch classification."""

    kind: str = "segmentation"
    ce_weight: float = 1.0
    dice_weight: float = 1.0
    class_weights: np.ndarray | None = None
    center_fraction: float = 0.25


# ---------------------------------------------------------------------------
# Parameter addressing (shared by the optimizer and the FD oracle)

def block_param_views(block: SonicBlock) -> dict[str, np.ndarray]:
    """Writable array views of a block's raw parameters, serialization order."""
    return {
        "sigma": block.sigma,
        "alpha": block.alpha,
        "beta": block.beta,
        "t": block.t,
        "u": block.u,
        "B_re": block.mixing.B.real,
        "B_im": block.mixing.B.imag,
        "C_re": block.mixing.Cmat.real,
        "C_im": block.mixing.Cmat.imag,
        "W_s": block.skip,
    }


def param_views(net: SonicNetwork) -> list[tuple[str, np.ndarray]]:
    """All trainable arrays of a network as (label, writable view) pairs."""
    out = []
    for i, block in enumerate(net.blocks):
        for key, arr in block_param_views(block).items():
            out.append((f"blocks[{i}].{key}", arr))
    out.append(("head", net.head))
    return out


def zero_gradients(net: SonicNetwork) -> dict:
    return {
        "blocks": [
            {key: np.zeros_like(arr) for key, arr in block_param_views(b).items()}
            for b in net.blocks
        ],
        "head": np.zeros_like(net.head),
    }


def gradient_views(grads: dict) -> list[tuple[str, np.ndarray]]:
    """Flatten a gradient structure in the same order as :func:`param_views`."""
    out = []
    for i, block in enumerate(grads["blocks"]):
        for key in BLOCK_PARAM_KEYS:
            out.append((f"blocks[{i}].{key}", block[key]))
    out.append(("head", grads["head"]))
    return out


# ---------------------------------------------------------------------------
# Cached forward pass

@dataclass
class BlockCache:
    xb: np.ndarray          # (B, C, *dims)
    x_hat: np.ndarray       # (B, C, F)
    omega: np.ndarray       # (D, F)
    wsq: np.ndarray         # (F,)
    vhat: np.ndarray        # (M, D) physically normalized directions
    scale: np.ndarray       # (M,) mode scales s
    pole_re: np.ndarray
    pole_im: np.ndarray
    tau: np.ndarray
    p: np.ndarray           # (M, F) oriented frequency component
    perp: np.ndarray        # (M, F)
    denom: np.ndarray       # (M, F)
    t_scaled: np.ndarray    # (M, F) transfer values including dropout scaling
    drop: np.ndarray        # (M,)
    prenorm: np.ndarray     # (K, C, F)
    gain: np.ndarray | None  # (K,)
    floored: np.ndarray | None
    symbol: np.ndarray      # (K, C, F)
    pre: np.ndarray         # (B, K, *dims)


def _flat_omega(grid: FrequencyGrid) -> tuple[np.ndarray, np.ndarray]:
    axes = grid.omega_axes()
    omega = np.stack([np.broadcast_to(a, grid.half_shape).reshape(-1) for a in axes])
    wsq = np.zeros(omega.shape[1])
    for d in range(omega.shape[0]):
        wsq = wsq + omega[d] * omega[d]
    return omega, wsq


def _symbol_cached(block: SonicBlock, grid: FrequencyGrid, training: bool, seed: int):
    cfg = block.stability
    s = softplus(block.sigma) + cfg.epsilon
    pole_re = -softplus(block.alpha)
    pole_im = cfg.rho * np.tanh(block.beta)
    tau = softplus(block.t)
    vhat = np.stack([
        physical_direction(block.u[m] / np.linalg.norm(block.u[m]), grid.spacings)
        for m in range(block.n_modes)
    ])
    omega, wsq = _flat_omega(grid)
    p = np.zeros((block.n_modes, omega.shape[1]))
    for d in range(grid.ndim):
        p = p + vhat[:, d:d + 1] * omega[d][None, :]
    perp = wsq[None, :] - p * p
    denom_re = -pole_re[:, None] + tau[:, None] * perp
    denom_im = s[:, None] * p - pole_im[:, None]
    denom = denom_re + 1j * denom_im
    drop = dropout_scale(block, training, seed)
    t_scaled = (1.0 / denom) * drop[:, None]
    prenorm = np.einsum("km,mf,mc->kcf", block.mixing.Cmat, t_scaled, block.mixing.B,
                        optimize=True)
    if block.gain_normalize:
        rms = np.sqrt(np.mean(np.abs(prenorm) ** 2, axis=(1, 2)))
        gain = np.maximum(rms, GAIN_FLOOR)
        floored = rms < GAIN_FLOOR
        symbol = prenorm / gain[:, None, None]
    else:
        gain = None
        floored = None
        symbol = prenorm
    return (s, pole_re, pole_im, tau, vhat, omega, wsq, p, perp, denom, drop,
            t_scaled, prenorm, gain, floored, symbol)


def forward_block_cached(block: SonicBlock, xb: np.ndarray, grid: FrequencyGrid,
                         training: bool = False, seed: int = 0):
    """Batched block forward returning output and everything backward needs."""
    spatial = tuple(range(-grid.ndim, 0))
    b = xb.shape[0]
    x_hat = np.fft.rfftn(xb, axes=spatial).reshape(b, block.in_channels, -1)
    (s, pole_re, pole_im, tau, vhat, omega, wsq, p, perp, denom, drop,
     t_scaled, prenorm, gain, floored, symbol) = _symbol_cached(block, grid, training, seed)
    y_hat = np.einsum("kcf,bcf->bkf", symbol, x_hat, optimize=True)
    y_hat[:, :, 0] = y_hat[:, :, 0].real
    y = np.fft.irfftn(
        y_hat.reshape((b, block.out_channels) + grid.half_shape),
        s=grid.dims, axes=spatial,
    )
    pre = y + np.einsum("kc,bc...->bk...", block.skip, xb)
    out = gelu(pre)
    cache = BlockCache(
        xb=xb, x_hat=x_hat, omega=omega, wsq=wsq, vhat=vhat, scale=s,
        pole_re=pole_re, pole_im=pole_im, tau=tau, p=p, perp=perp, denom=denom,
        t_scaled=t_scaled, drop=drop, prenorm=prenorm, gain=gain, floored=floored,
        symbol=symbol, pre=pre,
    )
    return out, cache


def forward_network_cached(net: SonicNetwork, xb: np.ndarray, grid: FrequencyGrid,
                           training: bool = False, seed: int = 0):
    caches = []
    cur = xb
    for i, block in enumerate(net.blocks):
        cur, cache = forward_block_cached(block, cur, grid, training=training,
                                          seed=seed + i)
        caches.append(cache)
    logits = np.einsum("ok,bk...->bo...", net.head, cur)
    return logits, cur, caches


def network_logits(net: SonicNetwork, xb: np.ndarray, grid: FrequencyGrid) -> np.ndarray:
    """Inference-only batched forward (dropout off)."""
    logits, _, _ = forward_network_cached(net, xb, grid)
    return logits


# ---------------------------------------------------------------------------
# Backward pass

def _irfftn_adjoint(g_spatial: np.ndarray, grid: FrequencyGrid,
                    weights_flat: np.ndarray) -> np.ndarray:
    spatial = tuple(range(-grid.ndim, 0))
    g_hat = np.fft.rfftn(g_spatial, axes=spatial)
    lead = g_hat.shape[: g_hat.ndim - grid.ndim]
    return g_hat.reshape(lead + (-1,)) * (weights_flat / grid.size)


def _rfftn_adjoint(g_half_flat: np.ndarray, grid: FrequencyGrid) -> np.ndarray:
    spatial = tuple(range(-grid.ndim, 0))
    lead = g_half_flat.shape[:-1]
    full = np.zeros(lead + grid.dims, dtype=np.complex128)
    m = grid.dims[-1] // 2 + 1
    full[..., :m] = g_half_flat.reshape(lead + grid.half_shape)
    return np.fft.ifftn(full, axes=spatial).real * grid.size


def backward_block(block: SonicBlock, cache: BlockCache, grid: FrequencyGrid,
                   d_out: np.ndarray, weights_flat: np.ndarray):
    """Pull a cotangent through one block; returns (param grads, input cotangent)."""
    d_pre = d_out * gelu_grad(cache.pre)
    b = d_pre.shape[0]
    d_skip = np.einsum("bks,bcs->kc", d_pre.reshape(b, d_pre.shape[1], -1),
                       cache.xb.reshape(b, cache.xb.shape[1], -1))
    d_xb = np.einsum("kc,bk...->bc...", block.skip, d_pre)

    d_yhat = _irfftn_adjoint(d_pre, grid, weights_flat)
    d_yhat[..., 0] = d_yhat[..., 0].real  # forward zeroes the DC imaginary part
    d_symbol = np.einsum("bkf,bcf->kcf", d_yhat, np.conj(cache.x_hat), optimize=True)
    d_xhat = np.einsum("kcf,bkf->bcf", np.conj(cache.symbol), d_yhat, optimize=True)
    d_xb += _rfftn_adjoint(d_xhat, grid)

    if block.gain_normalize:
        gain = cache.gain
        n_entries = cache.prenorm.shape[1] * cache.prenorm.shape[2]
        d_prenorm = d_symbol / gain[:, None, None]
        d_gain = -np.sum((d_symbol * np.conj(cache.prenorm)).real, axis=(1, 2)) / gain**2
        live = ~cache.floored
        coef = np.where(live, d_gain / (gain * n_entries), 0.0)
        d_prenorm = d_prenorm + coef[:, None, None] * cache.prenorm
    else:
        d_prenorm = d_symbol

    b_mix, c_mix = block.mixing.B, block.mixing.Cmat
    d_cmat = np.einsum("kcf,mf,mc->km", d_prenorm, np.conj(cache.t_scaled),
                       np.conj(b_mix), optimize=True)
    d_bmix = np.einsum("kcf,km,mf->mc", d_prenorm, np.conj(c_mix),
                       np.conj(cache.t_scaled), optimize=True)
    d_t = np.einsum("kcf,km,mc->mf", d_prenorm, np.conj(c_mix), np.conj(b_mix),
                    optimize=True)
    d_t = d_t * cache.drop[:, None]

    d_denom = -d_t / np.conj(cache.denom) ** 2
    d_scale = np.sum(cache.p * d_denom.imag, axis=1)
    d_pole_re = -np.sum(d_denom.real, axis=1)
    d_pole_im = -np.sum(d_denom.imag, axis=1)
    d_tau = np.sum(d_denom.real * cache.perp, axis=1)

    coef = (d_denom * np.conj(1j * cache.scale[:, None]
                              - 2.0 * cache.tau[:, None] * cache.p)).real
    d_vhat = coef @ cache.omega.T  # (M, D)

    spacings = np.asarray(grid.spacings)
    d_u = np.zeros_like(block.u)
    for m in range(block.n_modes):
        u = block.u[m]
        u_norm = np.linalg.norm(u)
        v = u / u_norm
        v_tilde = v / spacings
        tilde_norm = np.linalg.norm(v_tilde)
        vhat = cache.vhat[m]
        d_tilde = (d_vhat[m] - vhat * np.dot(vhat, d_vhat[m])) / tilde_norm
        d_v = d_tilde / spacings
        d_u[m] = (d_v - v * np.dot(v, d_v)) / u_norm

    grads = {
        "sigma": d_scale * sigmoid(block.sigma),
        "alpha": -d_pole_re * sigmoid(block.alpha),
        "beta": d_pole_im * block.stability.rho * (1.0 - np.tanh(block.beta) ** 2),
        "t": d_tau * sigmoid(block.t),
        "u": d_u,
        "B_re": d_bmix.real,
        "B_im": d_bmix.imag,
        "C_re": d_cmat.real,
        "C_im": d_cmat.imag,
        "W_s": d_skip,
    }
    return grads, d_xb


# ---------------------------------------------------------------------------
# Batch preparation and the public entry points

def prepare_batch(batch, in_channels: int):
    """Stack, channel-truncate, and standardize a list of task samples."""
    if not batch:
        raise InvalidArgumentError("batch must be non-empty")
    images = np.stack([np.asarray(s.image, dtype=np.float64) for s in batch])
    if images.shape[1] < in_channels:
        raise InvalidArgumentError(
            f"samples have {images.shape[1]} channels, network expects {in_channels}"
        )
    images = images[:, :in_channels]
    mean = images.mean(axis=(-2, -1), keepdims=True)
    std = images.std(axis=(-2, -1), keepdims=True)
    xb = (images - mean) / np.maximum(std, 1e-6)
    first = batch[0]
    if np.isscalar(first.target) or np.asarray(first.target).ndim == 0:
        targets = np.array([int(s.target) for s in batch])
    else:
        targets = np.stack([np.asarray(s.target) for s in batch])
    grid = build_frequency_grid(images.shape[2:], (1.0,) * (images.ndim - 2))
    return xb, targets, grid


def _loss_with_grad(logits: np.ndarray, targets: np.ndarray, spec: LossSpec):
    from .train import batch_loss_with_grad

    return batch_loss_with_grad(logits, targets, spec)


def loss_and_gradients(net: SonicNetwork, batch, loss_spec: LossSpec):
    """Mean batch loss and exact partials for every raw parameter."""
    xb, targets, grid = prepare_batch(batch, net.in_channels)
    logits, feat, caches = forward_network_cached(net, xb, grid)
    loss, d_logits = _loss_with_grad(logits, targets, loss_spec)
    if not np.isfinite(loss):
        raise DiagnosticError(_diagnose(net, "loss"))

    nb = d_logits.shape[0]
    grads = {"blocks": [None] * len(net.blocks),
             "head": np.einsum("bos,bks->ok", d_logits.reshape(nb, d_logits.shape[1], -1),
                               feat.reshape(nb, feat.shape[1], -1))}
    d_cur = np.einsum("ok,bo...->bk...", net.head, d_logits)
    weights_flat = grid.hermitian_weights().reshape(-1)
    for i in range(len(net.blocks) - 1, -1, -1):
        block_grads, d_cur = backward_block(net.blocks[i], caches[i], grid,
                                            d_cur, weights_flat)
        grads["blocks"][i] = block_grads
    return float(loss), grads


def _diagnose(net: SonicNetwork, where: str) -> str:
    bad = []
    for label, arr in param_views(net):
        if not np.all(np.isfinite(arr)):
            bad.append(label)
    suffix = f"; non-finite parameter blocks: {', '.join(bad)}" if bad else ""
    return f"non-finite {where} encountered{suffix}"


def _loss_only(net: SonicNetwork, xb, targets, grid, loss_spec: LossSpec) -> float:
    logits, _, _ = forward_network_cached(net, xb, grid)
    loss, _ = _loss_with_grad(logits, targets, loss_spec)
    return float(loss)


def finite_difference_gradients(net: SonicNetwork, batch, loss_spec: LossSpec,
                                h: float = 1e-5) -> dict:
    """Central differences over every scalar parameter, dropout disabled.

    Parameters with magnitude above 1 use a relative step h*|theta|.
    """
    if h <= 0:
        raise InvalidArgumentError("step h must be positive")
    xb, targets, grid = prepare_batch(batch, net.in_channels)
    grads = zero_gradients(net)
    grad_list = gradient_views(grads)
    for (label, view), (_, gview) in zip(param_views(net), grad_list):
        for idx in np.ndindex(view.shape):
            theta = float(view[idx])
            step = h * abs(theta) if abs(theta) > 1.0 else h
            view[idx] = theta + step
            loss_plus = _loss_only(net, xb, targets, grid, loss_spec)
            view[idx] = theta - step
            loss_minus = _loss_only(net, xb, targets, grid, loss_spec)
            view[idx] = theta
            gview[idx] = (loss_plus - loss_minus) / (2.0 * step)
    return grads


@dataclass
class GradcheckReport:
    rows: list[tuple[str, float, float]]  # (block label, max rel err, mean rel err)
    max_rel_error: float
    passed: bool

    def as_csv(self) -> str:
        lines = ["block,max_rel_err,mean_rel_err"]
        for label, mx, mean in self.rows:
            lines.append(f"{label},{mx:.6e},{mean:.6e}")
        return "\n".join(lines) + "\n"


def gradient_check(net: SonicNetwork, batch, loss_spec: LossSpec,
                   h: float = 1e-5, tolerance: float = 1e-4) -> GradcheckReport:
    """Compare analytic and finite-difference gradients per parameter block."""
    _, analytic = loss_and_gradients(net, batch, loss_spec)
    numeric = finite_difference_gradients(net, batch, loss_spec, h=h)
    rows = []
    worst = 0.0
    for (label, ga), (_, gf) in zip(gradient_views(analytic), gradient_views(numeric)):
        denom = np.maximum(np.maximum(np.abs(ga), np.abs(gf)), 1e-8)
        rel = np.abs(ga - gf) / denom
        rows.append((label, float(rel.max()), float(rel.mean())))
        worst = max(worst, float(rel.max()))
    return GradcheckReport(rows=rows, max_rel_error=worst, passed=worst < tolerance)
