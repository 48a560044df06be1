import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sonic import operator as op
from sonic.errors import ConfigurationError, InvalidArgumentError
from sonic.grid import Signal, Spectrum, build_frequency_grid, dft_forward, dft_inverse
from sonic.modes import StabilityConfig, transfer_field
from sonic.oracle import circular_convolve_direct


def unit_block(n_modes=1, c=1, k=1, gain=False, rng=None, **kw):
    rng = rng or np.random.default_rng(0)
    return op.random_block(rng, n_modes, c, k, 2, gain_normalize=gain, **kw)


def test_assemble_rank_one_unit_mixing(rng):
    g = build_frequency_grid((6, 6), (1.0, 1.0))
    block = unit_block(rng=rng)
    block.mixing.B[:] = 1.0
    block.mixing.Cmat[:] = 1.0
    symbol = op.assemble_symbol(block, g)
    field = transfer_field(block.constrained_modes()[0], g)
    np.testing.assert_array_equal(symbol.values[0, 0], field)


def test_assemble_zero_mixing_annihilates(rng):
    g = build_frequency_grid((4, 4), (1.0, 1.0))
    block = unit_block(n_modes=3, c=2, k=2, rng=rng)
    block.mixing.B[:] = 0.0
    symbol = op.assemble_symbol(block, g)
    np.testing.assert_array_equal(symbol.values, 0.0)


def test_assemble_superposition(rng):
    g = build_frequency_grid((5, 4), (1.0, 1.0))
    block = unit_block(n_modes=2, rng=rng)
    block.mixing.B[:] = 1.0
    block.mixing.Cmat[:] = 1.0
    symbol = op.assemble_symbol(block, g)
    t1, t2 = (transfer_field(m, g) for m in block.constrained_modes())
    np.testing.assert_allclose(symbol.values[0, 0], t1 + t2, rtol=0, atol=1e-15)


def test_gain_normalize_constant_magnitude():
    g = build_frequency_grid((4, 4), (1.0, 1.0))
    values = np.full((2, 3) + g.half_shape, 4.0, dtype=complex)
    out = op.rms_gain_normalize(op.SpectralSymbol(values, g))
    np.testing.assert_allclose(np.abs(out.values), 1.0, atol=1e-12)


def test_gain_normalize_idempotent(rng):
    g = build_frequency_grid((4, 4), (1.0, 1.0))
    values = rng.standard_normal((2, 2) + g.half_shape) \
        + 1j * rng.standard_normal((2, 2) + g.half_shape)
    once = op.rms_gain_normalize(op.SpectralSymbol(values, g))
    twice = op.rms_gain_normalize(once)
    assert np.max(np.abs(once.values - twice.values)) < 1e-12


def test_gain_normalize_zero_symbol():
    g = build_frequency_grid((4, 4), (1.0, 1.0))
    out = op.rms_gain_normalize(op.SpectralSymbol(np.zeros((1, 1) + g.half_shape,
                                                           complex), g))
    np.testing.assert_array_equal(out.values, 0.0)


def test_gain_normalized_rms_is_one(rng):
    g = build_frequency_grid((6, 6), (1.0, 1.0))
    block = unit_block(n_modes=3, c=2, k=4, gain=True, rng=rng)
    symbol = op.assemble_symbol(block, g)
    rms = np.sqrt(np.mean(np.abs(symbol.values) ** 2, axis=(1, 2, 3)))
    np.testing.assert_allclose(rms, 1.0, atol=1e-10)


def test_apply_zero_spectrum(rng):
    g = build_frequency_grid((4, 4), (1.0, 1.0))
    block = unit_block(n_modes=2, c=2, k=3, rng=rng)
    symbol = op.assemble_symbol(block, g)
    out = op.apply_symbol(symbol, Spectrum(np.zeros((2,) + g.half_shape, complex), g))
    np.testing.assert_array_equal(out.data, 0.0)


def test_apply_identity_symbol(rng):
    g = build_frequency_grid((4, 4), (1.0, 1.0))
    eye = np.zeros((2, 2) + g.half_shape, complex)
    eye[0, 0] = 1.0
    eye[1, 1] = 1.0
    x = dft_forward(Signal(rng.standard_normal((2, 4, 4)), g))
    out = op.apply_symbol(op.SpectralSymbol(eye, g), x)
    np.testing.assert_array_equal(out.data, x.data)


def test_apply_channel_mismatch(rng):
    g = build_frequency_grid((4, 4), (1.0, 1.0))
    block = unit_block(c=2, k=2, rng=rng)
    symbol = op.assemble_symbol(block, g)
    with pytest.raises(InvalidArgumentError):
        op.apply_symbol(symbol, Spectrum(np.zeros((3,) + g.half_shape, complex), g))


def test_apply_matches_direct_convolution(rng):
    g = build_frequency_grid((4, 4), (1.0, 1.0))
    block = unit_block(n_modes=2, rng=rng)
    symbol = op.assemble_symbol(block, g)
    x = rng.standard_normal((1, 4, 4))
    spectral = dft_inverse(op.apply_symbol(symbol, dft_forward(Signal(x, g)))).data
    kernel, residual = op.spatial_kernel(symbol, 0, 0)
    assert residual < 1e-8
    direct = circular_convolve_direct(kernel.data[None], x)
    assert np.max(np.abs(spectral - direct)) < 1e-9


def test_spatial_kernel_of_flat_symbol():
    g = build_frequency_grid((4, 4), (1.0, 1.0))
    ones = np.ones((1, 1) + g.half_shape, complex)
    kernel, residual = op.spatial_kernel(op.SpectralSymbol(ones, g), 0, 0)
    expected = np.zeros((4, 4))
    expected[0, 0] = 1.0
    np.testing.assert_allclose(kernel.data[0], expected, atol=1e-12)
    assert residual < 1e-8

    zero, _ = op.spatial_kernel(op.SpectralSymbol(np.zeros_like(ones), g), 0, 0)
    np.testing.assert_array_equal(zero.data, 0.0)


def test_block_forward_zero_parameters(rng):
    g = build_frequency_grid((8, 8), (1.0, 1.0))
    block = unit_block(n_modes=2, c=2, k=3, rng=rng)
    block.mixing.B[:] = 0.0
    block.skip[:] = 0.0
    out = op.block_forward(block, Signal(rng.standard_normal((2, 8, 8)), g))
    np.testing.assert_array_equal(out.data, 0.0)


def test_block_forward_deterministic(rng):
    g = build_frequency_grid((8, 8), (1.0, 1.0))
    block = unit_block(n_modes=2, c=2, k=2, gain=True, rng=rng)
    x = Signal(rng.standard_normal((2, 8, 8)), g)
    a = op.block_forward(block, x)
    b = op.block_forward(block, x)
    np.testing.assert_array_equal(a.data, b.data)


def test_pre_nonlinearity_map_is_linear(rng):
    g = build_frequency_grid((8, 8), (1.0, 1.0))
    block = unit_block(n_modes=2, c=2, k=2, gain=True, rng=rng)
    symbol = op.assemble_symbol(block, g)

    def linear(x):
        y = dft_inverse(op.apply_symbol(symbol, dft_forward(Signal(x, g)))).data
        return y + np.einsum("kc,c...->k...", block.skip, x)

    x1 = rng.standard_normal((2, 8, 8))
    x2 = rng.standard_normal((2, 8, 8))
    a, b = 0.7, -1.3
    lhs = linear(a * x1 + b * x2)
    rhs = a * linear(x1) + b * linear(x2)
    assert np.max(np.abs(lhs - rhs)) < 1e-9 * max(1.0, np.max(np.abs(rhs)))


def test_pre_nonlinearity_shift_equivariance(rng):
    g = build_frequency_grid((8, 8), (1.0, 1.0))
    block = unit_block(n_modes=3, c=2, k=2, gain=True, rng=rng)
    symbol = op.assemble_symbol(block, g)

    def linear(x):
        y = dft_inverse(op.apply_symbol(symbol, dft_forward(Signal(x, g)))).data
        return y + np.einsum("kc,c...->k...", block.skip, x)

    x = rng.standard_normal((2, 8, 8))
    for shift in [(1, 0), (0, 3), (2, 5)]:
        lhs = linear(np.roll(x, shift, axis=(1, 2)))
        rhs = np.roll(linear(x), shift, axis=(1, 2))
        assert np.max(np.abs(lhs - rhs)) < 1e-9 * max(1.0, np.max(np.abs(rhs)))


def test_real_in_real_out_residual(rng):
    g = build_frequency_grid((8, 8), (1.0, 1.0))
    block = unit_block(n_modes=2, c=1, k=1, gain=True, rng=rng)
    symbol = op.assemble_symbol(block, g)
    x = rng.standard_normal((1, 8, 8))
    product = symbol.values[0, 0] * dft_forward(Signal(x, g)).data[0]
    from sonic.grid import hermitian_extend

    full = hermitian_extend(product, g.dims)
    y_complex = np.fft.ifftn(full)
    assert (np.max(np.abs(y_complex.imag))
            < 1e-10 * max(1.0, np.max(np.abs(y_complex.real))))


def test_mode_dropout_seeded_and_training_only(rng):
    g = build_frequency_grid((6, 6), (1.0, 1.0))
    block = unit_block(n_modes=8, c=2, k=2, rng=rng, mode_dropout_rate=0.5)
    x = Signal(rng.standard_normal((2, 6, 6)), g)
    eval_a = op.block_forward(block, x, training=False, seed=1)
    eval_b = op.block_forward(block, x, training=False, seed=2)
    np.testing.assert_array_equal(eval_a.data, eval_b.data)
    train_a = op.block_forward(block, x, training=True, seed=1)
    train_b = op.block_forward(block, x, training=True, seed=1)
    train_c = op.block_forward(block, x, training=True, seed=3)
    np.testing.assert_array_equal(train_a.data, train_b.data)
    assert np.any(train_a.data != train_c.data)


def test_network_single_block_identity_head(rng):
    g = build_frequency_grid((8, 8), (1.0, 1.0))
    block = unit_block(n_modes=2, c=2, k=3, gain=True, rng=rng)
    net = op.SonicNetwork(blocks=[block], head=np.eye(3))
    x = Signal(rng.standard_normal((2, 8, 8)), g)
    np.testing.assert_array_equal(op.network_forward(net, x).data,
                                  op.block_forward(block, x).data)


def test_network_zero_second_block(rng):
    g = build_frequency_grid((8, 8), (1.0, 1.0))
    b1 = unit_block(n_modes=2, c=2, k=3, rng=rng)
    b2 = unit_block(n_modes=2, c=3, k=3, rng=rng)
    b2.mixing.B[:] = 0.0
    b2.skip[:] = 0.0
    net = op.SonicNetwork(blocks=[b1, b2], head=np.eye(3))
    out = op.network_forward(net, Signal(rng.standard_normal((2, 8, 8)), g))
    np.testing.assert_array_equal(out.data, 0.0)


def test_network_rejects_incompatible_chain(rng):
    b1 = unit_block(n_modes=2, c=2, k=3, rng=rng)
    b2 = unit_block(n_modes=2, c=4, k=3, rng=rng)
    with pytest.raises(ConfigurationError):
        op.SonicNetwork(blocks=[b1, b2], head=np.eye(3))
    with pytest.raises(ConfigurationError):
        op.SonicNetwork(blocks=[b1], head=np.eye(4))


def test_network_deterministic_end_to_end(rng):
    g = build_frequency_grid((8, 8), (1.0, 1.0))
    net = op.build_network(rng, 2, 4, width=3, depth=2, n_modes=2)
    x = Signal(rng.standard_normal((2, 8, 8)), g)
    a = op.network_forward(net, x).data
    b = op.network_forward(net, x).data
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("m,c,k,d,expected", [
    (4, 3, 5, 2, 89),
    (1, 1, 1, 2, 11),
    (2, 2, 2, 3, 31),
])
def test_count_parameters_examples(m, c, k, d, expected):
    assert op.count_parameters(m, c, k, d) == expected


def test_count_parameters_matches_enumeration(rng):
    for _ in range(10):
        m = int(rng.integers(1, 6))
        c = int(rng.integers(1, 5))
        k = int(rng.integers(1, 5))
        d = int(rng.integers(2, 4))
        block = op.random_block(rng, m, c, k, d)
        assert op.operator_scalar_count(block) == op.count_parameters(m, c, k, d)


def test_resample_same_grid_identical(rng):
    g = build_frequency_grid((8, 8), (1.0, 1.0))
    block = unit_block(n_modes=2, c=2, k=2, gain=True, rng=rng)
    a = op.assemble_symbol(block, g)
    b = op.resample_to_grid(block, g)
    np.testing.assert_array_equal(a.values, b.values)


def test_resample_doubled_grid_shares_mode_responses_bitwise(rng):
    g1 = build_frequency_grid((8, 8), (1.0, 1.0))
    g2 = build_frequency_grid((16, 16), (1.0, 1.0))
    block = unit_block(n_modes=3, c=2, k=2, rng=rng)
    fields1 = op.mode_fields(block, g1).reshape(3, *g1.half_shape)
    fields2 = op.mode_fields(block, g2).reshape(3, *g2.half_shape)
    # Shared frequencies sit at even indices of the doubled grid.
    np.testing.assert_array_equal(fields1, fields2[:, ::2, ::2][:, :, : g1.half_shape[1]])


def test_resample_dc_value_grid_free(rng):
    block = unit_block(n_modes=2, c=2, k=2, rng=rng)
    symbols = [
        op.resample_to_grid(block, build_frequency_grid(dims, sp)).values[..., 0, 0]
        for dims, sp in [((8, 8), (1.0, 1.0)), ((16, 16), (0.5, 0.5)),
                         ((12, 6), (1.0, 1.0))]
    ]
    np.testing.assert_array_equal(symbols[0], symbols[1])
    np.testing.assert_array_equal(symbols[0], symbols[2])


def test_resample_dimension_mismatch(rng):
    block = unit_block(rng=rng)
    with pytest.raises(InvalidArgumentError):
        op.resample_to_grid(block, build_frequency_grid((8,), (1.0,)))


def test_assemble_slab_execution_bitwise(rng):
    g = build_frequency_grid((8, 8), (1.0, 1.0))
    block = unit_block(n_modes=3, c=2, k=2, gain=True, rng=rng)
    whole = op.assemble_symbol(block, g)
    slabbed = op.assemble_symbol(block, g, slab_rows=2)
    np.testing.assert_array_equal(whole.values, slabbed.values)


def test_serialization_roundtrip_bitwise(rng, tmp_path):
    net = op.build_network(rng, 3, 6, width=4, depth=2, n_modes=3,
                           mode_dropout_rate=0.25)
    path = tmp_path / "model.json"
    op.save_network(net, path)
    loaded = op.load_network(path)
    for b1, b2 in zip(net.blocks, loaded.blocks):
        np.testing.assert_array_equal(b1.sigma, b2.sigma)
        np.testing.assert_array_equal(b1.alpha, b2.alpha)
        np.testing.assert_array_equal(b1.beta, b2.beta)
        np.testing.assert_array_equal(b1.t, b2.t)
        np.testing.assert_array_equal(b1.u, b2.u)
        np.testing.assert_array_equal(b1.mixing.B, b2.mixing.B)
        np.testing.assert_array_equal(b1.mixing.Cmat, b2.mixing.Cmat)
        np.testing.assert_array_equal(b1.skip, b2.skip)
        assert b1.stability == b2.stability
        assert b1.mode_dropout_rate == b2.mode_dropout_rate
    np.testing.assert_array_equal(net.head, loaded.head)


def test_serialized_layout_keys(rng, tmp_path):
    net = op.build_network(rng, 2, 3, width=2, depth=1, n_modes=2)
    path = tmp_path / "model.json"
    op.save_network(net, path)
    doc = json.loads(path.read_text())
    assert doc["format"] == "sonic-model"
    block = doc["blocks"][0]
    for key in ("sigma", "alpha", "beta", "t", "u", "B_re", "B_im",
                "C_re", "C_im", "W_s", "rho", "epsilon",
                "mode_dropout_rate", "gain_normalize"):
        assert key in block


def test_batched_core_matches_public_forward(rng):
    from sonic.gradients import forward_block_cached

    g = build_frequency_grid((8, 8), (1.0, 1.0))
    block = unit_block(n_modes=3, c=2, k=4, gain=True, rng=rng)
    x = rng.standard_normal((2, 8, 8))
    public = op.block_forward(block, Signal(x, g)).data
    batched, _ = forward_block_cached(block, x[None], g)
    np.testing.assert_array_equal(public, batched[0])


@settings(max_examples=10)
@given(st.integers(0, 2**31 - 1))
def test_convolution_theorem_property(seed):
    rng = np.random.default_rng(seed)
    dims = (int(rng.integers(2, 9)), int(rng.integers(2, 9)))
    g = build_frequency_grid(dims, (1.0, 1.0))
    block = op.random_block(rng, 2, 2, 2, 2, gain_normalize=bool(rng.integers(0, 2)))
    symbol = op.assemble_symbol(block, g)
    x = rng.standard_normal((2,) + dims)
    spectral = dft_inverse(op.apply_symbol(symbol, dft_forward(Signal(x, g)))).data
    kernel = np.stack([
        np.stack([op.spatial_kernel(symbol, k, c)[0].data[0] for c in range(2)])
        for k in range(2)
    ])
    direct = circular_convolve_direct(kernel, x)
    assert np.max(np.abs(spectral - direct)) < 1e-9 * max(1.0, np.max(np.abs(direct)))
