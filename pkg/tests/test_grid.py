import numpy as np
import pytest
from hypothesis import given, strategies as st

from sonic.errors import InvalidArgumentError
from sonic.grid import (
    Signal,
    Spectrum,
    build_frequency_grid,
    dft_forward,
    dft_inverse,
    enforce_dc_real,
    hermitian_extend,
    standardize_input,
)
from sonic.oracle import direct_dft_half


def test_frequency_grid_four_points():
    g = build_frequency_grid((4,), (1.0,))
    expected = np.array([0.0, np.pi / 2, -np.pi, -np.pi / 2])
    np.testing.assert_array_equal(g.freqs[0], 2 * np.pi * np.array([0, 1, -2, -1]) / 4)
    np.testing.assert_allclose(g.freqs[0], expected, rtol=0, atol=0)


def test_frequency_grid_single_sample():
    g = build_frequency_grid((1,), (1.0,))
    np.testing.assert_array_equal(g.freqs[0], [0.0])


def test_frequency_grid_odd_with_spacing():
    g = build_frequency_grid((3,), (0.5,))
    np.testing.assert_allclose(g.freqs[0], [0.0, 4 * np.pi / 3, -4 * np.pi / 3])


@pytest.mark.parametrize("dims,spacings", [((0,), (1.0,)), ((4,), (0.0,)),
                                           ((4,), (-1.0,)), ((4, 0), (1.0, 1.0))])
def test_frequency_grid_rejects_bad_arguments(dims, spacings):
    with pytest.raises(InvalidArgumentError):
        build_frequency_grid(dims, spacings)


def test_doubled_grid_contains_original_frequencies_bitwise():
    g1 = build_frequency_grid((12, 10), (1.0, 0.5))
    g2 = build_frequency_grid((24, 20), (1.0, 0.5))
    for f1, f2 in zip(g1.freqs, g2.freqs):
        shared = set(f2.tolist())
        assert all(v in shared for v in f1.tolist())


def test_dft_constant_signal():
    g = build_frequency_grid((8,), (1.0,))
    spec = dft_forward(Signal(np.full((1, 8), 3.0), g))
    assert spec.data[0, 0] == pytest.approx(24.0)
    np.testing.assert_allclose(spec.data[0, 1:], 0.0, atol=1e-12)


def test_dft_impulse_flat_spectrum():
    g = build_frequency_grid((6, 6), (1.0, 1.0))
    x = np.zeros((1, 6, 6))
    x[0, 0, 0] = 1.0
    spec = dft_forward(Signal(x, g))
    np.testing.assert_allclose(spec.data, 1.0, atol=1e-12)


def test_roundtrip_matches_direct_dft_oracle(rng):
    g = build_frequency_grid((4, 4), (1.0, 1.0))
    x = rng.standard_normal((2, 4, 4))
    spec = dft_forward(Signal(x, g))
    slow = direct_dft_half(x, g)
    assert np.max(np.abs(spec.data - slow)) < 1e-12 * max(1.0, np.max(np.abs(slow)))
    back = dft_inverse(spec)
    assert np.max(np.abs(back.data - x)) < 1e-12


@given(st.sampled_from([(3,), (4,), (5, 4), (4, 6), (7, 3), (6, 6), (16, 16)]),
       st.integers(0, 2**31 - 1))
def test_roundtrip_property(dims, seed):
    rng = np.random.default_rng(seed)
    g = build_frequency_grid(dims, (1.0,) * len(dims))
    x = rng.standard_normal((2,) + dims)
    back = dft_inverse(dft_forward(Signal(x, g)))
    scale = max(1.0, float(np.max(np.abs(x))))
    assert np.max(np.abs(back.data - x)) < 1e-10 * scale


@given(st.sampled_from([(4,), (5,), (8, 8), (16, 16), (5, 7)]),
       st.integers(0, 2**31 - 1))
def test_parseval_with_hermitian_weights(dims, seed):
    rng = np.random.default_rng(seed)
    g = build_frequency_grid(dims, (1.0,) * len(dims))
    x = rng.standard_normal((1,) + dims)
    spec = dft_forward(Signal(x, g))
    spatial = float(np.sum(x**2))
    weighted = float(np.sum(g.hermitian_weights() * np.abs(spec.data[0]) ** 2))
    assert abs(spatial - weighted / g.size) < 1e-9 * max(1.0, spatial)


def test_enforce_dc_real():
    g = build_frequency_grid((4,), (1.0,))
    data = np.array([[3.0 + 2.0j, 1.0 + 1.0j, 0.5j]])
    out = enforce_dc_real(Spectrum(data, g))
    assert out.data[0, 0] == 3.0 + 0.0j
    np.testing.assert_array_equal(out.data[0, 1:], data[0, 1:])
    again = enforce_dc_real(out)
    np.testing.assert_array_equal(again.data, out.data)
    zero = enforce_dc_real(Spectrum(np.zeros((1, 3), complex), g))
    np.testing.assert_array_equal(zero.data, 0)


def test_standardize_two_values():
    g = build_frequency_grid((2,), (1.0,))
    out = standardize_input(Signal(np.array([[1.0, 3.0]]), g), 0.0, 0)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]])


def test_standardize_idempotent():
    g = build_frequency_grid((8,), (1.0,))
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 8))
    once = standardize_input(Signal(x, g), 0.0, 0)
    twice = standardize_input(once, 0.0, 0)
    assert np.max(np.abs(once.data - twice.data)) < 1e-12


def test_standardize_constant_channel_floors_to_zero():
    g = build_frequency_grid((4,), (1.0,))
    out = standardize_input(Signal(np.full((1, 4), 5.0), g), 0.0, 0)
    np.testing.assert_array_equal(out.data, 0.0)


def test_standardize_noise_seeded():
    g = build_frequency_grid((8, 8), (1.0, 1.0))
    rng = np.random.default_rng(0)
    x = Signal(rng.standard_normal((2, 8, 8)), g)
    a = standardize_input(x, 0.1, 7)
    b = standardize_input(x, 0.1, 7)
    c = standardize_input(x, 0.1, 8)
    np.testing.assert_array_equal(a.data, b.data)
    assert np.any(a.data != c.data)


def test_signal_shape_validation():
    g = build_frequency_grid((4, 4), (1.0, 1.0))
    with pytest.raises(InvalidArgumentError):
        Signal(np.zeros((2, 4, 5)), g)
    with pytest.raises(InvalidArgumentError):
        Signal(np.full((1, 4, 4), np.nan), g)
    with pytest.raises(InvalidArgumentError):
        dft_inverse(Spectrum(np.zeros((1, 4, 4), complex), g))


def test_hermitian_extend_matches_full_fft(rng):
    x = rng.standard_normal((6, 4))
    half = np.fft.rfftn(x)
    full = hermitian_extend(half, (6, 4))
    np.testing.assert_allclose(full, np.fft.fftn(x), atol=1e-10)


def test_spectrum_of_real_signal_has_real_dc(rng):
    g = build_frequency_grid((8, 6), (1.0, 1.0))
    spec = dft_forward(Signal(rng.standard_normal((1, 8, 6)), g))
    assert spec.data[0, 0, 0].imag == 0.0
