import numpy as np
import pytest
from hypothesis import given, strategies as st

from sonic.errors import InvalidArgumentError
from sonic.grid import build_frequency_grid
from sonic.modes import (
    Mode,
    ModeRaw,
    StabilityConfig,
    constrain_mode,
    init_mode_raw,
    physical_direction,
    transfer_at,
    transfer_field,
)

CFG = StabilityConfig()


def test_constrain_softplus_zero():
    raw = ModeRaw(sigma=0.0, alpha=1.0, beta=0.0, u=np.array([1.0, 0.0]), t=0.0)
    mode = constrain_mode(raw, StabilityConfig(rho=np.pi, epsilon=1e-4))
    assert mode.scale == pytest.approx(np.log(2.0) + 1e-4, rel=1e-12)
    assert mode.pole_im == 0.0


def test_constrain_direction_normalization():
    raw = ModeRaw(sigma=0.0, alpha=0.0, beta=0.0, u=np.array([3.0, 4.0]), t=0.0)
    mode = constrain_mode(raw, CFG)
    np.testing.assert_allclose(mode.direction, [0.6, 0.8], rtol=0, atol=1e-15)


def test_constrain_rejects_zero_direction():
    with pytest.raises(InvalidArgumentError):
        ModeRaw(sigma=0.0, alpha=0.0, beta=0.0, u=np.zeros(2), t=0.0)


@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(-20, 20), st.floats(-20, 20),
       st.tuples(st.floats(-5, 5), st.floats(-5, 5)).filter(lambda u: np.hypot(*u) > 1e-3))
def test_constrain_invariants(sigma, alpha, beta, t, u):
    mode = constrain_mode(ModeRaw(sigma=sigma, alpha=alpha, beta=beta,
                                  u=np.array(u), t=t), CFG)
    assert abs(np.linalg.norm(mode.direction) - 1.0) < 1e-12
    assert mode.scale >= CFG.epsilon
    assert mode.pole_re < 0.0
    assert abs(mode.pole_im) <= CFG.rho
    assert mode.transverse >= 0.0


def test_physical_direction_isotropic_identity():
    v = np.array([1.0, 0.0])
    np.testing.assert_array_equal(physical_direction(v, (1.0, 1.0)), v)
    v2 = np.array([0.0, 1.0])
    np.testing.assert_array_equal(physical_direction(v2, (0.5, 0.5)), v2)


def test_physical_direction_anisotropic():
    v = np.array([1.0, 1.0]) / np.sqrt(2.0)
    out = physical_direction(v, (1.0, 2.0))
    np.testing.assert_allclose(out, [2.0 / np.sqrt(5.0), 1.0 / np.sqrt(5.0)], atol=1e-15)


@given(st.tuples(st.floats(-3, 3), st.floats(-3, 3)).filter(lambda u: np.hypot(*u) > 1e-2),
       st.floats(0.1, 4.0), st.floats(0.1, 4.0))
def test_physical_direction_unit_norm(u, s1, s2):
    v = np.array(u) / np.linalg.norm(u)
    out = physical_direction(v, (s1, s2))
    assert abs(np.linalg.norm(out) - 1.0) < 1e-12


def test_transfer_dc_value():
    mode = Mode(direction=np.array([1.0, 0.0]), scale=1.0, pole_re=-1.0,
                pole_im=0.0, transverse=0.0)
    assert transfer_at(mode, [0.0, 0.0]) == 1.0


def test_transfer_on_axis():
    mode = Mode(direction=np.array([1.0, 0.0]), scale=1.0, pole_re=-1.0,
                pole_im=0.0, transverse=0.0)
    val = transfer_at(mode, [1.0, 0.0])
    assert val == pytest.approx(0.5 - 0.5j)
    assert abs(val) == pytest.approx(1.0 / np.sqrt(2.0))


def test_transfer_transverse_penalty():
    mode = Mode(direction=np.array([0.0, 1.0]), scale=2.0, pole_re=-1.0,
                pole_im=0.0, transverse=0.5)
    assert transfer_at(mode, [2.0, 0.0]) == pytest.approx(1.0 / 3.0)


def test_transfer_field_single_point_grid():
    g = build_frequency_grid((1, 1), (1.0, 1.0))
    mode = Mode(direction=np.array([1.0, 0.0]), scale=1.0, pole_re=-0.5,
                pole_im=0.3, transverse=0.1)
    field = transfer_field(mode, g)
    assert field.shape == (1, 1)
    assert field[0, 0] == 1.0 / complex(0.5, -0.3)


def test_transfer_field_matches_pointwise(rng):
    g = build_frequency_grid((6, 5), (1.0, 2.0))
    raw = init_mode_raw(rng, 2)
    mode = constrain_mode(raw, CFG)
    field = transfer_field(mode, g)
    from dataclasses import replace
    phys = replace(mode, direction=physical_direction(mode.direction, g.spacings))
    axes = g.omega_axes()
    for i in range(g.half_shape[0]):
        for j in range(g.half_shape[1]):
            omega = [float(axes[0][i, 0]), float(axes[1][0, j])]
            assert field[i, j] == transfer_at(phys, omega)


def test_slab_execution_bitwise_identical(rng):
    g = build_frequency_grid((8, 8), (1.0, 1.0))
    mode = constrain_mode(init_mode_raw(rng, 2), CFG)
    whole = transfer_field(mode, g)
    for rows in (1, 2, 3, 5, 8):
        np.testing.assert_array_equal(transfer_field(mode, g, slab_rows=rows), whole)


@given(st.integers(0, 2**31 - 1))
def test_stability_bound(seed):
    rng = np.random.default_rng(seed)
    mode = constrain_mode(
        ModeRaw(sigma=rng.normal(), alpha=rng.normal(), beta=rng.normal(),
                u=rng.standard_normal(2) + np.array([1e-3, 0]), t=rng.normal()), CFG)
    g = build_frequency_grid((int(rng.integers(2, 12)), int(rng.integers(2, 12))),
                             tuple(rng.uniform(0.3, 2.0, 2)))
    field = transfer_field(mode, g)
    assert np.max(np.abs(field)) * abs(mode.pole_re) <= 1.0 + 1e-12


def test_axis_aligned_reduction_exact():
    g = build_frequency_grid((16, 16), (1.0, 1.0))
    mode = Mode(direction=np.array([0.0, 1.0]), scale=1.7, pole_re=-0.9,
                pole_im=0.6, transverse=0.0)
    field = transfer_field(mode, g)
    omega_last = g.omega_axes()[1]
    expected = 1.0 / (1j * mode.scale * omega_last - (mode.pole_re + 1j * mode.pole_im))
    np.testing.assert_array_equal(field, np.broadcast_to(expected, g.half_shape))


def test_field_bounded_by_pole(rng):
    g = build_frequency_grid((8, 8), (0.7, 1.3))
    for _ in range(5):
        mode = constrain_mode(init_mode_raw(rng, 2), CFG)
        field = transfer_field(mode, g)
        assert np.max(np.abs(field)) <= 1.0 / abs(mode.pole_re) + 1e-12
