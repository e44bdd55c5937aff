import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfdrbsde.lattice import (
    AdaptedProcess,
    Lattice,
    build_lattice,
    cond_exp_next,
    conditional_expectation,
    d_norm,
    expectation,
    martingale_increment,
    sp_norm,
)


def brownian(lat):
    return AdaptedProcess.from_function(lat, lambda t, b: b)


# --- construction ---------------------------------------------------------


def test_smallest_lattice():
    lat = build_lattice(1.0, 1)
    assert lat.shape == (2, 2)
    assert list(lat.nodes()) == [(0, 0), (1, 0), (1, 1)]
    assert lat.dt == 1.0


def test_two_step_brownian_values():
    lat = build_lattice(1.0, 2)
    assert lat.dt == 0.5
    np.testing.assert_allclose(lat.brownian(2), [-2 * math.sqrt(0.5), 0.0, 2 * math.sqrt(0.5)], atol=1e-15)


def test_level_four_values_step_by_two_sqrt_dt():
    lat = build_lattice(2.0, 4)
    assert lat.dt == 0.5
    s = math.sqrt(0.5)
    expected = [(2 * j - 4) * s for j in range(5)]
    np.testing.assert_allclose(lat.brownian(4), expected, atol=1e-15)
    np.testing.assert_allclose(np.diff(lat.brownian(4)), 2 * s, atol=1e-15)


@pytest.mark.parametrize("T, N", [(0.0, 3), (-1.0, 3), (1.0, 0), (1.0, -2)])
def test_bad_lattice_rejected(T, N):
    with pytest.raises(ValueError):
        build_lattice(T, N)


@given(st.floats(0.01, 100.0), st.integers(1, 300))
def test_dt_times_steps_is_horizon(T, N):
    lat = Lattice(T, N)
    assert abs(lat.dt * N - T) <= 4 * np.finfo(float).eps * T


@pytest.mark.parametrize("N", [1, 5, 37, 200])
def test_weights_sum_to_one(N):
    lat = Lattice(1.0, N)
    for k in range(N + 1):
        assert abs(lat.weights(k).sum() - 1.0) <= 1e-14


def test_off_triangle_entries_are_zeroed():
    lat = Lattice(1.0, 3)
    p = AdaptedProcess(lat, np.ones(lat.shape))
    assert p.values[0, 1] == 0.0
    assert p.values[3, 3] == 1.0


# --- conditional expectation ------------------------------------------------


def test_conditional_expectation_of_constant():
    lat = Lattice(1.0, 4)
    p = AdaptedProcess.constant(lat, 2.5)
    for k in range(4):
        np.testing.assert_array_equal(conditional_expectation(p, k), 2.5)


def test_brownian_is_martingale():
    lat = Lattice(1.0, 6)
    B = brownian(lat)
    for k in range(6):
        np.testing.assert_allclose(conditional_expectation(B, k), B.level(k), atol=1e-15)


def test_conditional_expectation_of_square_by_hand():
    lat = Lattice(1.0, 2)
    B2 = AdaptedProcess.from_function(lat, lambda t, b: b * b)
    assert conditional_expectation(B2, 1)[1] == pytest.approx(2 * lat.dt, abs=1e-15)


def test_conditional_expectation_range():
    lat = Lattice(1.0, 2)
    with pytest.raises(IndexError):
        conditional_expectation(AdaptedProcess.zeros(lat), 2)


# --- expectation --------------------------------------------------------------


def test_expectation_constant_and_symmetric():
    lat = Lattice(1.0, 5)
    for k in range(6):
        assert expectation(AdaptedProcess.constant(lat, -3.0), k) == pytest.approx(-3.0, abs=1e-15)
        assert expectation(brownian(lat), k) == pytest.approx(0.0, abs=1e-15)


def test_expectation_of_abs_brownian_by_hand():
    lat = Lattice(1.0, 2)
    p = AdaptedProcess.from_function(lat, lambda t, b: np.abs(b))
    assert expectation(p, 2) == pytest.approx(math.sqrt(lat.dt), abs=1e-15)


@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_tower_property(N, seed):
    lat = Lattice(1.0, N)
    p = AdaptedProcess(lat, np.random.default_rng(seed).normal(size=lat.shape))
    for k in range(1, N + 1):
        lifted = float(np.dot(lat.weights(k - 1), conditional_expectation(p, k - 1)))
        assert lifted == pytest.approx(expectation(p, k), abs=1e-12)


# --- martingale increment ---------------------------------------------------


def test_increment_of_constant_is_zero():
    np.testing.assert_array_equal(martingale_increment(np.full(4, 3.0), 0.1), 0.0)


def test_increment_of_brownian_is_one():
    lat = Lattice(1.0, 5)
    for k in range(5):
        np.testing.assert_allclose(martingale_increment(lat.brownian(k + 1), lat.dt), 1.0, atol=1e-14)


def test_increment_of_square_at_level_one():
    lat = Lattice(1.0, 1)
    assert martingale_increment(lat.brownian(1) ** 2, lat.dt)[0] == 0.0


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=30), st.floats(1e-4, 1.0))
def test_one_step_reconstruction(values, dt):
    v = np.array(values)
    e, z = cond_exp_next(v), martingale_increment(v, dt)
    s = math.sqrt(dt)
    scale = 1e-12 * (1 + np.max(np.abs(v)))
    np.testing.assert_allclose(e + z * s, v[1:], atol=scale)
    np.testing.assert_allclose(e - z * s, v[:-1], atol=scale)


# --- norms ----------------------------------------------------------------------


def test_d_norm_constant():
    lat = Lattice(1.0, 4)
    assert d_norm(AdaptedProcess.constant(lat, -1.5)) == 1.5


def test_d_norm_brownian_two_steps():
    lat = Lattice(1.0, 2)
    assert d_norm(brownian(lat)) == pytest.approx(math.sqrt(0.5), abs=1e-15)


def test_d_norm_deterministic_is_max():
    lat = Lattice(1.0, 6)
    levels = [0.3, -2.0, 1.0, 0.5, 1.9, -0.1, 0.0]
    assert d_norm(AdaptedProcess.from_levels(lat, levels)) == 2.0


@given(st.integers(1, 10), st.integers(0, 2**31 - 1), st.floats(-5, 5))
def test_d_norm_is_a_norm(N, seed, c):
    lat = Lattice(1.0, N)
    rng = np.random.default_rng(seed)
    p = AdaptedProcess(lat, rng.normal(size=lat.shape))
    q = AdaptedProcess(lat, rng.normal(size=lat.shape))
    assert d_norm(p * c) == pytest.approx(abs(c) * d_norm(p), rel=1e-12, abs=1e-15)
    assert d_norm(p + q) <= d_norm(p) + d_norm(q) + 1e-12


@settings(max_examples=50)
@given(st.integers(1, 10), st.integers(0, 2**31 - 1))
def test_d_norm_below_expected_path_max(N, seed):
    lat = Lattice(1.0, N)
    p = AdaptedProcess(lat, np.random.default_rng(seed).normal(size=lat.shape))
    assert d_norm(p) <= sp_norm(p, 1) + 1e-12


def test_sp_norm_constant():
    lat = Lattice(1.0, 5)
    for q in (1, 2, 3.5):
        assert sp_norm(AdaptedProcess.constant(lat, -2.0), q) == pytest.approx(2.0**q)


def test_sp_norm_brownian_one_step():
    lat = Lattice(1.0, 1)
    assert sp_norm(brownian(lat), 2) == pytest.approx(lat.dt)


def test_sp_norm_monotone_deterministic():
    lat = Lattice(1.0, 6)
    p = AdaptedProcess.from_levels(lat, np.linspace(0.0, 3.0, 7))
    assert sp_norm(p, 3) == pytest.approx(27.0)


def test_sp_norm_cap():
    lat = Lattice(1.0, 21)
    with pytest.raises(ValueError, match="d_norm"):
        sp_norm(AdaptedProcess.zeros(lat), 2)
