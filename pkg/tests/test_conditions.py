import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mfdrbsde.conditions import (
    WitnessError,
    assemble_witness,
    contraction_report,
    find_delta,
    lambda_contraction,
    mokobodski_check,
    sigma_contraction,
)
from mfdrbsde.expression import parse_expression
from mfdrbsde.lattice import Lattice
from mfdrbsde.model import Lipschitz, MokobodskiWitness, make_spec

ZERO = Lipschitz()
SMALL = Lipschitz(cf=0.5, gamma1=0.05, gamma2=0.05, beta1=0.05, beta2=0.05)
BAD = Lipschitz(gamma1=1.0, gamma2=1.0)


def witness(x0=0.0, integrand="0", vplus="0", vminus="0"):
    p = parse_expression
    return MokobodskiWitness(x0, p(integrand), p(vplus), p(vminus))


@pytest.mark.parametrize("p", [1.5, 2.0, 7.0])
def test_lambda_zero_constants(p):
    assert lambda_contraction(ZERO, p, 0.0) == 0.0


def test_lambda_hand_value():
    assert lambda_contraction(SMALL, 2, 0.0) == pytest.approx(math.sqrt(0.1), abs=1e-15)


@pytest.mark.parametrize("p", [1.01, 2.0, 5.0])
def test_lambda_fails_for_unit_barrier_constants(p):
    assert lambda_contraction(BAD, p, 0.0) > 1


def test_lambda_rejects_p_at_most_one():
    with pytest.raises(ValueError):
        lambda_contraction(SMALL, 1.0, 0.0)


def test_sigma_values():
    assert sigma_contraction(ZERO, 0.0) == 0.0
    lip = Lipschitz(cf=1.0, gamma1=0.1, gamma2=0.1, beta1=0.2, beta2=0.1)
    assert sigma_contraction(lip, 0.1) == pytest.approx(0.7, abs=1e-15)
    edge = Lipschitz(gamma1=0.25, gamma2=0.25, beta1=0.25, beta2=0.25)
    assert sigma_contraction(edge, 0.0) == 1.0
    assert not contraction_report(edge, 1, 1.0).cd_p1_holds


def test_find_delta_unconstrained():
    assert find_delta(ZERO, 2, 3.0) == 3.0
    assert find_delta(ZERO, 1, 3.0) == 3.0


@pytest.mark.parametrize("total, cf", [(0.2, 0.5), (0.5, 3.0), (0.0, 10.0)])
def test_find_delta_affine_closed_form(total, cf):
    lip = Lipschitz(cf=cf, gamma1=total / 4, gamma2=total / 4, beta1=total / 4, beta2=total / 4)
    target = 0.99
    assert find_delta(lip, 1, 100.0, target) == pytest.approx((target - total) / (2 * cf), abs=1e-10)


def test_find_delta_none_when_condition_fails():
    assert find_delta(BAD, 2, 1.0) is None
    assert find_delta(BAD, 1, 1.0) is None


@given(
    st.floats(0.0, 3.0), st.floats(0.0, 0.2), st.floats(0.0, 0.2), st.floats(0.0, 0.2), st.floats(0.0, 0.2),
    st.floats(1.1, 6.0),
)
def test_find_delta_certificate(cf, g1, g2, b1, b2, p):
    lip = Lipschitz(cf, g1, g2, b1, b2)
    d = find_delta(lip, p, 10.0)
    if d is None:
        assert lambda_contraction(lip, p, 0.0) > 0.99
        return
    assert lambda_contraction(lip, p, d) <= 0.99
    if 0 < d < 10.0:
        assert lambda_contraction(lip, p, d * (1 + 1e-6)) > 0.99


def test_report_invariants():
    rep = contraction_report(SMALL, 2, 1.0)
    assert rep.cd1_holds == (rep.lambda_at_zero < 1)
    assert rep.cd_p1_holds == (rep.sigma_at_zero < 1)
    assert lambda_contraction(SMALL, 2, rep.delta_p) <= rep.target
    assert sigma_contraction(SMALL, rep.delta_1) <= rep.target
    assert rep.holds_for(2) and rep.delta_for(1) == rep.delta_1


def test_report_p_equal_one_has_no_lambda():
    rep = contraction_report(SMALL, 1, 1.0)
    assert rep.lambda_at_zero is None and rep.delta_p is None


def test_continuity_at_zero():
    for d in (1e-3, 1e-6, 1e-9):
        assert abs(lambda_contraction(SMALL, 2, d) - lambda_contraction(SMALL, 2, 0.0)) < 10 * d


# --- witness ------------------------------------------------------------------


def test_mokobodski_constant_box_passes():
    rep = mokobodski_check(make_spec(lower="-1", upper="1"), witness(), Lattice(1.0, 5))
    assert rep.passed
    assert rep.lower_margin == 1.0 and rep.upper_margin == 1.0
    assert "falsifies" in rep.note


def test_mokobodski_unbounded_barrier_fails():
    spec = make_spec("1", "y + ybar + 1", "10", "-1")
    rep = mokobodski_check(spec, witness(x0=5.0), Lattice(1.0, 5))
    assert not rep.passed
    assert rep.lower_margin < 0


def test_mokobodski_kinked_barriers_pass():
    spec = make_spec(lower="min(y, 0) - 1", upper="max(y, 0) + 1")
    assert mokobodski_check(spec, witness(), Lattice(1.0, 8)).passed


def test_witness_assembly_matches_direct_evaluation():
    lat = Lattice(1.0, 6)
    X, vp, vm, err = assemble_witness(witness(0.2, "1", "t", "0"), lat)
    # X = 0.2 + B + t - 0
    expected = 0.2 + lat.brownian_grid + lat.time_grid
    np.testing.assert_allclose(X[lat.mask], expected[lat.mask], atol=1e-12)
    assert err <= 1e-12


def test_witness_discrete_ito_identity():
    # sum of B dB over a path is (B^2 - t) / 2, a node function
    lat = Lattice(1.0, 6)
    X, _, _, err = assemble_witness(witness(0.0, "b", "0", "0"), lat)
    expected = 0.5 * (lat.brownian_grid**2 - lat.time_grid)
    np.testing.assert_allclose(X[lat.mask], expected[lat.mask], atol=1e-12)


def test_witness_path_dependence_rejected():
    with pytest.raises(WitnessError):
        assemble_witness(witness(0.0, "b^2", "0", "0"), Lattice(1.0, 4))


def test_decreasing_vplus_fails():
    spec = make_spec(lower="-10", upper="10")
    rep = mokobodski_check(spec, witness(0.0, "0", "-t", "0"), Lattice(1.0, 4))
    assert not rep.vplus_monotone and not rep.passed
