import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.stats import norm

from stakessm.emission import emission_density, log_emission_density, mean_predictor, zero_prob
from stakessm.params import BASELINE, FULL, REFERENCE, STATE_DEP, ModelSpec, ParameterSet, SpecError

BASE = ModelSpec(variant=BASELINE)
SDEP = ModelSpec(variant=STATE_DEP)
FULL_SPEC = ModelSpec(variant=FULL)
Z0 = np.zeros(5)
X0 = np.zeros(8)


def test_zero_prob_closed_market_is_one():
    # PAPER: pi_t fixed to 1 on closed minutes
    for spec in (BASE, FULL_SPEC):
        assert zero_prob(Z0, REFERENCE[spec.variant], False, spec) == 1.0


def test_zero_prob_logistic_at_zero():
    theta = REFERENCE[FULL].copy()
    theta.alpha = np.zeros(6)
    assert zero_prob(Z0, theta, True, FULL_SPEC) == pytest.approx(0.5)


def test_zero_prob_full_reference_intercept():
    # DERIVED: expit(-4.818) from the published alpha0
    assert zero_prob(Z0, REFERENCE[FULL], True, FULL_SPEC) == pytest.approx(1 / (1 + np.exp(4.818)), rel=1e-12)
    # the stated value 0.00804 is a loose rounding of expit(-4.818) = 0.008018
    assert zero_prob(Z0, REFERENCE[FULL], True, FULL_SPEC) == pytest.approx(0.00804, rel=5e-3)


@given(st.floats(-20, 20), st.floats(-20, 20))
def test_zero_prob_increasing_in_intercept(a, b):
    lo, hi = sorted([a, b])
    t1, t2 = REFERENCE[FULL].copy(), REFERENCE[FULL].copy()
    t1.alpha[0], t2.alpha[0] = lo, hi
    z = np.full(5, 0.3)
    p1, p2 = zero_prob(z, t1, True, FULL_SPEC), zero_prob(z, t2, True, FULL_SPEC)
    assert 0 <= p1 <= p2 <= 1
    if hi - lo > 1e-6 and hi < 30:
        assert p1 < p2 or p2 == 1.0


def test_mean_predictor_examples():
    assert mean_predictor(X0, REFERENCE[STATE_DEP], SDEP) == pytest.approx(-2.304)
    x = np.array([1.23, 0.34, 0, 0, 0, 0, 0, 0])
    assert mean_predictor(x, REFERENCE[STATE_DEP], SDEP) == pytest.approx(-2.304 + 0.256 * 1.23 + 2.510 * 0.34, abs=1e-12)
    assert mean_predictor(x, REFERENCE[STATE_DEP], SDEP) == pytest.approx(-1.1358, abs=1e-4)
    ht = np.zeros(8)
    ht[-1] = 1
    # PAPER: halftime raises median stakes by about 23.7%
    mult = np.exp(mean_predictor(ht, REFERENCE[STATE_DEP], SDEP) - mean_predictor(X0, REFERENCE[STATE_DEP], SDEP))
    assert mult == pytest.approx(1.237, abs=5e-4)
    assert mean_predictor(X0, REFERENCE[BASELINE], BASE) == -0.783


def test_mean_predictor_arity_mismatch():
    with pytest.raises(SpecError):
        mean_predictor(np.zeros(7), REFERENCE[STATE_DEP], SDEP)


def test_emission_examples():
    th = REFERENCE[BASELINE]
    assert emission_density(0.0, 0.3, X0, Z0, False, th, BASE) == 1.0
    assert emission_density(0.0, 0.3, X0, Z0, True, th, BASE) == pytest.approx(0.094)  # PAPER
    s = 0.4
    y = np.exp(th.beta[0] + s)
    assert emission_density(y, s, X0, Z0, True, th, BASE) == pytest.approx((1 - 0.094) / (0.924 * np.sqrt(2 * np.pi)))


def test_emission_rejects_positive_stake_on_closed_market():
    with pytest.raises(ValueError):
        emission_density(1.0, 0.0, X0, Z0, False, REFERENCE[BASELINE], BASE)


@pytest.mark.parametrize("variant", [BASELINE, FULL])
def test_positive_branch_integrates_to_one_minus_pi(variant):
    spec = ModelSpec(variant=variant)
    th = REFERENCE[variant]
    x, z = np.full(8, 0.2), np.full(5, 0.4)
    pi = zero_prob(z, th, True, spec)
    # integrate over u = log y (log-scale convention); density in u equals emission_density(e^u)
    val, _ = quad(lambda u: emission_density(np.exp(u), 0.3, x, z, True, th, spec), -40, 40, limit=200)
    assert pi + val == pytest.approx(1.0, abs=1e-8)


@given(st.floats(1e-4, 1e4), st.floats(-3, 3))
def test_log_density_matches_density_and_mixture_definition(y, s):
    th = REFERENCE[BASELINE]
    d = emission_density(y, s, X0, Z0, True, th, BASE)
    ref = (1 - th.pi) * norm.pdf(np.log(y), th.beta[0] + s, th.sigma)
    assert d == pytest.approx(ref, rel=1e-12)
    assert d > 0
    assert log_emission_density(y, s, X0, Z0, True, th, BASE) == pytest.approx(np.log(d), rel=1e-12)


def test_log_density_far_tail_is_finite():
    th = ParameterSet(phi=0.5, sigma_s=0.2, sigma=0.1, beta=[0.0], pi=0.1)
    v = log_emission_density(1e30, 0.0, X0, Z0, True, th, BASE)
    assert np.isfinite(v)
