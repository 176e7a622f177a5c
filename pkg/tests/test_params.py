import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stakessm.params import (
    BASELINE,
    FULL,
    REFERENCE,
    STATE_DEP,
    ModelSpec,
    ParameterSet,
    SpecError,
    canonical_variant,
    from_unconstrained,
    param_names,
    to_unconstrained,
    transform_jacobian,
)


def test_row_sets_match_published_layouts():
    assert param_names(BASELINE) == ["phi", "sigma_s", "beta0", "sigma", "pi"]
    assert len(param_names(STATE_DEP)) == 18
    full = param_names(FULL)
    assert len(full) == 23
    assert full[:2] == ["phi", "sigma_s"] and full[-1] == "sigma"
    assert [n for n in full if n.startswith("omega")] == [f"omega{k}" for k in range(1, 6)]


def test_variant_aliases():
    assert canonical_variant("state-dependent-covariates") == STATE_DEP
    with pytest.raises(SpecError):
        canonical_variant("nonsense")


def test_reference_values_are_the_published_estimates():
    # PAPER: baseline table
    assert REFERENCE[BASELINE].to_dict() == pytest.approx(
        {"phi": 0.986, "sigma_s": 0.215, "beta0": -0.783, "sigma": 0.924, "pi": 0.094})
    full = REFERENCE[FULL].to_dict()
    # PAPER: state-process coefficients of the full model
    assert [full[f"omega{k}"] for k in range(1, 6)] == pytest.approx([0.285, -0.027, -0.379, 0.001, 0.005])
    assert full["beta3"] < 0 < full["beta4"]


@pytest.mark.parametrize("variant", [BASELINE, STATE_DEP, FULL])
def test_vector_and_dict_round_trip(variant):
    theta = REFERENCE[variant]
    assert np.array_equal(ParameterSet.from_vector(theta.to_vector(), variant).to_vector(), theta.to_vector())
    assert ParameterSet.from_dict(theta.to_dict()).to_dict() == theta.to_dict()


def test_from_dict_rejects_wrong_names():
    d = REFERENCE[BASELINE].to_dict()
    d["omega1"] = 0.0
    with pytest.raises(SpecError):
        ParameterSet.from_dict(d, BASELINE)


def test_check_rejects_arity_mismatch():
    with pytest.raises(SpecError):
        REFERENCE[BASELINE].check(ModelSpec(variant=FULL))
    with pytest.raises(SpecError):
        ParameterSet(phi=1.0, sigma_s=0.2, sigma=1.0, beta=[0.0], pi=0.1).check(ModelSpec())


@given(st.lists(st.floats(-3, 3), min_size=23, max_size=23))
def test_unconstrained_round_trip(values):
    x = np.array(values)
    theta = from_unconstrained(x, FULL)
    assert abs(theta.phi) < 1 and theta.sigma > 0 and theta.sigma_s > 0
    assert np.allclose(to_unconstrained(theta), x, rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("variant", [BASELINE, FULL])
def test_transform_jacobian_matches_finite_differences(variant):
    theta = REFERENCE[variant]
    x = to_unconstrained(theta)
    h = 1e-6
    num = np.array([
        (from_unconstrained(x + h * e, variant).to_vector() - from_unconstrained(x - h * e, variant).to_vector())[k] / (2 * h)
        for k, e in enumerate(np.eye(x.size))
    ])
    assert np.allclose(transform_jacobian(theta), num, rtol=1e-6, atol=1e-9)


def test_spec_dict_round_trip():
    spec = ModelSpec(variant=FULL, grid_m=50, minute_mean=53.0, minute_sd=30.3, team_stake_avg={"b": 1.0, "a": 2.0})
    again = ModelSpec.from_dict(spec.to_dict())
    assert again == spec
