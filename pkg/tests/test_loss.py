import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qlabayes.errors import A5NotSatisfiedError, LossClassError, PreconditionError
from qlabayes.loss import (
    CUSTOM_LOSSES,
    check_A5,
    check_C1,
    custom_loss,
    eval_loss,
    indicator_loss,
    parse_loss,
    power_loss,
    validate_loss_class,
)

vec = st.lists(st.floats(min_value=-1e3, max_value=1e3, allow_nan=False), min_size=1, max_size=3)


def test_eval_examples():
    assert eval_loss(power_loss(2), [3.0, 4.0]) == 25.0
    assert eval_loss(indicator_loss([1.0, 1.0]), [0.5, -0.5]) == 0.0
    assert eval_loss(indicator_loss([1.0, 1.0]), [0.5, -1.5]) == 1.0
    assert eval_loss(power_loss(1), [0.0]) == 0.0


def test_indicator_boundary_is_inside():
    assert eval_loss(indicator_loss([1.0]), [1.0]) == 0.0
    assert eval_loss(indicator_loss([1.0]), [np.nextafter(1.0, 2.0)]) == 1.0


def test_ellipsoid_indicator():
    w = indicator_loss(np.diag([4.0, 1.0]))  # u^T M^-1 u <= 1
    assert eval_loss(w, [1.9, 0.0]) == 0.0
    assert eval_loss(w, [0.0, 1.1]) == 1.0


def test_negative_custom_value_raises():
    w = custom_loss(lambda u: -1.0, p=1.0)
    with pytest.raises(LossClassError):
        eval_loss(w, [1.0])


def test_vectorised_evaluation_matches_pointwise():
    w = power_loss(1.5)
    u = np.random.default_rng(1).standard_normal((7, 2))
    assert np.array_equal(w(u), np.array([eval_loss(w, r) for r in u]))


@given(vec)
def test_builtin_losses_exactly_symmetric(u):
    u = np.array(u)
    for w in (power_loss(2), power_loss(1), power_loss(0.7), indicator_loss([1.0] * u.size)):
        assert eval_loss(w, u) == eval_loss(w, -u)


@settings(max_examples=200)
@given(vec, st.floats(min_value=1e-3, max_value=1e3), st.sampled_from([1.0, 2.0]))
def test_power_homogeneity(u, lam, p):
    u = np.array(u)
    w = power_loss(p)
    assert eval_loss(w, lam * u) == pytest.approx(lam**p * eval_loss(w, u), rel=4e-15, abs=1e-300)


def test_parse_loss():
    assert parse_loss("power:2").p == 2.0
    assert parse_loss("indicator:1,1").radius.tolist() == [1.0, 1.0]
    assert parse_loss("indicator:1", dim=2).radius.tolist() == [1.0, 1.0]
    assert parse_loss("custom:asymmetric").kind == "custom"
    for bad in ("quartic:2", "power:x", "custom:nope"):
        with pytest.raises(PreconditionError):
            parse_loss(bad)


# -- class validation -------------------------------------------------------


def test_power2_passes_all_properties():
    rep = validate_loss_class(power_loss(2), 2.0)
    assert rep.passed, rep.witnesses
    assert rep.growth_constant <= 1.0


@pytest.mark.parametrize("p", [0.5, 1.0, 3.0])
def test_power_growth_constant_at_most_one(p):
    rep = validate_loss_class(power_loss(p), p)
    assert rep.passed and rep.growth_constant <= 1.0


def test_indicator_passes_all_properties():
    assert validate_loss_class(indicator_loss([1.0]), 0.0).passed
    assert validate_loss_class(indicator_loss([1.0, 2.0]), 0.0).passed


def test_zero_loss_fails_property1():
    rep = validate_loss_class(CUSTOM_LOSSES["zero"](), 1.0)
    assert not rep.checks["property1"]
    assert "not identically 0" in rep.witnesses["property1"]["reason"]


def test_asymmetric_loss_symmetry_witness():
    rep = validate_loss_class(CUSTOM_LOSSES["asymmetric"](), 1.0)
    assert not rep.checks["property2"]
    wit = rep.witnesses["property2"]
    u = wit["u"][0]
    w = CUSTOM_LOSSES["asymmetric"]()
    assert wit["w(u)"] == eval_loss(w, [u]) != eval_loss(w, [-u])
    # the hand witness from the definition
    assert eval_loss(w, [3.0]) == 0.0 and eval_loss(w, [-3.0]) == 3.0


def test_truncated_loss_sublevel_witness():
    rep = validate_loss_class(CUSTOM_LOSSES["truncated"](), 2.0)
    assert not rep.checks["property3"]
    assert "property3" in rep.witnesses


def test_probe_count_precondition():
    with pytest.raises(PreconditionError):
        validate_loss_class(power_loss(2), 2.0, probe_count=999)


# -- [C1-eta] ------------------------------------------------------------------


def test_C1_power2_r0_4_holds():
    res = check_C1(power_loss(2), 0.5, 4.0)
    assert res.holds and res.margin >= 0.0


def test_C1_power2_r0_2_fails_with_hand_witness():
    # with |u| = sqrt(r) and z = r u / |u| at r = 2: |u - z| = 2 - sqrt 2 < sqrt 2
    assert eval_loss(power_loss(2), [math.sqrt(2) - 2.0]) < eval_loss(power_loss(2), [math.sqrt(2)])
    res = check_C1(power_loss(2), 0.5, 2.0)
    assert not res.holds
    assert res.witness["r"] < 4.0


def test_C1_indicator_holds():
    assert check_C1(indicator_loss([1.0]), 0.5, 4.0).holds
    assert check_C1(indicator_loss([1.0, 1.0]), 0.5, 4.0).holds


def test_C1_truncated_fails_with_witness():
    res = check_C1(CUSTOM_LOSSES["truncated"](), 0.9, 2.0)
    assert not res.holds
    wit = res.witness
    assert wit["w(u-z)"] < wit["w(u)"]


def test_C1_precondition():
    with pytest.raises(PreconditionError):
        check_C1(power_loss(2), 0.5, 1.0)


# -- [A5] --------------------------------------------------------------------


def test_A5_power2_exact_radius():
    assert check_A5(power_loss(2), 3.0) == 3.0


def test_A5_indicator():
    assert check_A5(indicator_loss([1.0]), 0.5) <= 2.0


def test_A5_truncated_never_closes():
    with pytest.raises(A5NotSatisfiedError):
        check_A5(CUSTOM_LOSSES["truncated"](), 1.0)


def test_A5_bounded_loss_is_radially_monotone():
    # 1 - exp(-|u|^2) increases with |u|, so sup_{|u|<=M} w = inf_{|u|>=M} w and M' = M
    assert check_A5(CUSTOM_LOSSES["bounded"](), 1.0) == 1.0


def test_A5_precondition():
    with pytest.raises(PreconditionError):
        check_A5(power_loss(2), 0.0)
