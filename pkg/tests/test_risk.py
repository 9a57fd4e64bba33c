import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rareflow.errors import InvalidInput
from rareflow.risk import RiskConfig, is_collision, risk_weight, scene_risk_weights, ttc, ttc_array
from rareflow.scenario import Scene


def test_ttc_closing():
    assert ttc(Scene(30.0, 20.0, 20.0, 0.0)) == pytest.approx(2.0)


def test_ttc_not_closing_is_infinite():
    assert ttc(Scene(20.0, 20.0, 10.0, 0.0)) == np.inf
    assert ttc(Scene(10.0, 20.0, 10.0, 0.0)) == np.inf


def test_ttc_contact_is_zero():
    assert ttc(Scene(30.0, 20.0, 0.0, 0.0)) == 0.0
    assert ttc(Scene(10.0, 20.0, -1.0, 0.0)) == 0.0


def test_risk_weight_values():
    assert risk_weight(Scene(30.0, 20.0, 0.0, 0.0)) == 1.0
    assert risk_weight(Scene(20.0, 30.0, 5.0, 0.0)) == 0.0
    assert risk_weight(Scene(30.0, 20.0, 20.0, 0.0)) == pytest.approx(np.exp(-2.0), abs=1e-12)
    assert risk_weight(Scene(30.0, 20.0, 20.0, 0.0)) == pytest.approx(0.1353, abs=1e-4)


def test_is_collision():
    assert is_collision(Scene(1.0, 1.0, -0.1, 0.0))
    assert is_collision(Scene(1.0, 1.0, 0.0, 0.0))
    assert not is_collision(Scene(1.0, 1.0, 5.0, 0.0))


def test_config_validation():
    with pytest.raises(InvalidInput):
        RiskConfig(ttc_cap=0.0)
    with pytest.raises(InvalidInput):
        RiskConfig(risky_ttc_threshold=-1.0)


def test_vectorised_matches_scalar():
    rng = np.random.default_rng(0)
    x = np.column_stack([rng.uniform(0, 40, 200), rng.uniform(0, 40, 200), rng.uniform(-2, 60, 200)])
    w = scene_risk_weights(x)
    for row, wi in zip(x, w):
        assert wi == risk_weight(Scene(row[0], row[1], row[2], 0.0))
    assert np.array_equal(ttc_array(x[:, 0], x[:, 1], x[:, 2]) == 0, x[:, 2] <= 0)


_speed = st.floats(0.0, 60.0)


@given(_speed, _speed, st.floats(-5.0, 200.0))
def test_weight_in_unit_interval_and_collision_implies_one(v_av, v_lead, gap):
    s = Scene(v_av, v_lead, gap, 0.0)
    w = risk_weight(s)
    assert 0.0 <= w <= 1.0
    if is_collision(s):
        assert w == 1.0
    if w == 1.0:  # exp(-t) rounds to 1 only for t below machine epsilon
        assert ttc(s) < np.finfo(float).eps


@given(st.floats(0.5, 60.0), st.floats(0.1, 10.0), st.floats(0.01, 30.0), st.floats(0.01, 10.0))
def test_weight_decreases_with_gap(v_lead, dv, gap, extra):
    near = Scene(v_lead + dv, v_lead, gap, 0.0)
    far = Scene(v_lead + dv, v_lead, gap + extra, 0.0)
    assert ttc(far) > ttc(near)
    wn, wf = risk_weight(near), risk_weight(far)
    assert wf <= wn
    if wn > 1e-300:
        assert wf < wn
