import numpy as np
import pytest

from tailquant.autodiff import ShapeError
from tailquant.data.synthetic import SyntheticSpec, synth_true_quantile
from tailquant.sim import Scenario, kinematic_step, recompute_features, rollout


def test_kinematic_examples():
    x, v = kinematic_step(0.0, 20.0, 1.0, 0.04)
    assert v == pytest.approx(20.04)
    assert x == pytest.approx(0.8016)
    assert kinematic_step(10.0, 0.02, -2.0, 0.04) == (10.0, 0.0)
    assert kinematic_step(3.0, 25.0, 0.0, 0.04) == (3.0 + 25.0 * 0.04, 25.0)


def test_feature_examples():
    np.testing.assert_array_equal(recompute_features(104.5, 20.0, 0.0, 20.0), [100, 5, 50, 20, 20])
    assert recompute_features(104.5, 20.0, 0.0, 25.0)[2] == 20.0
    assert recompute_features(104.5, 20.0, 0.0, 0.0)[1] == 50.0


def test_constant_speed_keeps_gap():
    sc = Scenario.constant_speed(500, 50.0, 25.0, 0.0, 25.0)
    trace = rollout(lambda s, a: 0.0, 0.5, sc)
    assert len(trace) == 500 and trace.terminal == "completed"
    np.testing.assert_allclose(trace.dhw, 45.5, atol=1e-9)


def test_collision_matches_closed_form():
    dt, a, v0, vl, gap0 = 0.04, 2.0, 20.0, 10.0, 0.5
    sc = Scenario.constant_speed(100, 4.5 + gap0, vl, 0.0, v0)
    trace = rollout(lambda s, alpha: a, 0.5, sc)
    # gap after k semi-implicit steps: gap0 + (vl - v0) k dt - a dt^2 k (k + 1) / 2
    k = 0
    while gap0 + (vl - v0) * k * dt - a * dt * dt * k * (k + 1) / 2 > 0:
        k += 1
    assert trace.collided
    assert len(trace) == k
    assert all(d > 0 for d in trace.dhw)


def test_log_replay_and_no_reversing():
    t = np.arange(300) * 0.04
    leader_v = 20.0 + 5.0 * np.sin(t)
    leader_x = 60.0 + np.concatenate([[0.0], np.cumsum(leader_v[1:] * 0.04)])
    sc = Scenario(leader_x, leader_v, 0.0, 5.0)
    trace = rollout(lambda s, a: -3.0, 0.5, sc)
    np.testing.assert_array_equal(trace.leader_x, leader_x)
    assert min(trace.velocity) == 0.0


def _synthetic_scenario():
    rng = np.random.default_rng(0)
    steps = 750
    leader_v = np.clip(27.0 + np.cumsum(rng.normal(0, 0.02, steps)), 15, 35)
    leader_x = 40.0 + np.concatenate([[0.0], np.cumsum(leader_v[1:] * 0.04)])
    return Scenario(leader_x, leader_v, 0.0, 27.0)


def oracle_policy(alpha):
    spec = SyntheticSpec()
    return lambda s, a: synth_true_quantile(spec, s, a)


def test_oracle_levels_order_dhw():
    sc = _synthetic_scenario()
    means = [np.mean(rollout(oracle_policy(a), a, sc).dhw) for a in (0.5, 0.75, 0.95, 0.99)]
    assert all(x > y for x, y in zip(means, means[1:]))


def test_rollout_is_deterministic():
    sc = _synthetic_scenario()
    a = rollout(oracle_policy(0.9), 0.9, sc)
    b = rollout(oracle_policy(0.9), 0.9, sc)
    assert a.rows() == b.rows()
    c = rollout(oracle_policy(0.5), 0.5, sc, horizon=200, seed=3)
    d = rollout(oracle_policy(0.5), 0.5, sc, horizon=200, seed=3)
    assert c.rows() == d.rows() and len(c) == 200


def test_rejects_bad_inputs():
    sc = Scenario.constant_speed(10, 50.0, 25.0, 0.0, 25.0)
    with pytest.raises(FloatingPointError, match="step 0"):
        rollout(lambda s, a: float("nan"), 0.5, sc)
    with pytest.raises(ValueError):
        rollout(lambda s, a: 0.0, 0.5, sc, horizon=11)

    class Wide:
        n_features = 7

        def quantile(self, s, a):
            return 0.0

    with pytest.raises(ShapeError):
        rollout(Wide(), 0.5, sc)
    with pytest.raises(ValueError):
        Scenario.constant_speed(10, 4.0, 25.0, 0.0, 25.0)


def test_scenario_file_round_trip(tmp_path):
    sc = _synthetic_scenario()
    sc.save(tmp_path / "s.json")
    back = Scenario.load(tmp_path / "s.json")
    np.testing.assert_array_equal(back.leader_x, sc.leader_x)
    assert back.follower_v0 == sc.follower_v0
