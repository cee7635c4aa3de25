import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hevcrl.env import Observation, Transition
from hevcrl.errors import ConfigError, InvalidGamma, ShapeMismatch
from hevcrl.lagrangian import (
    BestTracker,
    PidConfig,
    PidDualState,
    cost_limit,
    lagrangian_actor_loss,
    pid_dual_update,
    train,
    write_trace,
)


class TestCostLimit:
    def test_long_horizon_value(self):
        assert cost_limit(1.5, 3000, 0.99) == pytest.approx(0.0500, abs=1e-4)

    def test_undiscounted_limit(self):
        assert cost_limit(1.5, 3000, 1.0) == 1.5

    def test_continuous_at_one(self):
        assert cost_limit(1.5, 200, 1.0 - 1e-12) == pytest.approx(1.5, rel=1e-6)

    def test_single_step(self):
        # one step: the whole budget is available regardless of discount
        assert cost_limit(2.0, 1, 0.5) == 2.0

    def test_invalid_gamma(self):
        for gamma in (0.0, -0.1, 1.1):
            with pytest.raises(InvalidGamma):
                cost_limit(1.0, 10, gamma)

    def test_invalid_budget(self):
        with pytest.raises(ConfigError):
            cost_limit(-1.0, 10, 0.9)

    @given(gamma=st.floats(0.01, 0.999), T=st.integers(1, 500))
    @settings(max_examples=200, deadline=None)
    def test_never_exceeds_episode_budget(self, gamma, T):
        assert 0.0 < cost_limit(1.5, T, gamma) <= 1.5 + 1e-12


class TestPidDualUpdate:
    def test_on_constraint_stays_zero(self):
        state = PidDualState(1.0, 0.5, 2.0, prev_cost=1.5)
        lam, new = pid_dual_update(state, J_c=1.5, eps1=1.5)
        assert lam == 0.0 and new.integral == 0.0

    def test_hand_value(self):
        state = PidDualState(1.0, 0.5, 2.0, integral=0.0, prev_cost=1.0)
        lam, new = pid_dual_update(state, J_c=2.0, eps1=1.5)
        assert lam == pytest.approx(2.75)
        assert new.integral == pytest.approx(0.5)
        assert new.prev_cost == 2.0

    def test_pure_integral_mode(self):
        # K_P = K_D = 0 reduces to projected integral ascent
        state = PidDualState(0.0, 1.0, 0.0)
        lams = []
        for jc in (2.0, 2.0, 0.0, 0.0, 0.0):
            lam, state = pid_dual_update(state, jc, eps1=1.0)
            lams.append(lam)
        assert lams == [1.0, 2.0, 1.0, 0.0, 0.0]

    def test_derivative_ignores_decreasing_cost(self):
        state = PidDualState(0.0, 0.0, 5.0, prev_cost=3.0)
        lam, _ = pid_dual_update(state, J_c=1.0, eps1=0.0)
        assert lam == 0.0

    def test_windup_under_persistent_violation(self):
        state = PidDualState(0.1, 0.3, 0.1)
        prev_lam = -1.0
        for _ in range(20):
            lam, state = pid_dual_update(state, J_c=2.0, eps1=1.0)
            assert lam > prev_lam
            prev_lam = lam

    def test_negative_gains_rejected(self):
        with pytest.raises(ConfigError):
            PidDualState(-1.0, 0.0, 0.0)

    @given(costs=st.lists(st.floats(-10, 10), min_size=1, max_size=30),
           eps1=st.floats(0, 5))
    @settings(max_examples=200, deadline=None)
    def test_projection_invariants(self, costs, eps1):
        state = PidDualState(0.7, 0.3, 1.1)
        for jc in costs:
            lam, state = pid_dual_update(state, jc, eps1)
            assert lam >= 0.0 and state.integral >= 0.0
            assert state.lam == lam


class TestActorLoss:
    def test_unconstrained_reduction(self):
        q_r = np.array([1.0, 3.0])
        assert lagrangian_actor_loss(q_r, np.zeros(2), 0.0) == -2.0

    def test_balanced_cancellation(self):
        assert lagrangian_actor_loss([1.0, 1.0], [1.0, 1.0], 1.0) == 0.0

    def test_large_lambda_tracks_cost(self):
        # as lambda grows the normalized loss approaches +mean(Q_c)
        got = lagrangian_actor_loss([5.0, 5.0], [2.0, 4.0], 1e9)
        assert got == pytest.approx(3.0, rel=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            lagrangian_actor_loss([1.0, 2.0], [1.0], 0.0)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ConfigError):
            lagrangian_actor_loss([1.0], [1.0], -0.5)


class TestBestTracker:
    def _ret(self, jr, jc, soc=0.5):
        from hevcrl.env import EpisodeReturns
        return EpisodeReturns(J_r=jr, J_c=jc, total_fuel=-jr, final_soc=soc)

    def test_feasible_beats_infeasible(self):
        tracker = BestTracker(eps1=1.0)
        assert tracker.offer(self._ret(-1.0, 5.0), {"id": 1})
        assert tracker.offer(self._ret(-9.0, 0.5), {"id": 2})
        assert tracker.best_state == {"id": 2}

    def test_among_feasible_reward_wins(self):
        tracker = BestTracker(eps1=1.0)
        tracker.offer(self._ret(-5.0, 0.5), {"id": 1})
        assert not tracker.offer(self._ret(-6.0, 0.0), {"id": 2})
        assert tracker.offer(self._ret(-4.0, 0.9), {"id": 3})
        assert tracker.best_state == {"id": 3}

    def test_among_infeasible_cost_wins(self):
        tracker = BestTracker(eps1=0.1)
        tracker.offer(self._ret(-1.0, 5.0), {"id": 1})
        assert tracker.offer(self._ret(-9.0, 4.0), {"id": 2})
        assert tracker.best_state == {"id": 2}

    def test_soc_band_gates_feasibility(self):
        tracker = BestTracker(eps1=1.0, balance_soc=0.5, soc_band=0.03)
        tracker.offer(self._ret(-1.0, 0.0, soc=0.56), {"id": 1})
        assert not tracker.best_feasible
        tracker.offer(self._ret(-2.0, 0.0, soc=0.51), {"id": 2})
        assert tracker.best_feasible and tracker.best_state == {"id": 2}


class BanditEnv:
    """Single-step analytic instance: reward -a^2, cost (0.5 - a)+.

    With budget eps1 the constrained optimum is a = 0.5 - eps1.
    """

    obs_dim = 3
    action_low, action_high = 0.0, 1.0
    obs_scale = np.ones(3)
    num_steps = 1
    _obs = Observation(0.5, 0.0, 0.0)

    def reset(self, seed=None):
        return self._obs

    def step(self, a):
        a = float(np.clip(a, 0.0, 1.0))
        return Transition(self._obs, a, self._obs, -a * a,
                          max(0.5 - a, 0.0), True)


class TestTrain:
    def _config(self, **overrides):
        base = dict(epochs=300, num_envs=4, gamma=1.0, eps_T=0.05,
                    K_P=2.0, K_I=0.5, K_D=1.0, hidden=(32, 32),
                    updates_per_epoch=10, batch_size=32, warmup_epochs=2,
                    explore_log_std=-1.5)
        base.update(overrides)
        return PidConfig(**base)

    def test_bandit_reaches_feasible_optimum(self):
        result = train(self._config(), BanditEnv, seed=16)
        assert result.best_feasible
        assert result.best_returns.J_c <= 0.05 + 1e-9
        # analytic optimum a = 0.45, J_r = -0.2025
        assert result.best_returns.J_r == pytest.approx(-0.2025, abs=0.02)

    def test_zero_gains_leave_lambda_at_zero(self):
        result = train(self._config(epochs=30, K_P=0.0, K_I=0.0, K_D=0.0),
                       BanditEnv, seed=16)
        assert all(row["lambda"] == 0.0 for row in result.trace)

    def test_equal_seeds_equal_traces(self, tmp_path):
        a = train(self._config(epochs=15), BanditEnv, seed=7,
                  out_dir=tmp_path / "a")
        b = train(self._config(epochs=15), BanditEnv, seed=7,
                  out_dir=tmp_path / "b")
        assert a.trace == b.trace
        assert (tmp_path / "a/trace.csv").read_bytes() == \
            (tmp_path / "b/trace.csv").read_bytes()

    def test_different_seeds_differ(self):
        a = train(self._config(epochs=10), BanditEnv, seed=1)
        b = train(self._config(epochs=10), BanditEnv, seed=2)
        assert a.trace != b.trace


def test_write_trace_round_trips_floats():
    rows = [{"epoch": 0, "mean_Jr": -0.1234567890123456789,
             "mean_Jc": 0.1, "lambda": 0.0, "fuel_g": 1.0,
             "final_soc": 0.5}]
    buf = io.StringIO()
    write_trace(rows, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "epoch,mean_Jr,mean_Jc,lambda,fuel_g,final_soc"
    cells = lines[1].split(",")
    assert float(cells[1]) == rows[0]["mean_Jr"]
