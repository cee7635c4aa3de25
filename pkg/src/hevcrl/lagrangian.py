"""Primal-dual constrained trainer with a PID-controlled multiplier.

The primal step is an off-policy deterministic-policy-gradient update on
the combined objective (Q_r - lambda*Q_c)/(1 + lambda); the dual step
feeds the measured discounted episode cost through a PID controller so
lambda reacts to both the level and the trend of constraint violation.
This module also owns the per-episode-to-discounted cost budget
conversion and the rollout / trace / best-checkpoint plumbing shared
with the variational trainer.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence, TextIO

import numpy as np

from .env import EpisodeReturns, Transition, episode_returns
from .errors import ConfigError, InvalidGamma, ShapeMismatch
from .nets import (
    Adam,
    Critics,
    GaussianPolicy,
    ReplayBuffer,
    critic_td_update,
    save_checkpoint,
)

TRACE_COLUMNS = ["epoch", "mean_Jr", "mean_Jc", "lambda", "fuel_g", "final_soc"]


# --- cost budget -----------------------------------------------------------


def cost_limit(eps_T: float, T: int, gamma: float) -> float:
    """Discounted per-trajectory cost limit equivalent to an undiscounted
    per-episode budget eps_T over T steps.

    A budget spread uniformly across the episode discounts to
    eps_T * (1 - gamma^T) / (T * (1 - gamma)); at gamma = 1 the limit is
    eps_T itself.
    """
    if not 0.0 < gamma <= 1.0:
        raise InvalidGamma(f"gamma must be in (0, 1], got {gamma}")
    if eps_T < 0 or T < 1:
        raise ConfigError("need eps_T >= 0 and T >= 1")
    if gamma == 1.0:
        return float(eps_T)
    return float(eps_T * (1.0 - gamma**T) / (T * (1.0 - gamma)))


# --- PID dual update -------------------------------------------------------


@dataclass(frozen=True)
class PidDualState:
    """Multiplier and controller memory; all projected onto [0, inf)."""

    K_P: float
    K_I: float
    K_D: float
    lam: float = 0.0
    integral: float = 0.0
    prev_cost: float = 0.0

    def __post_init__(self):
        if min(self.K_P, self.K_I, self.K_D) < 0:
            raise ConfigError("PID gains must be non-negative")
        if self.lam < 0 or self.integral < 0:
            raise ConfigError("lambda and integral must be non-negative")


def pid_dual_update(state: PidDualState, J_c: float,
                    eps1: float) -> tuple[float, PidDualState]:
    """One controller step on the constraint residual J_c - eps1.

    The derivative term only reacts to cost increases, so falling cost
    is never penalized; the integral and the output are clipped at zero.
    """
    delta = J_c - eps1
    derivative = max(J_c - state.prev_cost, 0.0)
    integral = max(state.integral + delta, 0.0)
    lam = max(state.K_P * delta + state.K_I * integral + state.K_D * derivative,
              0.0)
    return lam, replace(state, lam=lam, integral=integral, prev_cost=J_c)


# --- actor objective -------------------------------------------------------


def lagrangian_actor_loss(q_r: np.ndarray, q_c: np.ndarray,
                          lam: float) -> float:
    """-mean(Q_r - lambda*Q_c) / (1 + lambda) over policy actions.

    The 1/(1 + lambda) normalization keeps the gradient scale bounded
    when the multiplier winds up.
    """
    q_r, q_c = np.asarray(q_r, dtype=float), np.asarray(q_c, dtype=float)
    if q_r.shape != q_c.shape:
        raise ShapeMismatch(f"Q_r shape {q_r.shape} != Q_c shape {q_c.shape}")
    if lam < 0:
        raise ConfigError("lambda must be non-negative")
    return float(-np.mean(q_r - lam * q_c) / (1.0 + lam))


# --- shared rollout / trace machinery --------------------------------------


def run_episode(env, policy: GaussianPolicy,
                rng: np.random.Generator | None = None) -> list[Transition]:
    """One full episode; stochastic if an rng is given, else the mean
    policy.  Actions are produced in [0, 1] and scaled to engine power.

    Exploration noise is injected before the squashing nonlinearity so
    noisy rollouts stay distributionally close to the mean policy even
    when the mean saturates near an action bound (post-squash noise
    would be clipped one-sidedly there and bias the behavior).
    """
    obs = env.reset()
    transitions = []
    for _ in range(env.num_steps):
        x = obs.as_array() / env.obs_scale
        if rng is None:
            a = float(policy.mean(x).item())
        else:
            y = np.clip(policy.mean_net.forward(x), -0.999999, 0.999999)
            z = np.arctanh(y) + policy.std * rng.standard_normal(y.shape)
            a = float(0.5 * (1.0 + np.tanh(z)).item())
        a = min(max(a, 0.0), 1.0)
        transitions.append(env.step(a * env.action_high))
        obs = transitions[-1].s_next
    return transitions


def push_episode(buffer: ReplayBuffer, env, transitions: Sequence[Transition]):
    """Store an episode as (scaled obs, normalized action) tuples."""
    for tr in transitions:
        buffer.push(tr.s.as_array() / env.obs_scale,
                    [tr.a / env.action_high], tr.r, tr.c,
                    tr.s_next.as_array() / env.obs_scale, tr.done)


def write_trace(rows: Sequence[dict], stream: TextIO,
                columns: Sequence[str] = TRACE_COLUMNS) -> None:
    """Trace CSV with floats in repr form so reruns are byte-identical."""
    writer = csv.writer(stream)
    writer.writerow(columns)
    for row in rows:
        writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                         for c in columns])


@dataclass
class BestTracker:
    """Feasibility-first checkpoint selection.

    A candidate is feasible when its discounted cost meets the budget
    and, for corridor environments, the final SOC lands inside the
    accepted band around the balance point.  Among feasible candidates
    the highest reward wins; until one exists, the lowest cost wins.
    """

    eps1: float
    balance_soc: float | None = None
    soc_band: float = 0.03
    best_state: dict | None = None
    best_returns: EpisodeReturns | None = None
    best_feasible: bool = False

    def feasible(self, ret: EpisodeReturns) -> bool:
        if ret.J_c > self.eps1:
            return False
        if self.balance_soc is not None:
            return abs(ret.final_soc - self.balance_soc) <= self.soc_band
        return True

    def offer(self, ret: EpisodeReturns, state: dict) -> bool:
        feasible = self.feasible(ret)
        if self.best_returns is None:
            better = True
        elif feasible and not self.best_feasible:
            better = True
        elif feasible == self.best_feasible:
            better = (ret.J_r > self.best_returns.J_r if feasible
                      else ret.J_c < self.best_returns.J_c)
        else:
            better = False
        if better:
            self.best_state = state
            self.best_returns = ret
            self.best_feasible = feasible
        return better


# --- trainer ---------------------------------------------------------------


@dataclass
class PidConfig:
    """Knobs for the PID-Lagrangian trainer."""

    epochs: int = 200
    num_envs: int = 4
    gamma: float = 0.99
    eps_T: float = 1.5
    K_P: float = 0.5
    K_I: float = 0.1
    K_D: float = 0.5
    hidden: tuple[int, ...] = (64, 64)
    actor_lr: float = 2e-3
    critic_lr: float = 2e-3
    batch_size: int = 128
    updates_per_epoch: int = 40
    buffer_capacity: int = 200_000
    explore_log_std: float = -2.0
    init_action: float = 0.1  # initial policy mean, fraction of max power
    reward_scale: float = 1.0  # critic-side reward scaling (conditioning)
    cost_scale: float = 1.0  # critic-side cost scaling (conditioning)
    warmup_epochs: int = 2
    soc_band: float = 0.03
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.num_envs < 1:
            raise ConfigError("need at least one epoch and one environment")
        if not 0.0 < self.init_action < 1.0:
            raise ConfigError("init_action must be inside (0, 1)")


@dataclass
class TrainResult:
    trace: list[dict]
    best_state: dict | None
    best_returns: EpisodeReturns | None
    best_feasible: bool
    eps1: float


def train(config: PidConfig, env_factory: Callable[[], object],
          seed: int, out_dir: str | Path | None = None) -> TrainResult:
    """Full primal-dual training run; deterministic for a given seed.

    Each epoch: every environment plays one exploratory episode into the
    replay buffer, the multiplier takes one controller step on the mean
    discounted episode cost, then critics and actor take minibatch
    updates.  A deterministic evaluation episode feeds best-checkpoint
    selection.  Returns the trace and the best policy state.
    """
    rng = np.random.default_rng(seed)
    envs = [env_factory() for _ in range(config.num_envs)]
    eval_env = env_factory()
    horizon = envs[0].num_steps
    eps1 = cost_limit(config.eps_T, horizon, config.gamma)

    obs_dim = envs[0].obs_dim
    policy = GaussianPolicy(obs_dim, hidden=config.hidden, rng=rng,
                            log_std_init=config.explore_log_std)
    # start the mean near the configured action so exploration covers the
    # low-power regime the task actually lives in
    policy.mean_net.biases[-1][:] = np.arctanh(2.0 * config.init_action - 1.0)
    critics = Critics(obs_dim, hidden=config.hidden, rng=rng)
    opt_actor = Adam.for_net(policy.mean_net, lr=config.actor_lr)
    opt_r = Adam.for_net(critics.q_r, lr=config.critic_lr)
    opt_c = Adam.for_net(critics.q_c, lr=config.critic_lr)
    buffer = ReplayBuffer(config.buffer_capacity, obs_dim)

    corridor = getattr(eval_env, "corridor", None)
    tracker = BestTracker(eps1=eps1,
                          balance_soc=None if corridor is None else corridor.B,
                          soc_band=config.soc_band)
    trace: list[dict] = []

    try:
        _train_loop(config, envs, eval_env, policy, critics, opt_actor, opt_r,
                    opt_c, buffer, tracker, trace, eps1, rng)
    except KeyboardInterrupt:
        # stop training but still flush the best checkpoint seen so far
        pass

    result = TrainResult(trace=trace, best_state=tracker.best_state,
                         best_returns=tracker.best_returns,
                         best_feasible=tracker.best_feasible, eps1=eps1)
    if out_dir is not None:
        _persist(result, Path(out_dir))
    return result


def _train_loop(config, envs, eval_env, policy, critics, opt_actor, opt_r,
                opt_c, buffer, tracker, trace, eps1, rng):
    dual = PidDualState(config.K_P, config.K_I, config.K_D)
    for epoch in range(config.epochs):
        returns = []
        for env in envs:
            transitions = run_episode(env, policy, rng)
            push_episode(buffer, env, transitions)
            returns.append(episode_returns(transitions, config.gamma))

        # the dual reacts to the mean policy's own episode: exploration
        # noise must not mask a constraint-violating mean
        eval_transitions = run_episode(eval_env, policy)
        push_episode(buffer, eval_env, eval_transitions)
        eval_ret = episode_returns(eval_transitions, config.gamma)
        lam, dual = pid_dual_update(dual, eval_ret.J_c, eps1)
        if epoch % config.eval_every == 0:
            tracker.offer(eval_ret, {"policy": policy.to_state(),
                                     "critics": critics.to_state(),
                                     "lambda": lam, "epoch": epoch})

        if buffer.size >= config.batch_size:
            for _ in range(config.updates_per_epoch):
                batch = buffer.sample(config.batch_size, rng)
                batch["rew"] = batch["rew"] * config.reward_scale
                batch["cost"] = batch["cost"] * config.cost_scale
                next_actions = np.clip(policy.mean(batch["next_obs"]), 0.0, 1.0)
                critic_td_update(critics, batch, next_actions, config.gamma,
                                 opt_r, opt_c)
                if epoch >= config.warmup_epochs:
                    _actor_update(policy, critics, batch["obs"], lam, opt_actor)

        trace.append({
            "epoch": epoch,
            "mean_Jr": float(np.mean([r.J_r for r in returns])),
            "mean_Jc": float(np.mean([r.J_c for r in returns])),
            "lambda": lam,
            "fuel_g": float(np.mean([r.total_fuel for r in returns])),
            "final_soc": float(np.mean([r.final_soc for r in returns])),
        })


def _actor_update(policy: GaussianPolicy, critics: Critics,
                  obs: np.ndarray, lam: float, opt: Adam) -> float:
    """One ascent step on mean(Q_r - lambda*Q_c)/(1 + lambda) at the
    policy mean, chaining through the critics' action gradients."""
    n = obs.shape[0]
    mean, cache = policy.mean_cached(obs)
    xa = np.concatenate([obs, np.atleast_2d(mean)], axis=1)
    ones = np.ones((n, 1))
    q_r, cache_r = critics.q_r.forward_cached(xa)
    q_c, cache_c = critics.q_c.forward_cached(xa)
    _, dx_r = critics.q_r.backward(cache_r, ones)
    _, dx_c = critics.q_c.backward(cache_c, ones)
    d_action = (dx_r[:, -1:] - lam * dx_c[:, -1:]) / ((1.0 + lam) * n)
    grads, _ = policy.backward_mean(cache, d_action)
    opt.step_net(policy.mean_net, [(-dw, -db) for dw, db in grads])
    return lagrangian_actor_loss(q_r[:, 0], q_c[:, 0], lam)


def _persist(result: TrainResult, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "trace.csv", "w", newline="") as fh:
        columns = list(result.trace[0].keys()) if result.trace else TRACE_COLUMNS
        write_trace(result.trace, fh, columns)
    if result.best_state is not None:
        save_checkpoint(out_dir / "best.json", result.best_state)
