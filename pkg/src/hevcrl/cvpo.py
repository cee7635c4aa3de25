"""Variational constrained trainer alternating E- and M-steps.

Each epoch the E-step builds, per sampled state, a nonparametric action
distribution over M policy samples that maximizes expected reward-value
subject to a cost-value budget and a KL trust region around the current
policy; its closed form is a softmax of (Q_r - lambda*Q_c)/eta with
(eta, lambda) found by minimizing a convex dual.  The M-step then fits
the parametric Gaussian policy to those weights by penalized maximum
likelihood under a hard KL cap.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .env import episode_returns
from .errors import (
    ConfigError,
    DegenerateWeights,
    KlDivergenceBlowup,
    NonFiniteObjective,
    ShapeMismatch,
)
from .lagrangian import (
    TRACE_COLUMNS,
    BestTracker,
    TrainResult,
    cost_limit,
    push_episode,
    run_episode,
    write_trace,
)
from .nets import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    Adam,
    Critics,
    GaussianPolicy,
    ReplayBuffer,
    critic_td_update,
    save_checkpoint,
)

CVPO_TRACE_COLUMNS = TRACE_COLUMNS + ["eta", "lambda_cvpo"]


@dataclass
class CvpoConfig:
    """Knobs for the variational trainer."""

    epochs: int = 200
    num_envs: int = 4
    gamma: float = 0.99
    eps_T: float = 1.5
    eps2: float = 0.02  # E-step KL radius
    eps_kl: float = 0.01  # M-step KL radius
    M: int = 16  # sampled actions per state
    eta_min: float = 1e-4
    lam_max: float = 1e4
    dual_sweeps: int = 30
    dual_tol: float = 1e-10
    m_step_iters: int = 30
    m_step_lr: float = 5e-3
    kl_penalty_lr: float = 10.0
    hidden: tuple[int, ...] = (64, 64)
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
        if self.M < 2:
            raise ConfigError("need at least 2 sampled actions per state")
        if min(self.eps2, self.eps_kl) <= 0 or self.eta_min <= 0:
            raise ConfigError("KL radii and eta_min must be positive")
        if not 0.0 < self.init_action < 1.0:
            raise ConfigError("init_action must be inside (0, 1)")


# --- convex dual -----------------------------------------------------------


def _advantage_logits(eta, lam, q_r, q_c):
    q_r, q_c = np.atleast_2d(q_r), np.atleast_2d(q_c)
    if q_r.shape != q_c.shape:
        raise ShapeMismatch(f"Q_r shape {q_r.shape} != Q_c shape {q_c.shape}")
    return (q_r - lam * q_c) / eta


def dual_objective(eta: float, lam: float, q_r: np.ndarray, q_c: np.ndarray,
                   eps1: float, eps2: float) -> float:
    """lam*eps1 + eta*eps2 + eta * mean_s logmeanexp_j((Q_r - lam*Q_c)/eta).

    Minimizing this over (eta, lam) yields the dual variables of the
    per-state softmax weights; log-mean-exp is evaluated with
    max-subtraction.
    """
    if not (np.isfinite(eta) and np.isfinite(lam)):
        raise NonFiniteObjective(f"dual variables must be finite, got "
                                 f"eta={eta}, lambda={lam}")
    z = _advantage_logits(eta, lam, q_r, q_c)
    z_max = z.max(axis=1)
    lme = z_max + np.log(np.mean(np.exp(z - z_max[:, None]), axis=1))
    g = lam * eps1 + eta * eps2 + eta * float(np.mean(lme))
    if not np.isfinite(g):
        raise NonFiniteObjective(f"dual objective is {g}")
    return g


def variational_weights(eta: float, lam: float, q_r: np.ndarray,
                        q_c: np.ndarray) -> np.ndarray:
    """Per-state softmax of (Q_r - lambda*Q_c)/eta over the M samples."""
    z = _advantage_logits(eta, lam, q_r, q_c)
    z -= z.max(axis=1, keepdims=True)
    w = np.exp(z)
    w /= w.sum(axis=1, keepdims=True)
    return w if np.ndim(q_r) > 1 else w[0]


def _grad_lam(eta, lam, q_r, q_c, eps1):
    """d(dual)/d lambda = eps1 - mean_s E_w[Q_c]; nondecreasing in lam."""
    w = variational_weights(eta, lam, np.atleast_2d(q_r), np.atleast_2d(q_c))
    return eps1 - float(np.mean((w * np.atleast_2d(q_c)).sum(axis=1)))


def _grad_eta(eta, lam, q_r, q_c, eps2):
    """d(dual)/d eta = eps2 + mean_s [logmeanexp(z) - E_w[z]]."""
    z = _advantage_logits(eta, lam, q_r, q_c)
    z_max = z.max(axis=1)
    lme = z_max + np.log(np.mean(np.exp(z - z_max[:, None]), axis=1))
    w = variational_weights(eta, lam, np.atleast_2d(q_r), np.atleast_2d(q_c))
    return eps2 + float(np.mean(lme - (w * z).sum(axis=1)))


def _bisect(deriv, lo, hi, tol):
    """Root of a nondecreasing derivative on [lo, hi] (projected)."""
    if deriv(lo) >= 0:
        return lo
    if deriv(hi) <= 0:
        return hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if hi - lo < tol * max(1.0, hi):
            return mid
        if deriv(mid) > 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def solve_duals(q_r: np.ndarray, q_c: np.ndarray, eps1: float, eps2: float,
                config: CvpoConfig) -> tuple[float, float]:
    """Minimize the convex dual over [eta_min, inf) x [0, lam_max].

    Alternates exact one-dimensional minimizations (bisection on the
    monotone partial derivatives) in each coordinate; convexity of the
    objective makes the alternation converge to the global minimum.
    """
    q_r, q_c = np.atleast_2d(q_r), np.atleast_2d(q_c)
    if not (np.isfinite(q_r).all() and np.isfinite(q_c).all()):
        raise NonFiniteObjective("critic values must be finite")
    span = float(max(q_r.max() - q_r.min(), 1.0))
    eta, lam = max(config.eta_min, 1.0), 0.0
    for _ in range(config.dual_sweeps):
        lam_new = _bisect(lambda l: _grad_lam(eta, l, q_r, q_c, eps1),
                          0.0, config.lam_max, config.dual_tol)
        eta_hi = max(10.0 * span / max(eps2, 1e-12), 10.0 * eta)
        eta_new = _bisect(lambda e: _grad_eta(e, lam_new, q_r, q_c, eps2),
                          config.eta_min, eta_hi, config.dual_tol)
        moved = abs(lam_new - lam) + abs(eta_new - eta)
        eta, lam = eta_new, lam_new
        if moved < config.dual_tol:
            break
    return eta, lam


# --- E-step ----------------------------------------------------------------


@dataclass
class VariationalWeights:
    """Per-state action samples with their optimal softmax weights."""

    obs: np.ndarray  # (S, obs_dim)
    actions: np.ndarray  # (S, M)
    weights: np.ndarray  # (S, M), rows sum to 1
    eta: float
    lam: float
    mean_cost: float  # achieved E_q[Q_c], for monitoring
    kl_to_old: float = 0.0  # empirical KL(q || uniform-over-samples)

    def __post_init__(self):
        if not np.isfinite(self.weights).all() or (self.weights < 0).any():
            raise DegenerateWeights("non-finite or negative weights")
        if np.abs(self.weights.sum(axis=1) - 1.0).max() > 1e-9:
            raise DegenerateWeights("weights do not normalize to 1")


def e_step(obs: np.ndarray, critics: Critics, policy_old: GaussianPolicy,
           eps1: float, config: CvpoConfig,
           rng: np.random.Generator) -> VariationalWeights:
    """Sample M actions per state, score them with both critics, and
    reweight by the dual-optimal softmax."""
    obs = np.atleast_2d(obs)
    if obs.shape[0] == 0:
        raise DegenerateWeights("empty state batch")
    S = obs.shape[0]
    mu = np.atleast_2d(policy_old.mean(obs))
    actions = np.clip(mu + policy_old.std * rng.standard_normal((S, config.M)),
                      0.0, 1.0)
    obs_rep = np.repeat(obs, config.M, axis=0)
    xa = np.concatenate([obs_rep, actions.reshape(-1, 1)], axis=1)
    q_r = critics.q_r.forward(xa)[:, 0].reshape(S, config.M)
    q_c = critics.q_c.forward(xa)[:, 0].reshape(S, config.M)
    eta, lam = solve_duals(q_r, q_c, eps1, config.eps2, config)
    weights = variational_weights(eta, lam, q_r, q_c)
    mean_cost = float(np.mean((weights * q_c).sum(axis=1)))
    kl = float(np.mean((weights * np.log(np.maximum(weights * config.M, 1e-300))
                        ).sum(axis=1)))
    return VariationalWeights(obs=obs, actions=actions, weights=weights,
                              eta=eta, lam=lam, mean_cost=mean_cost,
                              kl_to_old=kl)


# --- M-step ----------------------------------------------------------------


def m_step_update(var: VariationalWeights, policy_old: GaussianPolicy,
                  eps_kl: float, config: CvpoConfig) -> GaussianPolicy:
    """Weighted maximum likelihood toward the E-step weights under a hard
    trust region KL(pi_old || pi_new) <= eps_kl.

    Runs penalized gradient ascent (the penalty multiplier itself
    adapted by the measured KL), then backtracks the parameters toward
    the old policy until the measured KL is within 1.5x the radius.
    """
    policy = policy_old.clone()
    opt = Adam.for_net(policy.mean_net, lr=config.m_step_lr)
    opt_std = Adam([policy.log_std.shape], lr=config.m_step_lr)
    nu = 0.0
    S = var.obs.shape[0]
    mu_old = np.atleast_2d(policy_old.mean(var.obs))
    std_old = policy_old.std
    for _ in range(config.m_step_iters):
        mu, cache = policy.mean_cached(var.obs)
        mu = np.atleast_2d(mu)
        std = policy.std
        # weighted log-likelihood ascent direction
        d_mu = (var.weights * (var.actions - mu) / std**2).sum(
            axis=1, keepdims=True) / S
        d_log_std = float(np.sum(
            var.weights * ((var.actions - mu) ** 2 / std**2 - 1.0)) / S)
        # trust-region penalty pulls toward the old policy
        d_mu -= nu * (mu - mu_old) / std**2 / S
        d_log_std -= nu * float(
            np.mean(1.0 - (std_old**2 + (mu_old - mu) ** 2) / std**2))
        grads, _ = policy.backward_mean(cache, d_mu)
        opt.step_net(policy.mean_net, [(-dw, -db) for dw, db in grads])
        opt_std.step([policy.log_std], [np.array([-d_log_std])])
        policy.log_std = np.clip(policy.log_std, LOG_STD_MIN, LOG_STD_MAX)
        kl = policy_old.kl_to(policy, var.obs)
        if kl > eps_kl:
            # project back inside the trust region before continuing
            policy = _backtrack_to_radius(policy_old, policy, var.obs, eps_kl)
        nu = max(0.0, nu + config.kl_penalty_lr * (kl - eps_kl))
    kl = policy_old.kl_to(policy, var.obs)
    if not np.isfinite(kl) or kl > 10.0 * eps_kl:
        raise KlDivergenceBlowup(f"M-step KL {kl:.4g} > 10 * {eps_kl}")
    return _backtrack_to_radius(policy_old, policy, var.obs, 1.5 * eps_kl)


def _backtrack_to_radius(old: GaussianPolicy, new: GaussianPolicy,
                         obs: np.ndarray, radius: float) -> GaussianPolicy:
    """Interpolate parameters toward the old policy until the measured
    KL is inside the radius."""
    if old.kl_to(new, obs) <= radius:
        return new
    alpha = 1.0
    for _ in range(30):
        alpha *= 0.7
        trial = old.clone()
        for i in range(len(trial.mean_net.weights)):
            trial.mean_net.weights[i] += alpha * (
                new.mean_net.weights[i] - old.mean_net.weights[i])
            trial.mean_net.biases[i] += alpha * (
                new.mean_net.biases[i] - old.mean_net.biases[i])
        trial.log_std = old.log_std + alpha * (new.log_std - old.log_std)
        if old.kl_to(trial, obs) <= radius:
            return trial
    return old.clone()


# --- trainer ---------------------------------------------------------------


def train(config: CvpoConfig, env_factory: Callable[[], object],
          seed: int, out_dir: str | Path | None = None) -> TrainResult:
    """EM-alternating training run; deterministic for a given seed.

    Each epoch: exploratory episodes fill the replay buffer, critics
    take TD steps, then one E-step on a sampled state batch produces
    variational weights the M-step fits the policy to.  Trace rows add
    the dual variables to the shared schema.
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
    opt_r = Adam.for_net(critics.q_r, lr=config.critic_lr)
    opt_c = Adam.for_net(critics.q_c, lr=config.critic_lr)
    buffer = ReplayBuffer(config.buffer_capacity, obs_dim)

    corridor = getattr(eval_env, "corridor", None)
    tracker = BestTracker(eps1=eps1,
                          balance_soc=None if corridor is None else corridor.B,
                          soc_band=config.soc_band)
    trace: list[dict] = []
    eta, lam = config.eta_min, 0.0

    try:
        _train_loop(config, envs, eval_env, policy, critics, opt_r, opt_c,
                    buffer, tracker, trace, eps1, eta, lam, rng)
    except KeyboardInterrupt:
        # stop training but still flush the best checkpoint seen so far
        pass

    result = TrainResult(trace=trace, best_state=tracker.best_state,
                         best_returns=tracker.best_returns,
                         best_feasible=tracker.best_feasible, eps1=eps1)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "trace.csv", "w", newline="") as fh:
            write_trace(result.trace, fh, CVPO_TRACE_COLUMNS)
        if result.best_state is not None:
            save_checkpoint(out / "best.json", result.best_state)
    return result


def _train_loop(config, envs, eval_env, policy, critics, opt_r, opt_c,
                buffer, tracker, trace, eps1, eta, lam, rng):
    for epoch in range(config.epochs):
        returns = []
        for env in envs:
            transitions = run_episode(env, policy, rng)
            push_episode(buffer, env, transitions)
            returns.append(episode_returns(transitions, config.gamma))

        # mean-policy episode: drives best-checkpoint selection and gives
        # the critics on-distribution data for the deployed policy
        eval_transitions = run_episode(eval_env, policy)
        push_episode(buffer, eval_env, eval_transitions)
        eval_ret = episode_returns(eval_transitions, config.gamma)
        if epoch % config.eval_every == 0:
            tracker.offer(eval_ret, {"policy": policy.to_state(),
                                     "critics": critics.to_state(),
                                     "eta": float(eta), "lambda_cvpo": float(lam),
                                     "epoch": epoch})

        if buffer.size >= config.batch_size:
            for _ in range(config.updates_per_epoch):
                batch = buffer.sample(config.batch_size, rng)
                batch["rew"] = batch["rew"] * config.reward_scale
                batch["cost"] = batch["cost"] * config.cost_scale
                next_actions = np.clip(policy.mean(batch["next_obs"]), 0.0, 1.0)
                critic_td_update(critics, batch, next_actions, config.gamma,
                                 opt_r, opt_c)
            if epoch >= config.warmup_epochs:
                states = buffer.sample(config.batch_size, rng)["obs"]
                var = e_step(states, critics, policy,
                             eps1 * config.cost_scale, config, rng)
                eta, lam = var.eta, var.lam
                policy = m_step_update(var, policy, config.eps_kl, config)

        trace.append({
            "epoch": epoch,
            "mean_Jr": float(np.mean([r.J_r for r in returns])),
            "mean_Jc": float(np.mean([r.J_c for r in returns])),
            "lambda": 0.0,  # schema slot; this trainer's dual is lambda_cvpo
            "fuel_g": float(np.mean([r.total_fuel for r in returns])),
            "final_soc": float(np.mean([r.final_soc for r in returns])),
            "eta": float(eta),
            "lambda_cvpo": float(lam),
        })
