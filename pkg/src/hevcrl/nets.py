"""Learner substrate shared by both trainers.

Small dense networks with explicit reverse-mode gradients (no autodiff
dependency), an Adam optimizer, a Gaussian policy head, paired
reward/cost critics with Polyak-averaged targets, and a FIFO replay
buffer.  Everything is float64 numpy and fully deterministic given a
seeded Generator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyBatch, InsufficientSamples, ShapeMismatch

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


class Mlp:
    """Fully connected net: tanh hidden layers, linear or tanh output."""

    def __init__(self, sizes, rng: np.random.Generator | None = None,
                 output: str = "linear"):
        if len(sizes) < 2:
            raise ShapeMismatch("need at least input and output sizes")
        if output not in ("linear", "tanh"):
            raise ShapeMismatch(f"unknown output activation {output!r}")
        self.sizes = list(sizes)
        self.output = output
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        rng = rng or np.random.default_rng(0)
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            scale = 1.0 / np.sqrt(n_in)
            self.weights.append(rng.uniform(-scale, scale, size=(n_out, n_in)))
            self.biases.append(np.zeros(n_out))

    # --- forward / backward ---

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_cached(x)
        return y

    def forward_cached(self, x: np.ndarray):
        """Returns (output, cache) with cache reusable by backward()."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        h = np.atleast_2d(x)
        if h.shape[1] != self.sizes[0]:
            raise ShapeMismatch(
                f"input width {h.shape[1]} != first layer {self.sizes[0]}"
            )
        acts = [h]
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            if i < n - 1 or self.output == "tanh":
                h = np.tanh(z)
            else:
                h = z
            acts.append(h)
        out = h[0] if squeeze else h
        return out, acts

    def backward(self, cache, upstream: np.ndarray):
        """Gradients of sum_i <upstream_i, output_i> w.r.t. parameters
        and the input.

        Returns (grads, dx) with grads a list of (dW, db) per layer.
        """
        upstream = np.atleast_2d(np.asarray(upstream, dtype=float))
        acts = cache
        if upstream.shape != acts[-1].shape:
            raise ShapeMismatch(
                f"upstream shape {upstream.shape} != output {acts[-1].shape}"
            )
        n = len(self.weights)
        grads = [None] * n
        delta = upstream
        for i in range(n - 1, -1, -1):
            post = acts[i + 1]
            if i < n - 1 or self.output == "tanh":
                delta = delta * (1.0 - post**2)
            dw = delta.T @ acts[i]
            db = delta.sum(axis=0)
            grads[i] = (dw, db)
            delta = delta @ self.weights[i]
        return grads, delta

    def gradient(self, x: np.ndarray, upstream: np.ndarray):
        """One-call forward+backward (the explicit gradient operation)."""
        _, cache = self.forward_cached(x)
        return self.backward(cache, upstream)

    # --- parameter plumbing ---

    def parameters(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def copy_from(self, other: "Mlp") -> None:
        for i, (w, b) in enumerate(zip(other.weights, other.biases)):
            self.weights[i] = w.copy()
            self.biases[i] = b.copy()

    def clone(self) -> "Mlp":
        net = Mlp(self.sizes, output=self.output)
        net.copy_from(self)
        return net

    def polyak_from(self, live: "Mlp", factor: float) -> None:
        """target <- factor*live + (1-factor)*target."""
        for i in range(len(self.weights)):
            self.weights[i] = factor * live.weights[i] + (1 - factor) * self.weights[i]
            self.biases[i] = factor * live.biases[i] + (1 - factor) * self.biases[i]

    def to_state(self) -> dict:
        return {
            "sizes": self.sizes,
            "output": self.output,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_state(cls, state: dict) -> "Mlp":
        net = cls(state["sizes"], output=state["output"])
        net.weights = [np.array(w) for w in state["weights"]]
        net.biases = [np.array(b) for b in state["biases"]]
        return net


class Adam:
    """Adam over a list of parameter arrays, state serializable."""

    def __init__(self, shapes, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    @classmethod
    def for_net(cls, net: Mlp, lr=1e-3) -> "Adam":
        return cls([p.shape for p in net.parameters()], lr=lr)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """In-place descent step along grads (pass ascent grads negated)."""
        self.t += 1
        b1t = 1 - self.beta1**self.t
        b2t = 1 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def step_net(self, net: Mlp, grads) -> None:
        flat = []
        for dw, db in grads:
            flat.extend([dw, db])
        self.step(list(net.parameters()), flat)

    def to_state(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
            "eps": self.eps, "t": self.t,
            "m": [a.tolist() for a in self.m],
            "v": [a.tolist() for a in self.v],
        }

    @classmethod
    def from_state(cls, state: dict) -> "Adam":
        opt = cls([np.shape(a) for a in state["m"]], lr=state["lr"],
                  beta1=state["beta1"], beta2=state["beta2"], eps=state["eps"])
        opt.m = [np.array(a) for a in state["m"]]
        opt.v = [np.array(a) for a in state["v"]]
        opt.t = state["t"]
        return opt


class GaussianPolicy:
    """Diagonal Gaussian over normalized actions in [0, 1].

    The mean is a tanh-bounded network of the (scaled) observation; the
    log standard deviation is a free per-dimension parameter clamped to
    [-5, 2].  Samples live on the real line and are clipped by the
    environment adapter, not here.
    """

    def __init__(self, obs_dim: int, act_dim: int = 1, hidden=(64, 64),
                 rng: np.random.Generator | None = None, log_std_init=-1.5):
        self.mean_net = Mlp([obs_dim] + list(hidden) + [act_dim], rng=rng,
                            output="tanh")
        self.log_std = np.full(act_dim, float(log_std_init))
        self.act_dim = act_dim

    @property
    def std(self) -> np.ndarray:
        return np.exp(np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX))

    def mean(self, obs: np.ndarray) -> np.ndarray:
        return 0.5 * (1.0 + self.mean_net.forward(obs))

    def mean_cached(self, obs: np.ndarray):
        out, cache = self.mean_net.forward_cached(obs)
        return 0.5 * (1.0 + out), cache

    def backward_mean(self, cache, upstream):
        """Backprop d<upstream, mean>/dparams through the 0.5(1+tanh) head."""
        return self.mean_net.backward(cache, 0.5 * np.atleast_2d(upstream))

    def sample(self, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        mu = self.mean(obs)
        return mu + self.std * rng.standard_normal(mu.shape)

    def log_prob(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        mu = self.mean(obs)
        std = self.std
        z = (np.asarray(actions) - mu) / std
        return (-0.5 * z**2 - np.log(std) - 0.5 * np.log(2 * np.pi)).sum(axis=-1)

    def kl_to(self, other: "GaussianPolicy", obs: np.ndarray) -> float:
        """Mean over obs of KL(self || other) for the diagonal Gaussians."""
        mu_p, mu_q = self.mean(obs), other.mean(obs)
        sp, sq = self.std, other.std
        kl = (np.log(sq / sp) + (sp**2 + (mu_p - mu_q) ** 2) / (2 * sq**2) - 0.5)
        return float(np.mean(kl.sum(axis=-1)))

    def clone(self) -> "GaussianPolicy":
        twin = GaussianPolicy(self.mean_net.sizes[0], self.act_dim,
                              hidden=self.mean_net.sizes[1:-1])
        twin.mean_net.copy_from(self.mean_net)
        twin.log_std = self.log_std.copy()
        return twin

    def to_state(self) -> dict:
        return {"mean_net": self.mean_net.to_state(),
                "log_std": self.log_std.tolist()}

    @classmethod
    def from_state(cls, state: dict) -> "GaussianPolicy":
        sizes = state["mean_net"]["sizes"]
        pol = cls(sizes[0], sizes[-1], hidden=sizes[1:-1])
        pol.mean_net = Mlp.from_state(state["mean_net"])
        pol.log_std = np.array(state["log_std"])
        return pol


class Critics:
    """Q_r and Q_c over (obs, action) with Polyak-averaged targets."""

    def __init__(self, obs_dim: int, act_dim: int = 1, hidden=(64, 64),
                 rng: np.random.Generator | None = None, polyak: float = 0.005):
        sizes = [obs_dim + act_dim] + list(hidden) + [1]
        rng = rng or np.random.default_rng(0)
        self.q_r = Mlp(sizes, rng=rng)
        self.q_c = Mlp(sizes, rng=rng)
        self.q_r_targ = self.q_r.clone()
        self.q_c_targ = self.q_c.clone()
        self.polyak = polyak

    def update_targets(self, factor: float | None = None) -> None:
        f = self.polyak if factor is None else factor
        self.q_r_targ.polyak_from(self.q_r, f)
        self.q_c_targ.polyak_from(self.q_c, f)

    def to_state(self) -> dict:
        return {"q_r": self.q_r.to_state(), "q_c": self.q_c.to_state(),
                "q_r_targ": self.q_r_targ.to_state(),
                "q_c_targ": self.q_c_targ.to_state(), "polyak": self.polyak}

    @classmethod
    def from_state(cls, state: dict) -> "Critics":
        sizes = state["q_r"]["sizes"]
        critics = cls(sizes[0] - 1, 1, hidden=sizes[1:-1], polyak=state["polyak"])
        critics.q_r = Mlp.from_state(state["q_r"])
        critics.q_c = Mlp.from_state(state["q_c"])
        critics.q_r_targ = Mlp.from_state(state["q_r_targ"])
        critics.q_c_targ = Mlp.from_state(state["q_c_targ"])
        return critics


def critic_td_update(critics: Critics, batch: dict, next_actions: np.ndarray,
                     gamma: float, opt_r: Adam, opt_c: Adam) -> tuple[float, float]:
    """One squared-TD-error gradient step on each critic.

    Targets use the Polyak target networks and the provided next actions
    (sampled from the current policy by the caller); both targets zero
    out the bootstrap on terminal transitions.
    """
    n = len(batch["rew"])
    if n == 0:
        raise EmptyBatch("cannot update critics on an empty batch")
    xa_next = np.concatenate([batch["next_obs"], next_actions], axis=1)
    not_done = 1.0 - batch["done"]
    y_r = batch["rew"] + gamma * not_done * critics.q_r_targ.forward(xa_next)[:, 0]
    y_c = batch["cost"] + gamma * not_done * critics.q_c_targ.forward(xa_next)[:, 0]
    xa = np.concatenate([batch["obs"], batch["act"]], axis=1)
    losses = []
    for net, opt, y in ((critics.q_r, opt_r, y_r), (critics.q_c, opt_c, y_c)):
        q, cache = net.forward_cached(xa)
        err = q[:, 0] - y
        losses.append(float(np.mean(err**2)))
        grads, _ = net.backward(cache, (2.0 * err / n)[:, None])
        opt.step_net(net, grads)
    critics.update_targets()
    return losses[0], losses[1]


class ReplayBuffer:
    """FIFO ring of transitions with uniform without-replacement batches."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int = 1):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.act = np.zeros((capacity, act_dim))
        self.rew = np.zeros(capacity)
        self.cost = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.size = 0
        self._head = 0

    def push(self, obs, act, rew, cost, next_obs, done) -> None:
        i = self._head
        self.obs[i] = obs
        self.act[i] = act
        self.rew[i] = rew
        self.cost[i] = cost
        self.next_obs[i] = next_obs
        self.done[i] = float(done)
        self._head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        if batch_size > self.size:
            raise InsufficientSamples(
                f"buffer holds {self.size} < batch {batch_size}"
            )
        idx = rng.choice(self.size, size=batch_size, replace=False)
        return {
            "obs": self.obs[idx], "act": self.act[idx], "rew": self.rew[idx],
            "cost": self.cost[idx], "next_obs": self.next_obs[idx],
            "done": self.done[idx],
        }


# --- checkpointing ---

CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, payload: dict) -> None:
    """Versioned JSON dump; floats round-trip bit-exactly via repr."""
    doc = {"format_version": CHECKPOINT_VERSION, **payload}
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ShapeMismatch(f"unsupported checkpoint version {doc.get('format_version')}")
    return doc
