"""Constrained MDP over the powertrain: reward is negative fuel, cost is
SOC-corridor violation.

The vehicle tracks the reference speed exactly; the action only decides
how much of the demanded power the engine supplies.  Episodes are fully
deterministic given the action sequence.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence, TextIO

import numpy as np

from .cycles import DriveCycle
from .errors import (
    ConfigError,
    EmptyEpisode,
    EpisodeFinished,
    StepOutOfRange,
    ZeroDistance,
)
from .powertrain import (
    ENGINE_OFF_THRESHOLD_KW,
    Powertrain,
    battery_step,
    demand_power,
    engine_fuel_rate,
    power_split,
)

FUEL_DENSITY_G_PER_L = 720.0

# Fixed per-feature observation scales: SOC as-is, velocity / 33 m/s,
# acceleration / 3 m/s^2.
OBS_SCALE = np.array([1.0, 33.0, 3.0])


@dataclass(frozen=True)
class SocCorridor:
    """Time-varying SOC-allowed range anchored at the balance point B."""

    H: float  # highest SOC
    L: float  # lowest SOC
    B: float  # initial / balance SOC
    bl: int  # left breakpoint, steps
    br: int  # right breakpoint, steps
    Ts: int  # episode end, steps

    def __post_init__(self):
        if not 0.0 <= self.L < self.B < self.H <= 1.0:
            raise ConfigError("corridor needs 0 <= L < B < H <= 1")
        if not 0 < self.bl < self.br < self.Ts:
            raise ConfigError("corridor needs 0 < bl < br < Ts")


def corridor_limits(t, corridor: SocCorridor):
    """(upper, lower) SOC limits at step t.

    Both limits ramp away from B on [0, bl], hold at H / L on (bl, br],
    and ramp back to B on (br, Ts].
    """
    t_arr = np.asarray(t)
    if (t_arr < 0).any() or (t_arr > corridor.Ts).any():
        raise StepOutOfRange(f"step {t} outside [0, {corridor.Ts}]")
    t_f = t_arr.astype(float)

    def limit(extreme):
        ramp_in = (extreme - corridor.B) / corridor.bl * t_f + corridor.B
        ramp_out = (
            (extreme - corridor.B) / (corridor.br - corridor.Ts) * (t_f - corridor.Ts)
            + corridor.B
        )
        return np.where(t_f <= corridor.bl, ramp_in,
                        np.where(t_f > corridor.br, ramp_out, extreme))

    upper, lower = limit(corridor.H), limit(corridor.L)
    if t_arr.ndim == 0:
        return float(upper), float(lower)
    return upper, lower


def soc_cost(soc, t, corridor: SocCorridor):
    """Corridor violation: max(soc - upper, 0) + max(lower - soc, 0)."""
    upper, lower = corridor_limits(t, corridor)
    cost = np.maximum(np.asarray(soc) - upper, 0.0) + np.maximum(
        lower - np.asarray(soc), 0.0
    )
    return float(cost) if np.ndim(cost) == 0 else cost


@dataclass(frozen=True)
class Observation:
    soc: float
    velocity: float  # m/s
    acceleration: float  # m/s^2

    def as_array(self) -> np.ndarray:
        return np.array([self.soc, self.velocity, self.acceleration])


@dataclass(frozen=True)
class Transition:
    """One environment step: (s, a, s', r, c, done)."""

    s: Observation
    a: float  # engine power, kW
    s_next: Observation
    r: float  # -grams of fuel this step
    c: float  # corridor violation, SOC fraction units
    done: bool


@dataclass(frozen=True)
class EpisodeReturns:
    J_r: float
    J_c: float
    total_fuel: float  # g
    final_soc: float


def episode_returns(transitions: Sequence[Transition], gamma: float) -> EpisodeReturns:
    """Discounted returns and episode totals for an ordered transition list."""
    if not transitions:
        raise EmptyEpisode("no transitions")
    if not 0.0 < gamma <= 1.0:
        raise ConfigError("gamma must be in (0, 1]")
    discounts = gamma ** np.arange(len(transitions))
    r = np.array([tr.r for tr in transitions])
    c = np.array([tr.c for tr in transitions])
    return EpisodeReturns(
        J_r=float(discounts @ r),
        J_c=float(discounts @ c),
        total_fuel=float(-r.sum()),
        final_soc=transitions[-1].s_next.soc,
    )


def fuel_economy(total_fuel_g: float, distance_km: float) -> float:
    """Fuel economy in L/100km at a density of 720 g/L."""
    if distance_km <= 0:
        raise ZeroDistance("distance must be positive")
    return total_fuel_g / FUEL_DENSITY_G_PER_L / distance_km * 100.0


class HevEnv:
    """Deterministic episode over one drive cycle.

    One instance owns one episode's mutable state; run many instances
    for parallel rollouts.  `episode_log` holds per-step rows suitable
    for the episode-log CSV.
    """

    def __init__(self, cycle: DriveCycle, powertrain: Powertrain,
                 corridor: SocCorridor):
        if corridor.Ts != cycle.num_steps:
            raise ConfigError(
                f"corridor Ts={corridor.Ts} must equal cycle steps={cycle.num_steps}"
            )
        self.cycle = cycle
        self.powertrain = powertrain
        self.corridor = corridor
        self._t: int | None = None
        self._soc = corridor.B
        self.episode_log: list[dict] = []

    # trainer-facing metadata
    @property
    def obs_dim(self) -> int:
        return 3

    @property
    def action_low(self) -> float:
        return 0.0

    @property
    def action_high(self) -> float:
        return self.powertrain.engine.max_power

    @property
    def obs_scale(self) -> np.ndarray:
        return OBS_SCALE

    @property
    def num_steps(self) -> int:
        return self.corridor.Ts

    def _observe(self, t: int) -> Observation:
        return Observation(self._soc, float(self.cycle.speeds[t]),
                           self.cycle.accel_at(t))

    def reset(self, seed: int | None = None) -> Observation:
        """Start a fresh episode at SOC = B.  The environment itself is
        deterministic; the seed only matters to the learner."""
        del seed
        self._t = 0
        self._soc = self.corridor.B
        self.episode_log = []
        return self._observe(0)

    def step(self, action: float) -> Transition:
        """Advance one cycle step with the given engine power (kW)."""
        if self._t is None or self._t >= self.corridor.Ts:
            raise EpisodeFinished("call reset() before stepping")
        t = self._t
        obs = self._observe(t)
        v, a = obs.velocity, obs.acceleration
        p_eng = float(np.clip(action, 0.0, self.powertrain.engine.max_power))
        if p_eng < ENGINE_OFF_THRESHOLD_KW:
            p_eng = 0.0
        p_dem = demand_power(v, a, self.powertrain.vehicle)
        fuel_rate, _, _ = engine_fuel_rate(p_eng, self.powertrain.engine)
        p_batt, _waste = power_split(p_dem, p_eng, self.powertrain.vehicle,
                                     self.powertrain.battery)
        new_soc, _clamped = battery_step(self._soc, p_batt, self.cycle.dt,
                                         self.powertrain.battery)
        self._soc = new_soc
        self._t = t + 1
        r = -fuel_rate * self.cycle.dt
        c = soc_cost(new_soc, t + 1, self.corridor)
        done = self._t == self.corridor.Ts
        s_next = self._observe(self._t)
        upper, lower = corridor_limits(t + 1, self.corridor)
        self.episode_log.append({
            "t": t, "v": v, "a": a, "P_dem": p_dem, "P_eng": p_eng,
            "P_batt": p_batt, "soc": new_soc, "upper": upper, "lower": lower,
            "r": r, "c": c,
        })
        return Transition(obs, p_eng, s_next, r, c, done)


EPISODE_LOG_COLUMNS = ["t", "v", "a", "P_dem", "P_eng", "P_batt", "soc",
                       "upper", "lower", "r", "c"]


def write_episode_log(rows: Sequence[dict], stream: TextIO) -> None:
    """Write per-step episode rows as CSV (feeds the plot command)."""
    writer = csv.DictWriter(stream, fieldnames=EPISODE_LOG_COLUMNS)
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k]
                         for k in EPISODE_LOG_COLUMNS})
