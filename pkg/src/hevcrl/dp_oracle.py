"""Exact constrained minimum-fuel solutions on discretized instances.

Backward induction over a (time, SOC) grid with the corridor as a hard
constraint: any SOC outside the allowed range has infinite cost-to-go,
and the terminal SOC must return to the balance point within half a grid
cell.  The transition dynamics reuse the powertrain functions verbatim,
so the oracle and the environment can never drift apart.

`enumerate_solve` brute-forces every action sequence on the same
dynamics and is the oracle's own oracle on tiny instances.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .cycles import DriveCycle
from .env import SocCorridor, corridor_limits
from .errors import Infeasible, InstanceTooLarge
from .powertrain import (
    ENGINE_OFF_THRESHOLD_KW,
    Powertrain,
    battery_step,
    demand_power,
    engine_fuel_rate,
    power_split,
)

_BIG = 1e15  # stand-in for infinite cost-to-go (keeps interpolation finite)
_FEAS_EPS = 1e-12


@dataclass(frozen=True)
class DpGrid:
    cycle: DriveCycle
    corridor: SocCorridor
    powertrain: Powertrain
    soc_levels: int = 201
    action_levels: int = 21
    snap_to_grid: bool = False
    budget: int = 50_000_000  # soc_levels * action_levels * steps cap
    terminal_tol: float | None = None  # defaults to half a grid cell

    def __post_init__(self):
        if self.soc_levels < 2 or self.action_levels < 2:
            raise InstanceTooLarge("need at least 2 SOC levels and 2 actions")
        if self.corridor.Ts != self.cycle.num_steps:
            raise InstanceTooLarge("corridor Ts must match cycle steps")

    @property
    def soc_grid(self) -> np.ndarray:
        return np.linspace(self.corridor.L, self.corridor.H, self.soc_levels)

    @property
    def cell(self) -> float:
        return (self.corridor.H - self.corridor.L) / (self.soc_levels - 1)

    @property
    def terminal_band(self) -> float:
        """Allowed |final SOC - B|; half a grid cell unless overridden."""
        if self.terminal_tol is not None:
            return self.terminal_tol
        return self.cell / 2

    @property
    def actions(self) -> np.ndarray:
        return np.linspace(0.0, self.powertrain.engine.max_power,
                           self.action_levels)


@dataclass
class DpSolution:
    min_fuel: float  # g
    value: np.ndarray  # (Ts+1, soc_levels) optimal cost-to-go
    policy: np.ndarray  # (Ts, soc_levels) action index
    feasible: bool = True
    soc_trajectory: np.ndarray = field(default_factory=lambda: np.array([]))
    actions_kw: np.ndarray = field(default_factory=lambda: np.array([]))


def _step_arrays(grid: DpGrid, t: int):
    """Per-action (fuel g, SOC delta applied from grid nodes) at step t."""
    v = float(grid.cycle.speeds[t])
    a = grid.cycle.accel_at(t)
    p_dem = demand_power(v, a, grid.powertrain.vehicle)
    acts = grid.actions.copy()
    acts[acts < ENGINE_OFF_THRESHOLD_KW] = 0.0
    fuel, _, _ = engine_fuel_rate(acts, grid.powertrain.engine)
    fuel = fuel * grid.cycle.dt
    p_batt, _ = power_split(p_dem, acts, grid.powertrain.vehicle,
                            grid.powertrain.battery)
    return fuel, np.atleast_1d(p_batt)


def _next_soc(grid: DpGrid, soc_col: np.ndarray, p_batt: np.ndarray):
    """(S, A) SOC after one step from each node under each action."""
    new_soc, _ = battery_step(soc_col[:, None], p_batt[None, :],
                              grid.cycle.dt, grid.powertrain.battery)
    if grid.snap_to_grid:
        idx = np.clip(np.rint((new_soc - grid.corridor.L) / grid.cell),
                      0, grid.soc_levels - 1).astype(int)
        new_soc = grid.soc_grid[idx]
    return new_soc


def dp_solve(grid: DpGrid) -> DpSolution:
    """Minimum-fuel value/policy tables by backward induction."""
    steps = grid.corridor.Ts
    if grid.soc_levels * grid.action_levels * steps > grid.budget:
        raise InstanceTooLarge("instance exceeds the DP search budget")
    soc = grid.soc_grid
    value = np.full((steps + 1, grid.soc_levels), _BIG)
    policy = np.zeros((steps, grid.soc_levels), dtype=int)
    value[steps][np.abs(soc - grid.corridor.B) <= grid.terminal_band + _FEAS_EPS] = 0.0

    for t in range(steps - 1, -1, -1):
        fuel, p_batt = _step_arrays(grid, t)
        new_soc = _next_soc(grid, soc, p_batt)
        ok, v_next = _stage_cost_to_go(grid, t, new_soc, value)
        total = np.where(ok, fuel[None, :] + v_next, _BIG)
        policy[t] = np.argmin(total, axis=1)
        best = total[np.arange(grid.soc_levels), policy[t]]
        upper, lower = corridor_limits(t, grid.corridor)
        outside = (soc < lower - _FEAS_EPS) | (soc > upper + _FEAS_EPS)
        best[outside] = _BIG
        value[t] = best

    min_fuel = float(np.interp(grid.corridor.B, soc, value[0]))
    if min_fuel >= _BIG / 2:
        raise Infeasible("no action sequence keeps SOC inside the corridor")
    traj, acts = _rollout(grid, value)
    return DpSolution(min_fuel=min_fuel, value=value, policy=policy,
                      feasible=True, soc_trajectory=traj, actions_kw=acts)


def _stage_cost_to_go(grid: DpGrid, t: int, new_soc: np.ndarray,
                      value: np.ndarray):
    """(feasible mask, interpolated cost-to-go) for candidate successors.

    Cost-to-go is interpolated across the feasible node band of step t+1
    only, with half a grid cell of slack at the band edges (the same
    tolerance the terminal constraint uses); everything else is
    infeasible.  This keeps a feasible tube of sub-cell width alive
    instead of eroding it node by node.
    """
    if t == grid.corridor.Ts - 1:
        # terminal band replaces the pinched corridor at Ts
        ok = np.abs(new_soc - grid.corridor.B) <= grid.terminal_band + _FEAS_EPS
        return ok, np.zeros_like(new_soc)
    feasible = value[t + 1] < _BIG / 2
    if not feasible.any():
        return np.zeros(new_soc.shape, dtype=bool), np.zeros_like(new_soc)
    soc_f = grid.soc_grid[feasible]
    ok = (new_soc >= soc_f[0] - grid.cell / 2 - _FEAS_EPS) & (
        new_soc <= soc_f[-1] + grid.cell / 2 + _FEAS_EPS
    )
    v_next = np.interp(new_soc, soc_f, value[t + 1][feasible])
    ok &= v_next < _BIG / 2  # interior infeasible nodes, if any
    return ok, v_next


def _rollout(grid: DpGrid, value: np.ndarray):
    """Greedy forward pass re-doing the one-step lookahead at the
    continuous SOC (avoids compounding nearest-node policy error)."""
    soc = grid.corridor.B
    traj = [soc]
    taken = []
    for t in range(grid.corridor.Ts):
        fuel, p_batt = _step_arrays(grid, t)
        new_soc = _next_soc(grid, np.array([soc]), p_batt)[0]
        ok, v_next = _stage_cost_to_go(grid, t, new_soc, value)
        total = np.where(ok, fuel + v_next, _BIG)
        j = int(np.argmin(total))
        taken.append(grid.actions[j])
        soc = float(new_soc[j])
        traj.append(soc)
    return np.array(traj), np.array(taken)


def enumerate_solve(grid: DpGrid) -> float:
    """Exhaustive minimum over all action sequences; exact on its set."""
    steps = grid.corridor.Ts
    if grid.action_levels ** steps > 1_000_000:
        raise InstanceTooLarge(
            f"{grid.action_levels}^{steps} sequences exceed the 1e6 cap"
        )
    per_step = [_step_arrays(grid, t) for t in range(steps)]
    limits = [corridor_limits(t + 1, grid.corridor) for t in range(steps)]
    cell_half = grid.terminal_band + _FEAS_EPS
    best = np.inf
    for seq in itertools.product(range(grid.action_levels), repeat=steps):
        soc = grid.corridor.B
        total = 0.0
        feasible = True
        for t, j in enumerate(seq):
            fuel, p_batt = per_step[t]
            soc = float(_next_soc(grid, np.array([soc]), p_batt[j:j + 1])[0, 0])
            if t < steps - 1:
                upper, lower = limits[t]
                if not (lower - _FEAS_EPS <= soc <= upper + _FEAS_EPS):
                    feasible = False
                    break
            total += fuel[j]
            if total >= best:
                feasible = False
                break
        if feasible and abs(soc - grid.corridor.B) <= cell_half:
            best = total
    if not np.isfinite(best):
        raise Infeasible("no enumerated action sequence is feasible")
    return float(best)
