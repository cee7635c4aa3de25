"""Simplified longitudinal-dynamics and power-split physics.

The engine is restricted to its optimal brake-specific-fuel-consumption
line, so engine power is the single mechanical degree of freedom; the
battery closes the power balance.  All functions are pure and accept
numpy arrays elementwise, which lets the environment and the DP oracle
share one code path.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, PowerLimitExceeded, PowerOutOfRange

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# Engine powers below this are treated as engine-off (mode switching
# between EV and HEV without idle hysteresis).
ENGINE_OFF_THRESHOLD_KW = 1.0


@dataclass(frozen=True)
class VehicleParams:
    mass: float  # kg
    drag_coeff: float
    frontal_area: float  # m^2
    air_density: float  # kg/m^3
    rolling_coeff: float
    gravity: float = 9.81
    driveline_efficiency: float = 0.92
    regen_efficiency: float = 0.5
    max_regen_power: float = 30.0  # kW

    def __post_init__(self):
        positive = (
            self.mass, self.drag_coeff, self.frontal_area, self.air_density,
            self.rolling_coeff, self.gravity, self.driveline_efficiency,
            self.max_regen_power,
        )
        if any(p <= 0 for p in positive):
            raise ConfigError("vehicle parameters must be positive")
        if not 0.0 < self.driveline_efficiency <= 1.0:
            raise ConfigError("driveline_efficiency must be in (0, 1]")
        if not 0.0 <= self.regen_efficiency <= 1.0:
            raise ConfigError("regen_efficiency must be in [0, 1]")


@dataclass(frozen=True)
class EngineMap:
    """Optimal-BSFC operating line, one row per power breakpoint."""

    powers: np.ndarray  # kW, strictly increasing from 0
    speeds: np.ndarray  # r/min
    torques: np.ndarray  # N*m
    bsfc: np.ndarray  # g/kWh
    idle_fuel_rate: float = 0.12  # g/s, engine spinning unloaded
    max_power: float = 57.0  # kW

    def __post_init__(self):
        for name in ("powers", "speeds", "torques", "bsfc"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.powers[0] != 0.0 or (np.diff(self.powers) <= 0).any():
            raise ConfigError("optimal line powers must strictly increase from 0")
        if (self.bsfc <= 0).any():
            raise ConfigError("bsfc must be positive")
        if self.speeds.min() < 800.0 - 1e-9 or self.speeds.max() > 4500.0 + 1e-9:
            raise ConfigError("optimal line speeds must lie within [800, 4500] r/min")
        if self.max_power > self.powers[-1] + 1e-9:
            raise ConfigError("max_power beyond the tabulated line")


@dataclass(frozen=True)
class BatteryParams:
    capacity: float  # Ah
    nominal_voltage: float  # V
    max_charge_power: float  # kW
    max_discharge_power: float  # kW
    coulombic_efficiency: float = 1.0

    def __post_init__(self):
        if self.capacity <= 0 or self.nominal_voltage <= 0:
            raise ConfigError("battery capacity and voltage must be positive")
        if self.max_charge_power <= 0 or self.max_discharge_power <= 0:
            raise ConfigError("battery power limits must be positive")
        if not 0.0 < self.coulombic_efficiency <= 1.0:
            raise ConfigError("coulombic_efficiency must be in (0, 1]")

    @property
    def energy_kwh(self) -> float:
        return self.capacity * self.nominal_voltage / 1000.0


def demand_power(speed, accel, params: VehicleParams):
    """Traction power demand at the battery/engine node, kW.

    Positive demand includes driveline losses; braking power is scaled by
    the regeneration efficiency and floored at -max_regen_power.  Rolling
    resistance applies only while moving.
    """
    speed = np.asarray(speed, dtype=float)
    accel = np.asarray(accel, dtype=float)
    drag = 0.5 * params.air_density * params.drag_coeff * params.frontal_area * speed**2
    rolling = params.mass * params.gravity * params.rolling_coeff * (speed > 0)
    raw_kw = (params.mass * accel + drag + rolling) * speed / 1000.0
    traction = np.where(
        raw_kw >= 0,
        raw_kw / params.driveline_efficiency,
        np.maximum(raw_kw * params.regen_efficiency, -params.max_regen_power),
    )
    return traction if traction.ndim else float(traction)


def engine_fuel_rate(p_eng, engine: EngineMap):
    """(fuel g/s, speed r/min, torque N*m) along the optimal BSFC line.

    Zero power means engine off: no fuel, zero speed and torque.
    """
    p = np.asarray(p_eng, dtype=float)
    scalar = p.ndim == 0
    p = np.atleast_1d(p)
    if (p < 0).any() or (p > engine.max_power + 1e-12).any():
        raise PowerOutOfRange(
            f"engine power outside [0, {engine.max_power}] kW"
        )
    bsfc = np.interp(p, engine.powers, engine.bsfc)
    speed = np.interp(p, engine.powers, engine.speeds)
    torque = np.interp(p, engine.powers, engine.torques)
    on = p > 0
    fuel = np.where(on, p * bsfc / 3600.0, 0.0)
    speed = np.where(on, speed, 0.0)
    torque = np.where(on, torque, 0.0)
    if scalar:
        return float(fuel[0]), float(speed[0]), float(torque[0])
    return fuel, speed, torque


def power_split(p_dem, p_eng, params: VehicleParams, batt: BatteryParams):
    """Battery power closing the balance, kW (discharge positive).

    Returns (p_batt, waste) with waste = p_eng + p_batt - p_dem, the
    power the battery could not accept/deliver after clamping.
    """
    p_dem = np.asarray(p_dem, dtype=float)
    p_eng = np.asarray(p_eng, dtype=float)
    p_batt = np.clip(p_dem - p_eng, -batt.max_charge_power, batt.max_discharge_power)
    waste = p_eng + p_batt - p_dem
    if p_batt.ndim:
        return p_batt, waste
    return float(p_batt), float(waste)


def battery_step(soc, p_batt, dt, batt: BatteryParams):
    """Coulomb-counting SOC update over dt seconds.

    Discharge is positive power.  Charging is derated by the coulombic
    efficiency.  Returns (new_soc, clamped) with new_soc in [0, 1].
    """
    soc = np.asarray(soc, dtype=float)
    p = np.asarray(p_batt, dtype=float)
    if (p > batt.max_discharge_power + 1e-9).any() or (
        p < -batt.max_charge_power - 1e-9
    ).any():
        raise PowerLimitExceeded("battery power outside charge/discharge limits")
    current = p * 1000.0 / batt.nominal_voltage  # A, discharge positive
    delta = -current * dt / (3600.0 * batt.capacity)
    delta = np.where(p < 0, delta * batt.coulombic_efficiency, delta)
    raw = soc + delta
    new_soc = np.clip(raw, 0.0, 1.0)
    clamped = raw != new_soc
    if new_soc.ndim:
        return new_soc, clamped
    return float(new_soc), bool(clamped)


@dataclass(frozen=True)
class Powertrain:
    """Parameter bundle for one vehicle build."""

    vehicle: VehicleParams
    engine: EngineMap
    battery: BatteryParams


def load_powertrain(path: str | Path | None = None) -> Powertrain:
    """Read a [vehicle]/[engine]/[battery] TOML or JSON parameter file.

    With no path, the bundled default compact-HEV parameter set is used.
    """
    if path is None:
        raw = resources.files("hevcrl.data").joinpath("default_hev.toml").read_bytes()
        doc = tomllib.loads(raw.decode())
    else:
        path = Path(path)
        text = path.read_text()
        if path.suffix == ".json":
            import json

            doc = json.loads(text)
        else:
            doc = tomllib.loads(text)
    try:
        veh = VehicleParams(**doc["vehicle"])
        eng_doc = dict(doc["engine"])
        line = np.asarray(eng_doc.pop("optimal_line"), dtype=float)
        if line.ndim != 2 or line.shape[1] != 4:
            raise ConfigError("optimal_line must be an array of (kW, r/min, N*m, g/kWh) rows")
        engine = EngineMap(
            powers=line[:, 0], speeds=line[:, 1], torques=line[:, 2],
            bsfc=line[:, 3], **eng_doc,
        )
        batt = BatteryParams(**doc["battery"])
    except KeyError as exc:
        raise ConfigError(f"missing powertrain section/field: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return Powertrain(veh, engine, batt)
