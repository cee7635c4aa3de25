"""Run configuration: one document describing a whole training run.

Configs are TOML or JSON (same schema, chosen by file extension) with
the committed packaged default as the base; user files only need the
keys they override.  The same document also describes the instance the
oracle and evaluation commands operate on.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - Python < 3.11
    import tomli as tomllib

from .cycles import DriveCycle, load_cycle, nedc_cycle, trapezoid_cycle
from .cvpo import CvpoConfig
from .env import HevEnv, SocCorridor
from .errors import ConfigError
from .lagrangian import PidConfig
from .powertrain import Powertrain, load_powertrain

ALGORITHMS = ("pid_lagrangian", "cvpo")


@dataclass
class RunConfig:
    """Everything a run needs: instance, schedule, and trainer knobs.

    `cycle` is either a builtin name ("trapezoid", "nedc") or a path to
    a drive-cycle CSV; `powertrain` is a parameter file path or None for
    the packaged default.  `steps_per_epoch`, when set, chooses how many
    rollout episodes each epoch collects (rounded to whole episodes);
    otherwise one episode per environment is collected.
    """

    algorithm: str = "pid_lagrangian"
    seed: int = 16
    epochs: int = 150
    steps_per_epoch: int | None = None
    num_envs: int = 4
    gamma: float = 0.995
    eps_T: float = 0.2
    cycle: str = "trapezoid"
    powertrain: str | None = None
    out_dir: str = "runs/latest"
    corridor: dict = field(default_factory=lambda: {
        "H": 0.55, "L": 0.45, "B": 0.5, "bl": 40, "br": 160})
    pid: dict = field(default_factory=dict)
    cvpo: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(
                f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}"
            )
        if self.epochs < 1 or self.num_envs < 1:
            raise ConfigError("epochs and num_envs must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must be in (0, 1]")


def load_config(path: str | Path | None = None) -> RunConfig:
    """Packaged defaults, overlaid with the given TOML/JSON document."""
    doc = _load_document(
        resources.files("hevcrl.data").joinpath("default.toml").read_text(),
        "toml")
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        kind = "json" if path.suffix.lower() == ".json" else "toml"
        user = _load_document(path.read_text(), kind)
        for key, value in user.items():
            if isinstance(value, dict) and isinstance(doc.get(key), dict):
                doc[key].update(value)
            else:
                doc[key] = value
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**doc)


def _load_document(text: str, kind: str) -> dict:
    try:
        if kind == "json":
            return json.loads(text)
        return tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"malformed config: {exc}") from exc


def dump_config(config: RunConfig) -> dict:
    return asdict(config)


# --- instance construction -------------------------------------------------


def build_cycle(config: RunConfig) -> DriveCycle:
    if config.cycle == "trapezoid":
        return trapezoid_cycle()
    if config.cycle == "nedc":
        return nedc_cycle()
    path = Path(config.cycle)
    if not path.exists():
        raise ConfigError(f"cycle file not found: {path}")
    with open(path) as fh:
        return load_cycle(fh)


def build_powertrain(config: RunConfig) -> Powertrain:
    return load_powertrain(config.powertrain)


def build_corridor(config: RunConfig, cycle: DriveCycle) -> SocCorridor:
    spec = dict(config.corridor)
    spec.setdefault("Ts", cycle.num_steps)
    try:
        return SocCorridor(**spec)
    except TypeError as exc:
        raise ConfigError(f"bad corridor spec: {exc}") from exc


def build_env_factory(config: RunConfig):
    """(env factory, cycle, powertrain, corridor) for this instance."""
    cycle = build_cycle(config)
    powertrain = build_powertrain(config)
    corridor = build_corridor(config, cycle)

    def factory() -> HevEnv:
        return HevEnv(cycle, powertrain, corridor)

    return factory, cycle, powertrain, corridor


def _episodes_per_epoch(config: RunConfig, horizon: int) -> int:
    if config.steps_per_epoch is None:
        return config.num_envs
    return max(1, round(config.steps_per_epoch / horizon))


def trainer_config(config: RunConfig, horizon: int) -> PidConfig | CvpoConfig:
    """The per-algorithm trainer configuration for this run."""
    shared = {
        "epochs": config.epochs,
        "num_envs": _episodes_per_epoch(config, horizon),
        "gamma": config.gamma,
        "eps_T": config.eps_T,
    }
    section = config.pid if config.algorithm == "pid_lagrangian" else config.cvpo
    cls = PidConfig if config.algorithm == "pid_lagrangian" else CvpoConfig
    merged = {**shared, **section}
    known = set(cls.__dataclass_fields__)
    unknown = set(merged) - known
    if unknown:
        raise ConfigError(f"unknown trainer keys: {sorted(unknown)}")
    if "hidden" in merged:
        merged["hidden"] = tuple(merged["hidden"])
    return cls(**merged)
