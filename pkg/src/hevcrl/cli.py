"""Command-line entry point: train / eval / oracle / plot.

Exit codes: 0 on success, 2 for configuration errors (bad config file,
bad flags), 3 for runtime failures (infeasible instance, missing
checkpoint, training blow-up).  Failures emit one JSON object on stderr
with "error" (exception class) and "message" fields.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import cvpo as cvpo_mod
from . import lagrangian as pid_mod
from .config import RunConfig, build_env_factory, load_config, trainer_config
from .cycles import cycle_stats
from .dp_oracle import DpGrid, dp_solve
from .env import write_episode_log
from .errors import ConfigError, HevCrlError
from .lagrangian import run_episode
from .nets import GaussianPolicy, load_checkpoint

SEED_ENV_VAR = "COFC_SEED"

SUMMARY_COLUMNS = ("reward", "fuel_g", "l_per_100km", "episode_cost",
                   "final_soc")


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        _emit_error(exc)
        return 2
    except (HevCrlError, OSError) as exc:
        _emit_error(exc)
        return 3


def _emit_error(exc: Exception) -> None:
    json.dump({"error": type(exc).__name__, "message": str(exc)},
              sys.stderr)
    sys.stderr.write("\n")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hevcrl",
        description="Constrained-RL workbench for minimum-fuel HEV energy "
                    "management under an SOC balance corridor.")
    sub = parser.add_subparsers(required=True)

    train = sub.add_parser("train", help="run a training job")
    _add_config_args(train)
    train.add_argument("--algo", choices=("pid_lagrangian", "cvpo"),
                       help="override the configured algorithm")
    train.add_argument("--epochs", type=int, help="override epoch count")
    train.set_defaults(handler=cmd_train)

    ev = sub.add_parser("eval", help="replay a checkpoint for one episode")
    _add_config_args(ev)
    ev.add_argument("--checkpoint", required=True,
                    help="path to a best.json training checkpoint")
    ev.set_defaults(handler=cmd_eval)

    oracle = sub.add_parser(
        "oracle", help="solve the instance to optimality by dynamic "
                       "programming")
    _add_config_args(oracle)
    oracle.add_argument("--soc-levels", type=int, default=201)
    oracle.add_argument("--action-levels", type=int, default=21)
    oracle.add_argument("--terminal-tol", type=float, default=None,
                        help="terminal SOC tolerance (default: half a grid "
                             "cell)")
    oracle.set_defaults(handler=cmd_oracle)

    plot = sub.add_parser("plot", help="render run CSVs to SVG figures")
    plot.add_argument("--trace", help="trace.csv from a training run")
    plot.add_argument("--episode", help="episode.csv from an evaluation")
    plot.add_argument("--out", default=".", help="output directory")
    plot.set_defaults(handler=cmd_plot)
    return parser


def _add_config_args(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="TOML or JSON run configuration "
                                      "(default: packaged defaults)")
    sub.add_argument("--seed", type=int,
                     help=f"override config seed (also via ${SEED_ENV_VAR})")
    sub.add_argument("--out", help="override the configured output directory")


def _resolve(args) -> RunConfig:
    config = load_config(args.config)
    if getattr(args, "algo", None) is not None:
        config.algorithm = args.algo
    if getattr(args, "epochs", None) is not None:
        if args.epochs < 1:
            raise ConfigError("epochs must be positive")
        config.epochs = args.epochs
    if args.out is not None:
        config.out_dir = args.out
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            config.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(
                f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}"
            ) from exc
    if args.seed is not None:  # explicit flag beats the environment
        config.seed = args.seed
    return config


def _episode_summary(env, transitions) -> dict:
    """Undiscounted per-episode tallies in the result-table schema."""
    distance_km, _, _ = cycle_stats(env.cycle)
    fuel = -sum(tr.r for tr in transitions)
    return {
        "reward": float(sum(tr.r for tr in transitions)),
        "fuel_g": float(fuel),
        "l_per_100km": float(fuel / 720.0 / distance_km * 100.0),
        "episode_cost": float(sum(tr.c for tr in transitions)),
        "final_soc": float(transitions[-1].s_next.soc),
    }


def cmd_train(args) -> int:
    config = _resolve(args)
    factory, _, _, corridor = build_env_factory(config)
    tcfg = trainer_config(config, corridor.Ts)
    trainer = pid_mod if config.algorithm == "pid_lagrangian" else cvpo_mod
    out = Path(config.out_dir)
    result = trainer.train(tcfg, factory, seed=config.seed, out_dir=out)
    if result.best_state is None:
        raise HevCrlError("training produced no evaluable policy")

    env = factory()
    policy = GaussianPolicy.from_state(result.best_state["policy"])
    transitions = run_episode(env, policy)
    summary = {
        "algorithm": config.algorithm,
        "seed": config.seed,
        "epochs": len(result.trace),
        "feasible": result.best_feasible,
        "discounted_cost_limit": result.eps1,
        "discounted_cost": result.best_returns.J_c,
        **_episode_summary(env, transitions),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    with open(out / "episode.csv", "w", newline="") as fh:
        write_episode_log(env.episode_log, fh)
    json.dump(summary, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def cmd_eval(args) -> int:
    config = _resolve(args)
    factory, _, _, _ = build_env_factory(config)
    doc = load_checkpoint(args.checkpoint)
    policy = GaussianPolicy.from_state(doc["policy"])
    env = factory()
    transitions = run_episode(env, policy)
    summary = _episode_summary(env, transitions)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "episode.csv", "w", newline="") as fh:
        write_episode_log(env.episode_log, fh)
    (out / "eval_summary.json").write_text(
        json.dumps(summary, indent=2) + "\n")
    json.dump(summary, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def cmd_oracle(args) -> int:
    config = _resolve(args)
    factory, cycle, powertrain, corridor = build_env_factory(config)
    grid = DpGrid(cycle, corridor, powertrain,
                  soc_levels=args.soc_levels,
                  action_levels=args.action_levels,
                  terminal_tol=args.terminal_tol)
    solution = dp_solve(grid)

    # replay the greedy action sequence in the simulator for the
    # result-table quantities
    env = factory()
    env.reset()
    transitions = [env.step(float(p)) for p in solution.actions_kw]
    summary = {
        "min_fuel_g": solution.min_fuel,
        "feasible": solution.feasible,
        "soc_levels": args.soc_levels,
        "action_levels": args.action_levels,
        **_episode_summary(env, transitions),
    }
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "oracle.json").write_text(json.dumps(summary, indent=2) + "\n")
    with open(out / "oracle_soc.csv", "w", newline="") as fh:
        fh.write("t,soc,action_kw\n")
        actions = np.append(solution.actions_kw, np.nan)
        for t, (soc, act) in enumerate(zip(solution.soc_trajectory, actions)):
            act_cell = "" if np.isnan(act) else repr(float(act))
            fh.write(f"{t},{float(soc)!r},{act_cell}\n")
    json.dump(summary, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def cmd_plot(args) -> int:
    if args.trace is None and args.episode is None:
        raise ConfigError("plot needs --trace and/or --episode")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.trace is not None:
        written.append(_plot_trace(Path(args.trace), out, plt))
    if args.episode is not None:
        written.append(_plot_episode(Path(args.episode), out, plt))
    json.dump({"written": [str(p) for p in written]}, sys.stdout)
    sys.stdout.write("\n")
    return 0


def _read_csv(path: Path) -> dict[str, np.ndarray]:
    if not path.exists():
        raise ConfigError(f"file not found: {path}")
    rows = np.genfromtxt(path, delimiter=",", names=True)
    if rows.shape == ():
        rows = rows.reshape(1)
    return {name: np.asarray(rows[name], dtype=float)
            for name in rows.dtype.names}


def _plot_trace(path: Path, out: Path, plt) -> Path:
    cols = _read_csv(path)
    fig, (ax_r, ax_c) = plt.subplots(2, 1, sharex=True, figsize=(7, 6))
    ax_r.plot(cols["epoch"], cols["mean_Jr"], label="discounted reward")
    ax_r2 = ax_r.twinx()
    ax_r2.plot(cols["epoch"], cols["fuel_g"], color="tab:orange",
               label="fuel (g)")
    ax_r.set_ylabel("discounted reward")
    ax_r2.set_ylabel("fuel (g)")
    ax_r.legend(loc="lower left")
    ax_r2.legend(loc="lower right")

    ax_c.plot(cols["epoch"], cols["mean_Jc"], label="discounted cost")
    dual_col = "lambda_cvpo" if "lambda_cvpo" in cols else "lambda"
    ax_c2 = ax_c.twinx()
    ax_c2.plot(cols["epoch"], cols[dual_col], color="tab:red",
               label=dual_col)
    ax_c.set_xlabel("epoch")
    ax_c.set_ylabel("discounted cost")
    ax_c2.set_ylabel("multiplier")
    ax_c.legend(loc="upper left")
    ax_c2.legend(loc="upper right")
    fig.tight_layout()
    target = out / (path.stem + ".svg")
    fig.savefig(target)
    plt.close(fig)
    return target


def _plot_episode(path: Path, out: Path, plt) -> Path:
    cols = _read_csv(path)
    fig, (ax_s, ax_p) = plt.subplots(2, 1, sharex=True, figsize=(7, 6))
    ax_s.plot(cols["t"], cols["soc"], label="SOC")
    ax_s.plot(cols["t"], cols["upper"], "k--", linewidth=0.8, label="corridor")
    ax_s.plot(cols["t"], cols["lower"], "k--", linewidth=0.8)
    ax_s.set_ylabel("SOC")
    ax_s.legend(loc="best")

    ax_p.plot(cols["t"], cols["P_dem"], label="demand (kW)")
    ax_p.plot(cols["t"], cols["P_eng"], label="engine (kW)")
    ax_p.plot(cols["t"], cols["P_batt"], label="battery (kW)")
    ax_p.set_xlabel("t (s)")
    ax_p.set_ylabel("power (kW)")
    ax_p.legend(loc="best")
    fig.tight_layout()
    target = out / (path.stem + ".svg")
    fig.savefig(target)
    plt.close(fig)
    return target


if __name__ == "__main__":
    sys.exit(main())
