"""Command-line front end: experiment configs, runs, and CSV/JSON emission.

Commands
--------
simulate       per-round regret trace for one policy
sweep-gap      mean/std total regret across a grid of reward gaps
sweep-explore  mean/std total regret across exploration periods (etc only)
complete       offline completion of a CSV matrix plus an error report

Configuration is a flat key=value document (JSON object or ``key=value``
lines); any key can be overridden on the command line with repeatable
``--set key=value`` flags. Unknown keys are rejected. Exit codes: 0 success,
2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import env as env_mod
from . import harness, matcomp
from .streams import substream


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_grid(text: str) -> list[float]:
    values = [float(x) for x in str(text).split(",") if str(x).strip() != ""]
    return values


# key -> (parser, default, help)
CONFIG_KEYS: dict[str, tuple] = {
    "env": (str, "synthetic", "environment kind: synthetic | csv"),
    "users": (int, 100, "number of users (synthetic)"),
    "items": (int, 150, "number of items (synthetic)"),
    "gap": (float, 1.0, "item-factor range width; factors are uniform on [-gap/2, gap/2]"),
    "sigma2": (float, 0.1, "reward noise variance proxy"),
    "noise": (str, "gaussian", "noise kind: gaussian | bounded-uniform | none"),
    "csv_path": (str, "", "reward matrix CSV (env=csv and complete command)"),
    "policy": (str, "octal", "etc | octal | octal_small_m | ucb"),
    "schedule": (str, "practical", "octal schedules: practical | theory"),
    "etc_mode": (str, "fixed_exploration", "etc mode: fixed_exploration | theory"),
    "etc_m": (int, 25, "etc exploration rounds (fixed_exploration mode)"),
    "etc_f": (int, 1, "etc estimation passes (odd)"),
    "octal_f": (int, 1, "octal estimation passes per phase (odd)"),
    "octal_a": (float, 7.0, "octal labelling constant a"),
    "robust_fraction": (float, 2.0 / 3.0, "membership fraction for the item intersection"),
    "step16_additive": (_parse_bool, False, "use the (2a+1) labelling threshold variant"),
    "ucb_c": (float, 1.0, "ucb exploration coefficient"),
    "lambda": (float, -1.0, "completion regularizer; negative means policy default"),
    "const_C": (float, 1.0, "sampling-probability constant C"),
    "const_c": (float, 1.0, "repetition constant c"),
    "const_Cprime": (float, 1.0, "octal threshold constant C'"),
    "const_Clambda": (float, 1.0, "regularizer constant C_lambda"),
    "T": (int, 1000, "horizon (rounds)"),
    "seed": (int, 0, "base seed; runs use seed..seed+repetitions-1"),
    "repetitions": (int, 10, "independent runs to average"),
    "gap_grid": (_parse_grid, "0.4,0.6,0.8,1.0,1.2,1.4,1.6,1.8,2.0", "gaps for sweep-gap"),
    "explore_grid": (_parse_grid, "1,5,15,25,40,50,60,70", "exploration periods for sweep-explore"),
    "p": (float, 0.5, "sampling probability (complete command)"),
    "s": (int, 1, "repetitions per sampled cell (complete command)"),
}


def default_config() -> dict:
    out = {}
    for key, (parser, default, _) in CONFIG_KEYS.items():
        out[key] = parser(default) if isinstance(default, str) and parser is _parse_grid else default
    return out


def _coerce(key: str, raw) -> object:
    if key not in CONFIG_KEYS:
        raise ConfigError(f"unknown configuration key {key!r}")
    parser = CONFIG_KEYS[key][0]
    try:
        if parser is _parse_grid and isinstance(raw, list):
            return [float(x) for x in raw]
        if parser is _parse_bool and isinstance(raw, bool):
            return raw
        return parser(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for key {key!r}: {raw!r} ({exc})") from exc


def load_config(path: str | None, overrides: list[str]) -> dict:
    config = default_config()
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        stripped = text.lstrip()
        if stripped.startswith("{"):
            try:
                doc = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
            if not isinstance(doc, dict):
                raise ConfigError(f"config {path} must be a flat JSON object")
            items = doc.items()
        else:
            items = []
            for line_no, line in enumerate(text.splitlines(), start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{line_no}: expected key=value, got {line!r}")
                key, _, value = line.partition("=")
                items.append((key.strip(), value.strip()))
        for key, value in items:
            config[key] = _coerce(key, value)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        config[key.strip()] = _coerce(key.strip(), value.strip())
    return config


# ---------------------------------------------------------------------------
# config -> run specs
# ---------------------------------------------------------------------------


def _env_spec(config: dict) -> harness.EnvSpec:
    if config["env"] not in ("synthetic", "csv"):
        raise ConfigError(f"key 'env': expected synthetic or csv, got {config['env']!r}")
    if config["env"] == "csv" and not config["csv_path"]:
        raise ConfigError("key 'csv_path': required when env=csv")
    return harness.EnvSpec(
        kind=config["env"],
        num_users=config["users"],
        num_items=config["items"],
        gap=config["gap"],
        noise_variance=config["sigma2"],
        noise_kind=config["noise"],
        csv_path=config["csv_path"] or None,
    )


def _policy_params(config: dict, policy: str) -> dict:
    lam = config["lambda"]
    lam_value = None if lam < 0 else lam
    if policy == "etc":
        params = {
            "mode": config["etc_mode"],
            "repetitions": config["etc_f"],
            "C": config["const_C"],
            "C_lambda": config["const_Clambda"],
        }
        if config["etc_mode"] == "fixed_exploration":
            params["fixed_m"] = config["etc_m"]
            params["regularizer"] = lam_value
        return params
    if policy in ("octal", "octal_small_m"):
        params = {
            "a": config["octal_a"],
            "c": config["const_c"],
            "C": config["const_C"],
            "C_prime": config["const_Cprime"],
            "C_lambda": config["const_Clambda"],
            "repetitions": config["octal_f"],
            "delta_schedule": config["schedule"],
            "round_schedule": config["schedule"],
            "robust_fraction": config["robust_fraction"],
            "step16_additive": config["step16_additive"],
        }
        if lam_value is not None:
            params["regularizer"] = lam_value
        return params
    if policy == "ucb":
        return {"exploration_coefficient": config["ucb_c"]}
    raise ConfigError(f"key 'policy': unknown policy {policy!r}")


def _base_spec(config: dict) -> harness.RunSpec:
    return harness.RunSpec(
        env=_env_spec(config),
        policy=config["policy"],
        policy_params=_policy_params(config, config["policy"]),
        horizon=config["T"],
        seed=config["seed"],
        repetitions=config["repetitions"],
    )


# ---------------------------------------------------------------------------
# deterministic emission
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(x) if not isinstance(x, str) else x for x in row))
    path.write_text("\n".join(lines) + "\n")


def _json_ready(value):
    if isinstance(value, dict):
        return {k: _json_ready(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_ready(v) for v in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return [_json_ready(v) for v in value.tolist()]
    return value


def write_summary(path: Path, config: dict, payload: dict) -> None:
    doc = {"config": _json_ready(config), **_json_ready(payload)}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(config: dict, out_dir: Path) -> None:
    base = _base_spec(config)
    rows = []
    totals = {}
    infos = {}
    for seed in harness.seeds_for(base):
        trace = harness.run_episode(replace(base, seed=seed))
        totals[str(seed)] = trace.total
        infos[str(seed)] = trace.policy_info
        for t in range(base.horizon):
            rows.append(
                [t + 1, trace.per_round[t], trace.cumulative[t], base.policy, seed]
            )
    write_csv(
        out_dir / "simulate.csv",
        ["round", "per_round_regret", "cumulative_regret", "policy", "seed"],
        rows,
    )
    write_summary(
        out_dir / "simulate_summary.json",
        config,
        {"totals": totals, "derived": infos},
    )


def cmd_sweep_gap(config: dict, out_dir: Path) -> None:
    grid = config["gap_grid"]
    if not grid:
        raise ConfigError("key 'gap_grid': empty grid")
    base = _base_spec(config)
    result = harness.sweep("gap", grid, base)
    rows = []
    for point in result.points:
        for policy, mean in point.per_policy_mean.items():
            std = point.per_policy_std[policy]
            rows.append(
                [point.x, policy, mean, std if std is not None else "", point.num_runs]
            )
    write_csv(
        out_dir / "sweep_gap.csv",
        ["gap", "policy", "mean_regret", "std_regret", "runs"],
        rows,
    )
    write_summary(
        out_dir / "sweep_gap_summary.json",
        config,
        {
            "points": [
                {
                    "gap": p.x,
                    "mean": p.per_policy_mean,
                    "std": p.per_policy_std,
                    "runs": p.num_runs,
                }
                for p in result.points
            ]
        },
    )


def cmd_sweep_explore(config: dict, out_dir: Path) -> None:
    if config["policy"] != "etc":
        raise ConfigError("sweep-explore applies to the etc policy only")
    grid = [int(x) for x in config["explore_grid"]]
    if not grid:
        raise ConfigError("key 'explore_grid': empty grid")
    base = _base_spec(config)
    rows = []
    points = []
    for m in grid:
        params = dict(base.policy_params)
        params["fixed_m"] = m
        spec = replace(base, policy_params=params)
        result = harness.average_runs(
            [replace(spec, seed=s) for s in harness.seeds_for(spec)]
        )
        rows.append(
            [
                m,
                config["gap"],
                result.mean_total,
                result.std_total if result.std_total is not None else "",
                result.num_runs,
            ]
        )
        points.append(
            {
                "exploration_m": m,
                "gap": config["gap"],
                "mean": result.mean_total,
                "std": result.std_total,
                "runs": result.num_runs,
            }
        )
    write_csv(
        out_dir / "sweep_explore.csv",
        ["exploration_m", "gap", "mean_regret", "std_regret", "runs"],
        rows,
    )
    write_summary(out_dir / "sweep_explore_summary.json", config, {"points": points})


def cmd_complete(config: dict, out_dir: Path) -> None:
    if not config["csv_path"]:
        raise ConfigError("key 'csv_path': required for the complete command")
    model = env_mod.load_matrix_csv(
        config["csv_path"], config["sigma2"], noise_kind=config["noise"]
    )
    lam = config["lambda"]
    if lam < 0:
        s = max(1, config["s"])
        lam = matcomp.default_regularizer(
            np.sqrt(config["sigma2"]) / np.sqrt(s),
            min(model.num_users, model.num_items),
            config["p"],
            config["const_Clambda"],
        )
    rng = substream(config["seed"], "complete")
    est, log, rounds = matcomp.estimate(
        model,
        range(model.num_users),
        range(model.num_items),
        config["p"],
        config["s"],
        lam,
        rng,
    )
    rows = [[est.estimate[i, j] for j in range(model.num_items)] for i in range(model.num_users)]
    write_csv(
        out_dir / "complete_estimate.csv",
        [f"item_{j}" for j in range(model.num_items)],
        rows,
    )
    max_err = float(np.abs(est.estimate - model.expected_rewards).max())
    write_summary(
        out_dir / "complete_report.json",
        config,
        {
            "max_abs_error": max_err,
            "rounds_used": rounds,
            "nominal_rounds": config["s"] * model.num_items * config["p"],
            "regularizer": lam,
            "degenerate": est.degenerate,
            "recommendations_logged": int(log.size),
        },
    )


COMMANDS = {
    "simulate": cmd_simulate,
    "sweep-gap": cmd_sweep_gap,
    "sweep-explore": cmd_sweep_explore,
    "complete": cmd_complete,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="matbandit",
        description="Simulate completion-based bandit policies and export regret data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat JSON or key=value config file")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override one config key (repeatable)",
        )
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, help="override the base seed")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args.set)
        if args.seed is not None:
            config["seed"] = args.seed
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](config, out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 3
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
