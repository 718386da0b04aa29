"""Experiment runner: TOML configs, seeded grids, CSV results and summaries.

A run expands ``grid x seeds`` into cells.  Each cell runs every configured
method and writes its rows atomically to ``cells/``; after all cells finish,
``runs.csv``, ``summary.csv`` and ``manifest.json`` are assembled from the
cell files.  ``CFLAB_OUTPUT_ROOT`` overrides the directory that relative
output paths are resolved against.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import itertools
import json
import math
import os
import platform
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy
from scipy import stats

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__, bandit, rlloop, safeltr
from .errors import CflabError, ConfigError

FAMILIES = ("safeltr_sweep", "prpo_robustness", "opl_bandit", "ope_bandit", "rl_chain")
OUTPUT_ROOT_ENV = "CFLAB_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 2, 3

GRID_KEYS = {
    "safeltr_sweep": ("N",),
    "prpo_robustness": ("N",),
    "opl_bandit": ("N",),
    "ope_bandit": ("n_actions", "inv_temp", "N"),
    "rl_chain": ("epochs",),
}
METRICS = {
    "safeltr_sweep": ("ndcg_test", "ndcg_delta"),
    "prpo_robustness": ("ndcg_test", "ndcg_delta"),
    "opl_bandit": ("final_value", "grad_variance"),
    "ope_bandit": ("sq_error", "estimate"),
    "rl_chain": ("final_reward", "last_reward_variance"),
}
PARAMETRIC = {"banditnet", "rloo", "loop"}
SAFELTR_DEFAULTS = {
    "safeltr_sweep": {},
    "prpo_robustness": {
        "click_model": "adversarial",
        "prpo_schedule": "constant",
        "prpo_parameter": 1.0,
        "safe_dr_delta": 0.01,
    },
}


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class ExperimentConfig:
    family: str
    methods: tuple
    grid: dict
    seeds: tuple
    output: str = "results"
    environment: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)
    ci_level: float = 0.8

    def canonical(self) -> dict:
        return {
            "family": self.family,
            "methods": list(self.methods),
            "grid": {k: list(v) for k, v in self.grid.items()},
            "seeds": list(self.seeds),
            "output": self.output,
            "environment": dict(sorted(self.environment.items())),
            "settings": dict(sorted(self.settings.items())),
            "ci_level": self.ci_level,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def parse_method(label: str):
    """``"loop:4"`` -> ``("loop", 4.0)``; plain names have parameter ``None``."""
    name, _, param = str(label).partition(":")
    if not param:
        return name, None
    try:
        return name, float(param)
    except ValueError:
        raise ConfigError(f"method {label!r}: parameter must be numeric") from None


def _known_methods(family):
    if family in ("safeltr_sweep", "prpo_robustness"):
        return set(safeltr.SWEEP_METHODS)
    if family == "opl_bandit":
        return set(bandit.OPL_METHODS)
    if family == "ope_bandit":
        return set(bandit.OPE_ESTIMATORS)
    return set(rlloop.RL_METHODS)


def validate_config(raw: dict) -> ExperimentConfig:
    """Check a parsed TOML document and build an :class:`ExperimentConfig`."""
    family = raw.get("family")
    if family not in FAMILIES:
        raise ConfigError(f"family must be one of {', '.join(FAMILIES)}; got {family!r}")
    methods = raw.get("methods")
    if not isinstance(methods, list) or not methods:
        raise ConfigError("methods must be a non-empty list")
    known = _known_methods(family)
    for label in methods:
        name, param = parse_method(label)
        if name not in known:
            raise ConfigError(f"unknown method {label!r} for family {family}")
        if param is not None and name not in PARAMETRIC:
            raise ConfigError(f"method {name!r} takes no parameter")
        if name in ("rloo", "loop") and param is not None and (param < 2 or param != int(param)):
            raise ConfigError(f"method {label!r}: K must be an integer >= 2")
    if len(set(methods)) != len(methods):
        raise ConfigError("methods must be distinct")
    seeds = raw.get("seeds")
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")
    grid = raw.get("grid", {})
    if not isinstance(grid, dict):
        raise ConfigError("grid must be a table")
    expected = GRID_KEYS[family]
    unknown = set(grid) - set(expected)
    if unknown:
        raise ConfigError(f"unknown grid keys {sorted(unknown)} for family {family}")
    for key in expected:
        values = grid.get(key)
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid.{key} must be a non-empty list")
        if key in ("N", "n_actions", "epochs") and not all(isinstance(v, int) and v > 0 for v in values):
            raise ConfigError(f"grid.{key} must hold positive integers")
    ci = float(raw.get("ci_level", 0.8))
    if not 0 < ci < 1:
        raise ConfigError("ci_level must lie in (0, 1)")
    env = raw.get("environment", {})
    settings = raw.get("settings", {})
    if not isinstance(env, dict) or not isinstance(settings, dict):
        raise ConfigError("environment and settings must be tables")
    extra = set(raw) - {"family", "methods", "seeds", "grid", "output", "environment", "settings", "ci_level"}
    if extra:
        raise ConfigError(f"unknown top-level keys {sorted(extra)}")
    cfg = ExperimentConfig(
        family, tuple(methods), {k: tuple(grid[k]) for k in expected}, tuple(seeds),
        str(raw.get("output", "results")), dict(env), dict(settings), ci,
    )
    _family_objects(cfg)  # surfaces bad environment/settings keys before any run
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    return validate_config(raw)


def _build(cls, values, what):
    names = {f.name for f in fields(cls)}
    bad = set(values) - names
    if bad:
        raise ConfigError(f"unknown {what} keys {sorted(bad)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"invalid {what}: {exc}") from exc


def _family_objects(cfg: ExperimentConfig):
    """Typed settings for a family; raises ConfigError on unknown keys."""
    if cfg.family in ("safeltr_sweep", "prpo_robustness"):
        values = {**SAFELTR_DEFAULTS[cfg.family], **cfg.environment}
        settings = dict(cfg.settings)
        train = _build(safeltr.TrainConfig, settings.pop("training", {}), "training")
        values.update(settings)
        return _build(safeltr.SafeLtrSetup, {**values, "train": train}, "safe-LTR")
    if cfg.family == "opl_bandit":
        env = _check_keys(cfg.environment, {"n_actions", "context_dim", "n_contexts", "inv_temp", "reward_scale"}, "environment")
        st = _check_keys(cfg.settings, {"epochs", "batch_size", "learning_rate", "beta_window"}, "settings")
        return env, st
    if cfg.family == "ope_bandit":
        env = _check_keys(cfg.environment, {"context_dim", "n_contexts", "reward_scale", "env_seed"}, "environment")
        st = _check_keys(cfg.settings, {"repetition_offset", "target_n", "target_epochs", "ridge"}, "settings")
        return env, st
    env = _check_keys(cfg.environment, {"horizon", "state_dim", "context_dim", "n_prompts", "sigma", "reward_width", "env_seed"}, "environment")
    st = _check_keys(cfg.settings, {"inner_epochs", "prompts_per_epoch", "learning_rate", "eps", "step_std", "eval_samples"}, "settings")
    return env, st


def _check_keys(values, allowed, what):
    bad = set(values) - allowed
    if bad:
        raise ConfigError(f"unknown {what} keys {sorted(bad)}")
    return dict(values)


# ---------------------------------------------------------------------------
# cells

def _cell_id(point: dict, seed: int) -> str:
    parts = [f"{k}={point[k]}" for k in sorted(point)] + [f"seed={seed}"]
    return "__".join(parts)


def _run_cell(cfg: ExperimentConfig, point: dict, seed: int):
    """All methods at one grid point and seed; returns ``(rows, traces)``."""
    fam = cfg.family
    obj = _family_objects(cfg)
    rows, traces = [], {}
    if fam in ("safeltr_sweep", "prpo_robustness"):
        setup = obj
        world = safeltr.make_world(setup, seed)
        for label in cfg.methods:
            res = safeltr.run_safeltr(setup, world, label, point["N"], seed)
            rows.append({"method": label, **point, "seed": seed, "ndcg_test": res.ndcg_test,
                         "ndcg_logging": res.ndcg_logging, "ndcg_delta": res.ndcg_test - res.ndcg_logging,
                         "best_epoch": res.best_epoch})
            traces[label] = (safeltr.TRACE_COLUMNS, res.trace)
    elif fam == "opl_bandit":
        env_kw, st = obj
        env = bandit.BanditEnvironment.synthetic(seed=seed, **env_kw)
        log = env.sample_log(point["N"], np.random.default_rng([seed, 1]))
        for label in cfg.methods:
            name, param = parse_method(label)
            batch = st.get("batch_size", 1024)
            if name in ("snips", "beta_ips_value"):
                batch = None
            res = bandit.train_opl(env, log, name, batch_size=batch, epochs=st.get("epochs", 20),
                                   learning_rate=st.get("learning_rate", 0.01), lam=param or 0.0,
                                   beta_window=st.get("beta_window") if name == "beta_ips_gradient" else None, seed=seed)
            rows.append({"method": label, **point, "seed": seed, "final_value": res.final_value,
                         "grad_variance": res.mean_gradient_variance})
            traces[label] = (["epoch", "true_value", "grad_variance", "beta"], res.trace)
    elif fam == "ope_bandit":
        env_kw, st = obj
        env_seed = env_kw.pop("env_seed", 0)
        env = bandit.BanditEnvironment.synthetic(n_actions=point["n_actions"], seed=env_seed, **env_kw)
        target = bandit.train_target_policy(env, st.get("target_n", 10_000), st.get("target_epochs", 10), env_seed)
        truth = bandit.evaluate_true_value(target, env)
        env_t = env.with_inverse_temperature(point["inv_temp"])
        rng = np.random.default_rng([seed + st.get("repetition_offset", 0), point["n_actions"], int(point["N"])])
        log = env_t.sample_log(point["N"], rng, aggregate=True)
        est = bandit.ope_estimates(log, target, st.get("ridge", 1.0))
        for label in cfg.methods:
            rows.append({"method": label, **point, "seed": seed, "estimate": est[label], "truth": truth,
                         "sq_error": (est[label] - truth) ** 2})
    else:
        env_kw, st = obj
        env_seed = env_kw.pop("env_seed", 0)
        mdp = rlloop.ChainMdp.synthetic(seed=env_seed, **env_kw)
        for label in cfg.methods:
            name, param = parse_method(label)
            K = int(param) if param else (4 if name in ("rloo", "loop") else 1)
            inner = 1 if name in rlloop.ON_POLICY else st.get("inner_epochs", 4)
            res = rlloop.train_rl(mdp, name, epochs=point["epochs"], inner_epochs=inner, K=K,
                                  prompts_per_epoch=st.get("prompts_per_epoch", 16),
                                  learning_rate=st.get("learning_rate", 0.01), eps=st.get("eps", 0.2),
                                  step_std=st.get("step_std", 0.3), seed=seed, eval_samples=st.get("eval_samples", 256))
            rows.append({"method": label, **point, "seed": seed, "final_reward": res.final_reward,
                         "last_reward_variance": res.trace[-1]["reward_variance"]})
            traces[label] = (rlloop.TRACE_COLUMNS, res.trace)
    return rows, traces


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row.get(k)) for k in columns})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _cell_job(cfg: ExperimentConfig, point: dict, seed: int, out_dir: str):
    """Worker entry point; never raises, so one failing cell cannot stop the others."""
    cid = _cell_id(point, seed)
    try:
        rows, traces = _run_cell(cfg, point, seed)
    except Exception as exc:  # recorded in the manifest
        return cid, None, f"{type(exc).__name__}: {exc}"
    out = Path(out_dir)
    for label, (columns, trace) in traces.items():
        safe = label.replace(":", "-")
        _atomic_write(out / "traces" / f"{safe}__{cid}.csv", _csv_text(columns, trace))
    columns = list(rows[0].keys()) if rows else ["method"]
    _atomic_write(out / "cells" / f"{cid}.csv", _csv_text(columns, rows))
    return cid, rows, None


# ---------------------------------------------------------------------------
# summaries

@dataclass
class RunSummary:
    group_keys: tuple
    rows: list

    def to_csv(self) -> str:
        columns = list(self.group_keys) + ["metric", "mean", "std", "ci_low", "ci_high", "n_runs", "degenerate"]
        return _csv_text(columns, self.rows)


def t_interval(values, level=0.8):
    """Mean, sample std and two-sided Student-t interval of ``values``.

    With one value the interval collapses to the point and is flagged.
    """
    x = np.asarray(values, float)
    n = x.size
    if n == 0:
        raise ConfigError("cannot summarize zero runs")
    mean = float(x.mean())
    if n == 1:
        return mean, 0.0, mean, mean, True
    sd = float(x.std(ddof=1))
    half = float(stats.t.ppf(0.5 + level / 2.0, n - 1)) * sd / math.sqrt(n)
    return mean, sd, mean - half, mean + half, False


def summarize(rows, ci_level=0.8, group_keys=None, metrics=None) -> RunSummary:
    """Aggregate per-run rows into one summary row per (group, metric)."""
    if not rows:
        raise ConfigError("no runs to summarize")
    if group_keys is None:
        group_keys = tuple(k for k in rows[0] if k not in ("seed",) and not _is_number(rows[0][k]) or k in ("N", "n_actions", "inv_temp", "epochs"))
    if metrics is None:
        metrics = tuple(k for k in rows[0] if k not in group_keys and k != "seed" and _is_number(rows[0][k]))
    groups = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in group_keys), []).append(row)
    out = []
    for key in sorted(groups, key=lambda k: tuple(_sort_key(v) for v in k)):
        members = groups[key]
        for metric in metrics:
            mean, sd, lo, hi, degenerate = t_interval([float(r[metric]) for r in members], ci_level)
            out.append({**dict(zip(group_keys, key)), "metric": metric, "mean": mean, "std": sd,
                        "ci_low": lo, "ci_high": hi, "n_runs": len(members), "degenerate": int(degenerate)})
    return RunSummary(tuple(group_keys), out)


def _is_number(v):
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return True
    try:
        float(v)
        return True
    except (TypeError, ValueError):
        return False


def _sort_key(v):
    try:
        return (0, float(v), "")
    except (TypeError, ValueError):
        return (1, 0.0, str(v))


def read_runs(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def summarize_dir(directory, ci_level=0.8) -> RunSummary:
    """Summarize ``runs.csv`` in a result directory, using its manifest for the layout."""
    directory = Path(directory)
    runs_path = directory / "runs.csv"
    if not runs_path.exists():
        raise ConfigError(f"{runs_path} not found")
    rows = read_runs(runs_path)
    manifest_path = directory / "manifest.json"
    group_keys = metrics = None
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        group_keys = ("method",) + tuple(GRID_KEYS[manifest["family"]])
        metrics = METRICS[manifest["family"]]
    return summarize(rows, ci_level, group_keys, metrics)


# ---------------------------------------------------------------------------
# orchestration

def output_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output)
    if out.is_absolute():
        return out
    return Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / out


def grid_points(cfg: ExperimentConfig):
    keys = GRID_KEYS[cfg.family]
    for values in itertools.product(*(cfg.grid[k] for k in keys)):
        yield dict(zip(keys, values))


def run(cfg: ExperimentConfig, workers: int = 1, seed_offset: int = 0):
    """Execute every (grid point, seed) cell and write all artifacts.

    Returns ``(summary, manifest)``; ``manifest["failed_cells"]`` lists
    cells that raised, whose siblings are still written.
    """
    if seed_offset:
        cfg = replace(cfg, seeds=tuple(s + seed_offset for s in cfg.seeds))
    out = output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(point, seed) for point in grid_points(cfg) for seed in cfg.seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cell_job, *zip(*[(cfg, p, s, str(out)) for p, s in jobs])))
    else:
        results = [_cell_job(cfg, p, s, str(out)) for p, s in jobs]
    rows, failed = [], []
    for cid, cell_rows, error in results:
        if error is None:
            rows.extend(cell_rows)
        else:
            failed.append({"cell": cid, "error": error})
    order = {m: i for i, m in enumerate(cfg.methods)}
    keys = GRID_KEYS[cfg.family]
    rows.sort(key=lambda r: (order[r["method"]],) + tuple(_sort_key(r[k]) for k in keys) + (r["seed"],))
    summary = None
    if rows:
        columns = list(rows[0].keys())
        _atomic_write(out / "runs.csv", _csv_text(columns, rows))
        summary = summarize(rows, cfg.ci_level, ("method",) + keys, METRICS[cfg.family])
        _atomic_write(out / "summary.csv", summary.to_csv())
    manifest = {
        "family": cfg.family,
        "config_hash": cfg.config_hash(),
        "config": cfg.canonical(),
        "seeds": list(cfg.seeds),
        "n_cells": len(jobs),
        "n_runs": len(rows),
        "failed_cells": failed,
        "versions": {
            "cflab": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return summary, manifest


# ---------------------------------------------------------------------------
# command line

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cflab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--workers", type=int, default=1)
    p_run.add_argument("--seed-offset", type=int, default=0)
    p_sum = sub.add_parser("summarize", help="summarize runs.csv of a result directory")
    p_sum.add_argument("--dir", required=True)
    p_sum.add_argument("--ci", type=float, default=0.8)
    p_val = sub.add_parser("validate", help="check a config without running it")
    p_val.add_argument("--config", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            cfg = load_config(args.config)
            print(f"ok: {cfg.family}, {len(cfg.methods)} methods, {len(list(grid_points(cfg)))} grid points, {len(cfg.seeds)} seeds")
            return EXIT_OK
        if args.command == "summarize":
            if not 0 < args.ci < 1:
                raise ConfigError("--ci must lie in (0, 1)")
            summary = summarize_dir(args.dir, args.ci)
            text = summary.to_csv()
            _atomic_write(Path(args.dir) / "summary.csv", text)
            sys.stdout.write(text)
            return EXIT_OK
        if args.workers < 1:
            raise ConfigError("--workers must be positive")
        cfg = load_config(args.config)
        summary, manifest = run(cfg, args.workers, args.seed_offset)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CflabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    if summary is not None:
        sys.stdout.write(summary.to_csv())
    for failure in manifest["failed_cells"]:
        print(f"failed cell {failure['cell']}: {failure['error']}", file=sys.stderr)
    return EXIT_PARTIAL if manifest["failed_cells"] else EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
