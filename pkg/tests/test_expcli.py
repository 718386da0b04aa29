import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest

from cflab import expcli
from cflab.errors import ConfigError
from cflab.expcli import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_PARTIAL,
    load_config,
    main,
    parse_method,
    summarize,
    t_interval,
    validate_config,
)

OPE_TOML = """
family = "ope_bandit"
methods = ["ips", "beta_ips"]
seeds = [0, 1, 2]
output = "{out}"

[grid]
n_actions = [4]
inv_temp = [1.0]
N = [100, 400]

[environment]
context_dim = 3
n_contexts = 20

[settings]
target_n = 500
target_epochs = 2
"""

RL_TOML = """
family = "rl_chain"
methods = ["ppo", "loop:2"]
seeds = [0, 1]
output = "{out}"

[grid]
epochs = [3]

[environment]
horizon = 2
n_prompts = 4

[settings]
prompts_per_epoch = 2
eval_samples = 8
"""


def write_config(tmp_path, template, out, name="cfg.toml", **replace):
    text = template.format(out=out)
    for old, new in replace.items():
        text = text.replace(old, new)
    path = tmp_path / name
    path.write_text(text)
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestConfig:
    def test_parse_method(self):
        assert parse_method("loop:4") == ("loop", 4.0)
        assert parse_method("ips") == ("ips", None)
        with pytest.raises(ConfigError):
            parse_method("loop:four")

    def test_shipped_configs_validate(self, capsys):
        configs = sorted((Path(__file__).parent.parent / "configs").glob("*.toml"))
        assert {c.stem for c in configs} == set(expcli.FAMILIES)
        for path in configs:
            assert main(["validate", "--config", str(path)]) == EXIT_OK
        assert capsys.readouterr().out.count("ok:") == len(configs)

    @pytest.mark.parametrize("patch", [
        {"family": "bogus"},
        {"methods": ["foo"]},
        {"methods": []},
        {"methods": ["ips:2"]},
        {"seeds": []},
        {"seeds": [1, 1]},
        {"grid": {"n_actions": [4], "inv_temp": [1.0]}},
        {"grid": {"n_actions": [4], "inv_temp": [1.0], "N": [100], "K": [2]}},
        {"environment": {"colour": 1}},
        {"ci_level": 1.5},
        {"extra": 1},
    ])
    def test_rejects_invalid(self, patch):
        raw = {"family": "ope_bandit", "methods": ["ips"], "seeds": [0],
               "grid": {"n_actions": [4], "inv_temp": [1.0], "N": [100]}}
        raw.update(patch)
        with pytest.raises(ConfigError):
            validate_config(raw)

    def test_loop_k_must_be_integer(self):
        raw = {"family": "rl_chain", "methods": ["loop:1.5"], "seeds": [0], "grid": {"epochs": [1]}}
        with pytest.raises(ConfigError):
            validate_config(raw)

    def test_hash_is_stable(self, tmp_path):
        a = load_config(write_config(tmp_path, OPE_TOML, "x", "a.toml"))
        b = load_config(write_config(tmp_path, OPE_TOML, "x", "b.toml"))
        c = load_config(write_config(tmp_path, OPE_TOML, "x", "c.toml", **{"seeds = [0, 1, 2]": "seeds = [0, 1]"}))
        assert a.config_hash() == b.config_hash() != c.config_hash()


class TestRun:
    def test_counts(self, tmp_path):
        out = tmp_path / "res"
        assert main(["run", "--config", str(write_config(tmp_path, OPE_TOML, out))]) == EXIT_OK
        runs = read_csv(out / "runs.csv")
        summary = read_csv(out / "summary.csv")
        assert len(runs) == 2 * 2 * 3
        for metric in expcli.METRICS["ope_bandit"]:
            rows = [r for r in summary if r["metric"] == metric]
            assert len(rows) == 4
            assert all(int(r["n_runs"]) == 3 for r in rows)
            assert all(float(r["ci_low"]) <= float(r["mean"]) <= float(r["ci_high"]) for r in rows)
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seeds"] == [0, 1, 2]
        assert manifest["failed_cells"] == []
        assert len(manifest["config_hash"]) == 64
        assert set(manifest["versions"]) >= {"cflab", "numpy", "python"}

    def test_rerun_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["run", "--config", str(write_config(tmp_path, OPE_TOML, a, "a.toml"))])
        main(["run", "--config", str(write_config(tmp_path, OPE_TOML, b, "b.toml"))])
        for name in ("runs.csv", "summary.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_workers_match_sequential(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["run", "--config", str(write_config(tmp_path, RL_TOML, a, "a.toml"))])
        main(["run", "--config", str(write_config(tmp_path, RL_TOML, b, "b.toml")), "--workers", "2"])
        assert tree_bytes(a / "cells") == tree_bytes(b / "cells")
        assert tree_bytes(a / "traces") == tree_bytes(b / "traces")
        assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()

    def test_unknown_method_writes_nothing(self, tmp_path):
        out = tmp_path / "res"
        path = write_config(tmp_path, OPE_TOML, out, **{'"beta_ips"]': '"foo"]'})
        assert main(["run", "--config", str(path)]) == EXIT_CONFIG
        assert not out.exists()

    def test_missing_config_file(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "none.toml")]) == EXIT_CONFIG

    def test_partial_failure(self, tmp_path, monkeypatch):
        real = expcli._run_cell

        def flaky(cfg, point, seed):
            if seed == 1 and point["N"] == 400:
                raise RuntimeError("boom")
            return real(cfg, point, seed)

        monkeypatch.setattr(expcli, "_run_cell", flaky)
        out = tmp_path / "res"
        assert main(["run", "--config", str(write_config(tmp_path, OPE_TOML, out))]) == EXIT_PARTIAL
        manifest = json.loads((out / "manifest.json").read_text())
        assert [c["cell"] for c in manifest["failed_cells"]] == ["N=400__inv_temp=1.0__n_actions=4__seed=1"]
        assert "boom" in manifest["failed_cells"][0]["error"]
        assert len(read_csv(out / "runs.csv")) == 2 * 5
        assert len(list((out / "cells").glob("*.csv"))) == 5

    def test_seed_offset(self, tmp_path):
        out = tmp_path / "res"
        main(["run", "--config", str(write_config(tmp_path, OPE_TOML, out)), "--seed-offset", "10"])
        assert json.loads((out / "manifest.json").read_text())["seeds"] == [10, 11, 12]

    def test_output_root_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(expcli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
        assert main(["run", "--config", str(write_config(tmp_path, OPE_TOML, "rel/out"))]) == EXIT_OK
        assert (tmp_path / "root" / "rel" / "out" / "summary.csv").exists()

    def test_interleaved_equals_sequential(self, tmp_path):
        ope_a, rl_a = tmp_path / "ope_a", tmp_path / "rl_a"
        ope_b, rl_b = tmp_path / "ope_b", tmp_path / "rl_b"
        # sequential: one config after the other
        main(["run", "--config", str(write_config(tmp_path, OPE_TOML, ope_a, "o1.toml"))])
        main(["run", "--config", str(write_config(tmp_path, RL_TOML, rl_a, "r1.toml"))])
        # interleaved: alternate cells of the two experiments in one process
        ope_cfg = load_config(write_config(tmp_path, OPE_TOML, ope_b, "o2.toml"))
        rl_cfg = load_config(write_config(tmp_path, RL_TOML, rl_b, "r2.toml"))
        ope_jobs = [(p, s) for p in expcli.grid_points(ope_cfg) for s in ope_cfg.seeds]
        rl_jobs = [(p, s) for p in expcli.grid_points(rl_cfg) for s in rl_cfg.seeds]
        for i in range(max(len(ope_jobs), len(rl_jobs))):
            if i < len(rl_jobs):
                expcli._cell_job(rl_cfg, *rl_jobs[i], str(rl_b))
            if i < len(ope_jobs):
                expcli._cell_job(ope_cfg, *ope_jobs[i], str(ope_b))
        assert tree_bytes(ope_a / "cells") == tree_bytes(ope_b / "cells")
        assert tree_bytes(rl_a / "cells") == tree_bytes(rl_b / "cells")

    def test_summarize_command(self, tmp_path, capsys):
        out = tmp_path / "res"
        main(["run", "--config", str(write_config(tmp_path, OPE_TOML, out))])
        before = (out / "summary.csv").read_bytes()
        capsys.readouterr()
        assert main(["summarize", "--dir", str(out), "--ci", "0.8"]) == EXIT_OK
        assert (out / "summary.csv").read_bytes() == before
        assert capsys.readouterr().out.encode() == before
        assert main(["summarize", "--dir", str(out), "--ci", "0.95"]) == EXIT_OK
        wide = read_csv(out / "summary.csv")
        narrow = list(csv.DictReader(before.decode().splitlines()))
        for w, n in zip(wide, narrow):
            assert float(w["ci_high"]) - float(w["ci_low"]) >= float(n["ci_high"]) - float(n["ci_low"])

    def test_summarize_missing_dir(self, tmp_path):
        assert main(["summarize", "--dir", str(tmp_path)]) == EXIT_CONFIG


class TestSummaries:
    def test_two_runs_mean(self):
        mean, sd, lo, hi, degenerate = t_interval([0.4, 0.6])
        assert mean == pytest.approx(0.5)
        assert sd == pytest.approx(math.sqrt(0.02))
        assert not degenerate
        assert lo < 0.5 < hi

    def test_all_equal_zero_width(self):
        _, sd, lo, hi, _ = t_interval([0.3, 0.3, 0.3])
        assert sd == 0.0 and lo == hi == pytest.approx(0.3)

    def test_single_run_flagged(self):
        mean, sd, lo, hi, degenerate = t_interval([0.7])
        assert degenerate and lo == hi == mean == 0.7

    def test_known_quantile(self):
        # two points: half-width = t_{0.9, 1} * s / sqrt(2) with t_{0.9, 1} = 3.0776835
        _, sd, lo, hi, _ = t_interval([0.0, 1.0], 0.8)
        assert (hi - lo) / 2 == pytest.approx(3.0776835371752527 * sd / math.sqrt(2), rel=1e-9)

    def test_coverage(self):
        rng = np.random.default_rng(0)
        trials = 4000
        hits = sum(lo <= 0.0 <= hi for _, _, lo, hi, _ in (t_interval(rng.standard_normal(10), 0.8) for _ in range(trials)))
        assert abs(hits / trials - 0.8) < 3 * math.sqrt(0.16 / trials)

    def test_summarize_groups(self):
        rows = [{"method": m, "N": n, "seed": s, "score": float(s)} for m in ("a", "b") for n in (10, 100) for s in range(3)]
        summary = summarize(rows, group_keys=("method", "N"), metrics=("score",))
        assert len(summary.rows) == 4
        assert all(r["mean"] == pytest.approx(1.0) and r["n_runs"] == 3 for r in summary.rows)
        assert summary.to_csv().splitlines()[0] == "method,N,metric,mean,std,ci_low,ci_high,n_runs,degenerate"

    def test_summarize_empty(self):
        with pytest.raises(ConfigError):
            summarize([])
