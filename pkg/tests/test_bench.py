import csv
import json

import numpy as np
import pytest

from drpo import cli
from drpo.bench import (METRIC_COLUMNS, ExperimentSpec, admit_trend, aggregate, derive_seed,
                        parse_assignments, parse_config, run_experiment)
from drpo.nn import ConfigurationError

TINY = {"scenario.dataset_size": 400, "scenario.n_items": 50, "algo.eval_every": 10,
        "algo.eval_users": 40, "algo.batch_size": 32, "algo.hidden": [8, 8],
        "algo.bc_pretrain_steps": 5, "exp.dyn_steps": 300}


def tiny_spec(kind, tmp_path, **kw):
    base = dict(kind=kind, seeds=(0,), steps=20, out=str(tmp_path / kind), overrides=dict(TINY))
    base.update(kw)
    return ExperimentSpec(**base)


def read_metrics(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_derive_seed_is_frozen():
    # sha256("0|drpo|medium_quality|0")[:8] big-endian, shifted right one bit
    assert derive_seed(0, "drpo", "medium_quality", 0) == 1343011721891927648
    assert derive_seed(0, "drpo", "medium_quality", 1) != derive_seed(0, "drpo", "medium_quality", 0)
    assert 0 <= derive_seed(7, "x") < 2 ** 63


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        ExperimentSpec(kind="train")
    with pytest.raises(ConfigurationError):
        ExperimentSpec(kind="benchmark", seeds=())
    with pytest.raises(ConfigurationError):
        ExperimentSpec(kind="benchmark", scenarios=("tiny",))
    with pytest.raises(ConfigurationError):
        ExperimentSpec(kind="benchmark", algos=("sac",))
    with pytest.raises(ConfigurationError):
        ExperimentSpec(kind="benchmark", overrides={"algo.nonsense": 1})
    spec = ExperimentSpec(kind="benchmark", scenarios=("all",), seeds=3)
    assert spec.scenarios == ("medium_quality", "extreme_noisy") and spec.seeds == (0, 1, 2)
    assert len(spec.algos) == 10


def test_override_routing():
    spec = ExperimentSpec(kind="noise_sweep", overrides={"lr": 1e-3, "scenario.reward_noise": 0.2,
                                                         "exp.noise_ratios": [0.0, 0.5],
                                                         "weights": [0.2, 0.3, 0.5]})
    assert spec.algo_overrides() == {"lr": 1e-3}
    assert spec.scenario_overrides() == {"reward_noise": 0.2, "weights": (0.2, 0.3, 0.5)}
    assert spec.option("noise_ratios") == [0.0, 0.5]
    assert spec.option("online_fraction") == 0.5


def test_parse_assignments():
    assert parse_assignments(["a=1", "b=true", "c=[1, 2]", "d=hello"]) == {
        "a": 1, "b": True, "c": [1, 2], "d": "hello"}
    with pytest.raises(ConfigurationError):
        parse_assignments(["novalue"])


def test_parse_config_file_and_flags(tmp_path, monkeypatch):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"kind": "ablation", "scenario": "extreme_noisy", "seeds": 2, "steps": 100,
                             "set": {"algo.lr": 0.001}}))
    monkeypatch.setenv("DRPO_MASTER_SEED", "17")
    spec = parse_config(p, steps=50, set={"exp.ablation_top_p": 0.4})
    assert spec.kind == "ablation" and spec.scenarios == ("extreme_noisy",)
    assert spec.steps == 50 and spec.seeds == (0, 1) and spec.master_seed == 17
    assert spec.overrides == {"algo.lr": 0.001, "exp.ablation_top_p": 0.4}
    assert parse_config(p, master_seed=3).master_seed == 3


def test_parse_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigurationError):
        parse_config(bad)
    unknown = tmp_path / "u.json"
    unknown.write_text(json.dumps({"kind": "benchmark", "colour": "red"}))
    with pytest.raises(ConfigurationError):
        parse_config(unknown)
    with pytest.raises(ConfigurationError):
        parse_config(None)
    with pytest.raises(ConfigurationError):
        parse_config(None, kind="nope")


def test_single_run_benchmark(tmp_path):
    spec = tiny_spec("benchmark", tmp_path, algos=("drpo",))
    res = run_experiment(spec)
    assert len(res.aggregates) == 1 and len(res.runs) == 1
    rows = read_metrics(res.out_dir / "metrics.csv")
    assert tuple(rows[0]) == METRIC_COLUMNS
    assert [r[1] for r in rows[1:]] == ["0", "10", "20"]
    assert rows[1][0] == "benchmark/medium_quality/drpo/s0"
    summary = json.loads((res.out_dir / "summary.json").read_text())
    assert summary["runs"][0]["algorithm"] == "drpo"
    assert summary["spec"]["kind"] == "benchmark"


def test_metrics_bytes_are_reproducible(tmp_path):
    a = run_experiment(tiny_spec("benchmark", tmp_path / "a", algos=("drpo", "iql"), seeds=(0, 1)))
    b = run_experiment(tiny_spec("benchmark", tmp_path / "b", algos=("drpo", "iql"), seeds=(0, 1)))
    assert (a.out_dir / "metrics.csv").read_bytes() == (b.out_dir / "metrics.csv").read_bytes()


def test_aggregates_recompute_from_runs(tmp_path):
    res = run_experiment(tiny_spec("benchmark", tmp_path, algos=("awr",), seeds=(0, 1, 2)))
    finals = [r.final["reward"] for r in res.runs]
    agg = res.aggregates[0]
    assert agg["n_seeds"] == 3
    assert agg["reward_mean"] == pytest.approx(np.mean(finals))
    assert agg["reward_std"] == pytest.approx(np.std(finals, ddof=1))
    assert agg["ecpm_mean"] == pytest.approx(5 * agg["reward_mean"])


def test_aggregate_groups_by_labels():
    class R:
        def __init__(self, algo, seed, reward):
            self.labels = {"algorithm": algo, "seed": seed}
            self.final = {"reward": reward, "ecpm": 5 * reward, "dist": 0.0, "overflow_count": 0}
            self.wall_time = 1.0
    aggs = aggregate([R("a", 0, 1.0), R("a", 1, 3.0), R("b", 0, 2.0)])
    assert [(g["algorithm"], g["reward_mean"], g["n_seeds"]) for g in aggs] == [("a", 2.0, 2), ("b", 2.0, 1)]
    assert aggs[1]["reward_std"] == 0.0


@pytest.mark.parametrize("kind", ["noise_sweep", "ablation", "sensitivity", "o2o"])
def test_every_kind_writes_outputs(kind, tmp_path):
    over = dict(TINY)
    if kind == "noise_sweep":
        over["exp.noise_ratios"] = [0.0, 0.8]
    if kind == "sensitivity":
        over.update({"exp.reward_noises": [0.0], "exp.noise_weights": [0.1], "exp.fixed_ratios": [0.05, 1.0]})
    spec = tiny_spec(kind, tmp_path, overrides=over,
                     algos=("drpo", "awr") if kind in ("noise_sweep", "o2o") else ())
    res = run_experiment(spec)
    assert (res.out_dir / "metrics.csv").exists()
    summary = json.loads((res.out_dir / "summary.json").read_text())
    assert summary["aggregates"]
    if kind == "noise_sweep":
        assert set(summary["curves"]) == {"medium_quality/drpo", "medium_quality/awr"}
    if kind == "ablation":
        assert set(summary["table"]["medium_quality"]) == {"hard_only", "asymre", "drpo_fixed", "drpo"}
        assert min(v["gap_to_best"] for v in summary["table"]["medium_quality"].values()) == 0.0
    if kind == "sensitivity":
        assert len(summary["grid"]) == 2
    if kind == "o2o":
        trend = summary["admit_trend"]["o2o/medium_quality/drpo/s0"]
        assert 0.0 <= trend["admit_first10"] <= 1.0


def test_o2o_mixes_online_rows(tmp_path):
    res = run_experiment(tiny_spec("o2o", tmp_path, algos=("drpo",), steps=40))
    run = res.runs[0]
    assert len(run.online_ratio) == 20
    rows = read_metrics(res.out_dir / "metrics.csv")
    online = [float(r[10]) for r in rows[1:]]
    assert online[1] == 0.0 and max(online[3:]) > 0.0


def test_sensitivity_seeds_differ(tmp_path):
    over = dict(TINY)
    over.update({"exp.reward_noises": [0.5], "exp.noise_weights": [0.5], "exp.fixed_ratios": [0.4]})
    res = run_experiment(tiny_spec("sensitivity", tmp_path, seeds=(0, 1), overrides=over))
    a, b = (r.final["ecpm"] for r in res.runs)
    assert a != b


def test_divergence_kind(tmp_path):
    res = run_experiment(tiny_spec("divergence", tmp_path))
    out = res.out_dir
    assert (out / "trajectory_repulsive.csv").exists() and (out / "phantom_medium_quality_s0.csv").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert 1.8 <= summary["dynamics"]["repulsive"]["slope_ratio"] <= 2.2
    assert summary["dynamics"]["repulsive_joint"]["overflow"]


def test_admit_trend():
    first, last = admit_trend([0.0] * 10 + [0.5] * 80 + [1.0] * 10)
    assert first == 0.0 and last == 1.0


def test_cli_end_to_end(tmp_path, capsys):
    out = tmp_path / "cli"
    argv = ["benchmark", "--algos", "bc", "--seeds", "1", "--steps", "10", "--out", str(out)]
    for k, v in TINY.items():
        argv += ["--set", f"{k}={json.dumps(v)}"]
    assert cli.main(argv) == 0
    text = capsys.readouterr().out
    assert "algorithm=bc" in text and (out / "metrics.csv").exists()


def test_cli_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["benchmark", "--set", "bogus=1"])
    assert exc.value.code == 2
    assert "unknown override key" in capsys.readouterr().err
