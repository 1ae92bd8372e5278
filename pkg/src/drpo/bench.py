"""Experiment driver: benchmark, noise sweep, ablation, sensitivity, O2O and divergence runs.

Every run derives its seeds from a master seed with :func:`derive_seed`, so
the same :class:`ExperimentSpec` always writes the same ``metrics.csv`` bytes.
Wall-clock times only appear in ``summary.json``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import divergence as dv
from .algorithms import (ALGORITHMS, EXTRA_ALGORITHMS, AlgoConfig, Batch, RunMetrics, Trainer,
                         run_loop, sample_batch, train)
from .nn import ConfigurationError
from .recsim import ONLINE, SCENARIOS, RecSim, ScenarioConfig, quality_weights, scenario

KINDS = ("benchmark", "noise_sweep", "ablation", "sensitivity", "o2o", "divergence")
MASTER_SEED_ENV = "DRPO_MASTER_SEED"

METRIC_COLUMNS = ("run_id", "step", "reward", "ecpm", "dist", "top_p", "nu_star", "sigma_ratio",
                  "grad_norm_signal", "grad_norm_noise", "online_ratio", "overflow_count")

DEFAULT_ALGOS = {
    "benchmark": ALGORITHMS,
    "noise_sweep": ("drpo", "awr", "asymre"),
    "ablation": ("hard_only", "asymre", "drpo_fixed", "drpo"),
    "sensitivity": ("drpo",),
    "o2o": ("drpo", "drpo_exp", "iql", "awr", "asymre"),
    "divergence": ("apg",),
}

# experiment-level knobs, settable with --set exp.<name>=<json>
EXPERIMENT_OPTIONS = {
    "noise_ratios": [0.0, 0.2, 0.4, 0.6, 0.8],
    "reward_noises": [0.0, 0.5, 1.0],
    "noise_weights": [0.1, 0.5],
    "fixed_ratios": [0.05, 0.4, 1.0],
    "ablation_top_p": 0.5,
    "online_fraction": 0.5,
    "offline_share": 0.5,
    "dyn_steps": 2000,
}

_ALGO_FIELDS = {f.name for f in fields(AlgoConfig)} - {"algorithm", "seed"}
_SCENARIO_FIELDS = {f.name for f in fields(ScenarioConfig)} - {"name", "seed"}
_SPEC_KEYS = {"kind", "scenario", "scenarios", "algos", "seeds", "steps", "out",
              "master_seed", "jobs", "set", "overrides"}


def derive_seed(master: int, *parts) -> int:
    """63-bit seed from sha256 of ``master|part1|part2|...``; stable across versions."""
    text = "|".join(str(p) for p in (master, *parts))
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big") >> 1


@dataclass
class ExperimentSpec:
    kind: str
    scenarios: tuple[str, ...] = ("medium_quality",)
    algos: tuple[str, ...] = ()
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    steps: int = 5000
    out: str = "runs"
    master_seed: int = 0
    overrides: dict = field(default_factory=dict)
    jobs: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown experiment kind {self.kind!r}; choose from {', '.join(KINDS)}")
        if isinstance(self.scenarios, str):
            self.scenarios = (self.scenarios,)
        if tuple(self.scenarios) == ("all",):
            self.scenarios = tuple(SCENARIOS)
        self.scenarios = tuple(self.scenarios)
        for s in self.scenarios:
            if s not in SCENARIOS:
                raise ConfigurationError(f"unknown scenario {s!r}; choose from {sorted(SCENARIOS)}")
        if isinstance(self.seeds, int):
            self.seeds = tuple(range(self.seeds))
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        self.algos = tuple(self.algos) or DEFAULT_ALGOS[self.kind]
        valid = ALGORITHMS + EXTRA_ALGORITHMS + ("drpo_fixed",)
        for a in self.algos:
            if a not in valid:
                raise ConfigurationError(f"unknown algorithm {a!r}")
        if self.steps < 0 or self.jobs < 1:
            raise ConfigurationError("steps must be >= 0 and jobs >= 1")
        self.overrides = {k: v for k, v in self.overrides.items()}
        for key in self.overrides:
            _route_override(key)

    def algo_overrides(self) -> dict:
        return {name: v for k, v in self.overrides.items()
                for ns, name in [_route_override(k)] if ns == "algo"}

    def scenario_overrides(self) -> dict:
        out = {}
        for k, v in self.overrides.items():
            ns, name = _route_override(k)
            if ns == "scenario":
                out[name] = tuple(v) if isinstance(v, list) else v
        return out

    def option(self, name: str):
        return self.overrides.get(f"exp.{name}", EXPERIMENT_OPTIONS[name])


def _route_override(key: str) -> tuple[str, str]:
    """Resolve ``algo.x``, ``scenario.x``, ``exp.x`` or a bare field name."""
    ns, _, name = key.rpartition(".")
    if ns == "algo" and name in _ALGO_FIELDS:
        return "algo", name
    if ns == "scenario" and name in _SCENARIO_FIELDS:
        return "scenario", name
    if ns == "exp" and name in EXPERIMENT_OPTIONS:
        return "exp", name
    if not ns:
        if name in _ALGO_FIELDS:
            return "algo", name
        if name in _SCENARIO_FIELDS:
            return "scenario", name
        if name in EXPERIMENT_OPTIONS:
            return "exp", name
    raise ConfigurationError(f"unknown override key {key!r}")


def parse_value(text: str):
    """JSON literal if it parses (numbers, booleans, lists), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_assignments(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"expected key=value, got {item!r}")
        out[key.strip()] = parse_value(value.strip())
    return out


def parse_config(path=None, **flags) -> ExperimentSpec:
    """Build a spec from an optional JSON file, then apply non-None ``flags`` on top.

    Recognised keys: kind, scenario (name, list or "all"), algos, seeds (count
    or list of indices), steps, out, master_seed, jobs and set (override map).
    The master seed falls back to the ``DRPO_MASTER_SEED`` environment variable.
    """
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigurationError(f"config {path} must hold a JSON object")
    unknown = set(data) - _SPEC_KEYS
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")
    overrides = dict(data.get("set", {}) or {})
    overrides.update(data.get("overrides", {}) or {})
    overrides.update(flags.pop("set", None) or {})
    merged = {k: v for k, v in data.items() if k not in ("set", "overrides")}
    if "scenarios" in merged:
        merged["scenario"] = merged.pop("scenarios")
    merged.update({k: v for k, v in flags.items() if v is not None})
    unknown = set(merged) - _SPEC_KEYS
    if unknown:
        raise ConfigurationError(f"unknown options: {', '.join(sorted(unknown))}")
    if "kind" not in merged:
        raise ConfigurationError("experiment kind is required")
    scen = merged.get("scenario", "medium_quality")
    if isinstance(scen, str):
        scen = tuple(s.strip() for s in scen.split(",") if s.strip())
    algos = merged.get("algos", ())
    if isinstance(algos, str):
        algos = tuple(a.strip() for a in algos.split(",") if a.strip())
    master = merged.get("master_seed")
    if master is None:
        master = int(os.environ.get(MASTER_SEED_ENV, "0"))
    return ExperimentSpec(kind=merged["kind"], scenarios=scen, algos=algos,
                          seeds=merged.get("seeds", 5), steps=int(merged.get("steps", 5000)),
                          out=str(merged.get("out", "runs")), master_seed=int(master),
                          overrides=overrides, jobs=int(merged.get("jobs", 1)))


# -- single runs ---------------------------------------------------------------

@dataclass
class Job:
    run_id: str
    mode: str                      # "offline" or "o2o"
    algo: AlgoConfig
    scen: ScenarioConfig
    labels: dict
    noise_ratio: float = 0.0
    noise_seed: int = 0
    online_fraction: float = 0.5
    offline_steps: int = 0


@dataclass
class RunResult:
    run_id: str
    labels: dict
    rows: list
    final: dict
    wall_time: float
    online_ratio: list = field(default_factory=list)


def _window_mean(values, lo: int, hi: int) -> float:
    chunk = np.asarray(values[lo:hi], dtype=np.float64)
    if chunk.size == 0 or np.all(np.isnan(chunk)):
        return float("nan")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return float(np.nanmean(chunk))


def metric_rows(run_id: str, metrics: RunMetrics) -> list[list]:
    """One row per evaluation; controller columns average the steps since the previous one."""
    steps = np.asarray(metrics.steps, dtype=np.int64)
    rows = []
    prev = 0
    for ev in metrics.evals:
        s = int(ev["step"])
        lo, hi = np.searchsorted(steps, prev, "right"), np.searchsorted(steps, s, "right")
        if s == 0:
            lo = hi = 0
        rows.append([run_id, s, ev["reward"], ev["ecpm"], ev["dist"],
                     _window_mean(metrics.top_p, lo, hi), _window_mean(metrics.nu_star, lo, hi),
                     _window_mean(metrics.sigma_ratio, lo, hi), ev["grad_norm_signal"],
                     ev["grad_norm_noise"], _window_mean(metrics.online_ratio, lo, hi),
                     int(ev["overflow_count"])])
        prev = s
    return rows


def _dataset(job: Job):
    env = RecSim(job.scen)
    ds = env.generate_dataset()
    if job.noise_ratio > 0:
        ds = env.inject_random(ds, job.noise_ratio, np.random.default_rng(job.noise_seed))
    return env, ds


def _o2o(job: Job, env: RecSim, ds) -> RunMetrics:
    cfg = job.algo
    d = ds.config
    trainer = Trainer(cfg, d.state_dim, d.action_dim)
    metrics = RunMetrics()
    row = trainer.evaluate(env, 0)
    row.update(grad_norm_signal=np.nan, grad_norm_noise=np.nan, overflow_count=0)
    metrics.evals.append(row)
    if cfg.algorithm == "bppo":
        trainer.pretrain_reference(ds, cfg.bc_pretrain_steps)
    offline = lambda: sample_batch(ds, cfg.batch_size, trainer.rng)  # noqa: E731
    run_loop(trainer, offline, job.offline_steps, env, metrics)

    online_rng = np.random.default_rng([cfg.seed, 1])
    n_on = int(round(cfg.batch_size * job.online_fraction))

    def mixed() -> Batch:
        off = sample_batch(ds, cfg.batch_size - n_on, trainer.rng)
        s, a, r, _ = env.online_batch(trainer.policy, n_on, online_rng)
        return Batch(np.vstack([off.states, s]), np.vstack([off.actions, a]),
                     np.concatenate([off.rewards, r]),
                     np.concatenate([off.sources, np.full(n_on, ONLINE, dtype=np.int64)]))

    run_loop(trainer, mixed, cfg.steps - job.offline_steps, env, metrics)
    return metrics


def execute(job: Job) -> RunResult:
    t0 = time.perf_counter()
    env, ds = _dataset(job)
    if job.mode == "o2o":
        metrics = _o2o(job, env, ds)
    else:
        metrics = train(job.algo, ds, env).metrics
    rows = metric_rows(job.run_id, metrics)
    final = metrics.final
    return RunResult(job.run_id, job.labels,
                     rows, {"reward": final["reward"], "ecpm": final["ecpm"], "dist": final["dist"],
                            "overflow_count": int(final["overflow_count"])},
                     time.perf_counter() - t0,
                     [float(x) for x in metrics.online_ratio[job.offline_steps:]]
                     if job.mode == "o2o" else [])


# -- job construction -------------------------------------------------------------

def _algo_config(spec: ExperimentSpec, name: str, seed: int, **extra) -> AlgoConfig:
    kw = {"steps": spec.steps, **spec.algo_overrides(), **extra}
    if name == "drpo_fixed":
        kw.setdefault("adaptive", False)
        name = "drpo"
    if name == "hard_only":
        kw.setdefault("adaptive", False)
    return AlgoConfig(algorithm=name, seed=seed, **kw)


def _scenario_config(spec: ExperimentSpec, name: str, idx: int, **extra) -> ScenarioConfig:
    kw = {**spec.scenario_overrides(), **extra}
    return scenario(name, seed=derive_seed(spec.master_seed, "data", name, idx), **kw)


def build_jobs(spec: ExperimentSpec) -> list[Job]:
    jobs = []
    kind = spec.kind
    for scen_name in spec.scenarios:
        for idx in spec.seeds:
            if kind == "benchmark":
                for a in spec.algos:
                    seed = derive_seed(spec.master_seed, a, scen_name, idx)
                    jobs.append(Job(f"{kind}/{scen_name}/{a}/s{idx}", "offline",
                                    _algo_config(spec, a, seed), _scenario_config(spec, scen_name, idx),
                                    {"algorithm": a, "scenario": scen_name, "seed": idx}))
            elif kind == "noise_sweep":
                for ratio in spec.option("noise_ratios"):
                    for a in spec.algos:
                        seed = derive_seed(spec.master_seed, a, scen_name, idx)
                        jobs.append(Job(f"{kind}/{scen_name}/noise{ratio}/{a}/s{idx}", "offline",
                                        _algo_config(spec, a, seed),
                                        _scenario_config(spec, scen_name, idx),
                                        {"algorithm": a, "scenario": scen_name, "seed": idx,
                                         "noise_ratio": ratio},
                                        noise_ratio=float(ratio),
                                        noise_seed=derive_seed(spec.master_seed, "noise", scen_name,
                                                               idx, ratio)))
            elif kind == "ablation":
                p = spec.option("ablation_top_p")
                for a in spec.algos:
                    seed = derive_seed(spec.master_seed, a, scen_name, idx)
                    extra = {"init_top_p": p} if a in ("hard_only", "drpo_fixed") else {}
                    jobs.append(Job(f"{kind}/{scen_name}/{a}/s{idx}", "offline",
                                    _algo_config(spec, a, seed, **extra),
                                    _scenario_config(spec, scen_name, idx),
                                    {"algorithm": a, "scenario": scen_name, "seed": idx}))
            elif kind == "sensitivity":
                for rn in spec.option("reward_noises"):
                    for nw in spec.option("noise_weights"):
                        for p in spec.option("fixed_ratios"):
                            for a in spec.algos:
                                seed = derive_seed(spec.master_seed, a, scen_name, idx, rn, nw, p)
                                jobs.append(Job(
                                    f"{kind}/{scen_name}/rn{rn}/nw{nw}/p{p}/{a}/s{idx}", "offline",
                                    _algo_config(spec, a, seed, adaptive=False, init_top_p=p),
                                    _scenario_config(spec, scen_name, idx, reward_noise=rn,
                                                     weights=quality_weights(nw)),
                                    {"algorithm": a, "scenario": scen_name, "seed": idx,
                                     "reward_noise": rn, "noise_weight": nw, "top_p": p}))
            elif kind == "o2o":
                for a in spec.algos:
                    seed = derive_seed(spec.master_seed, a, scen_name, idx)
                    jobs.append(Job(f"{kind}/{scen_name}/{a}/s{idx}", "o2o",
                                    _algo_config(spec, a, seed), _scenario_config(spec, scen_name, idx),
                                    {"algorithm": a, "scenario": scen_name, "seed": idx},
                                    online_fraction=float(spec.option("online_fraction")),
                                    offline_steps=int(spec.steps * spec.option("offline_share"))))
    return jobs


# -- aggregation and output -----------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


def write_metrics(path: Path, results: list[RunResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for res in results:
            for row in res.rows:
                w.writerow([_fmt(v) for v in row])


def aggregate(results: list[RunResult], fields_=("reward", "ecpm", "dist", "overflow_count")) -> list[dict]:
    """Mean and sample std (ddof=1; 0 for one seed) over runs sharing every label but the seed."""
    groups: dict = {}
    for res in results:
        key = tuple(sorted((k, v) for k, v in res.labels.items() if k != "seed"))
        groups.setdefault(key, []).append(res)
    out = []
    for key, runs in groups.items():
        rec = dict(key)
        rec["n_seeds"] = len(runs)
        for f in fields_:
            vals = np.array([r.final[f] for r in runs], dtype=np.float64)
            rec[f"{f}_mean"] = float(vals.mean())
            rec[f"{f}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        rec["wall_time_mean"] = float(np.mean([r.wall_time for r in runs]))
        out.append(rec)
    return out


def _json_safe(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _spec_dict(spec: ExperimentSpec) -> dict:
    return {"kind": spec.kind, "scenarios": list(spec.scenarios), "algos": list(spec.algos),
            "seeds": list(spec.seeds), "steps": spec.steps, "master_seed": spec.master_seed,
            "overrides": spec.overrides}


def write_summary(path: Path, spec: ExperimentSpec, payload: dict) -> None:
    doc = {"spec": _spec_dict(spec), **payload}
    path.write_text(json.dumps(_json_safe(doc), indent=2, sort_keys=True) + "\n")


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    runs: list
    aggregates: list
    extra: dict = field(default_factory=dict)
    out_dir: Path | None = None


def _run_jobs(spec: ExperimentSpec, jobs: list[Job], progress=None) -> list[RunResult]:
    if spec.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            results = []
            for res in pool.map(execute, jobs):
                results.append(res)
                if progress:
                    progress(res)
            return results
    results = []
    for job in jobs:
        res = execute(job)
        results.append(res)
        if progress:
            progress(res)
    return results


def _finish(spec: ExperimentSpec, results: list[RunResult], extra: dict, write: bool) -> ExperimentResult:
    aggs = aggregate(results)
    out = None
    if write:
        out = Path(spec.out)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(out / "metrics.csv", results)
        runs = [{"run_id": r.run_id, **r.labels, **r.final, "wall_time": r.wall_time} for r in results]
        write_summary(out / "summary.json", spec, {"runs": runs, "aggregates": aggs, **extra})
    return ExperimentResult(spec, results, aggs, extra, out)


def _agg_lookup(aggs: list[dict], **match) -> dict:
    for a in aggs:
        if all(a.get(k) == v for k, v in match.items()):
            return a
    raise KeyError(match)


def run_benchmark(spec: ExperimentSpec, write: bool = True, progress=None) -> ExperimentResult:
    results = _run_jobs(spec, build_jobs(spec), progress)
    return _finish(spec, results, {}, write)


def run_noise_sweep(spec: ExperimentSpec, write: bool = True, progress=None) -> ExperimentResult:
    """eCPM against injected-noise ratio; also the relative drop from the first to the last ratio."""
    results = _run_jobs(spec, build_jobs(spec), progress)
    aggs = aggregate(results)
    ratios = spec.option("noise_ratios")
    curves = {}
    for scen in spec.scenarios:
        for a in spec.algos:
            ys = [_agg_lookup(aggs, algorithm=a, scenario=scen, noise_ratio=r)["ecpm_mean"] for r in ratios]
            curves[f"{scen}/{a}"] = {"noise_ratio": list(ratios), "ecpm": ys,
                                     "relative_drop": (ys[0] - ys[-1]) / ys[0] if ys[0] else float("nan")}
    return _finish(spec, results, {"curves": curves}, write)


def run_ablation(spec: ExperimentSpec, write: bool = True, progress=None) -> ExperimentResult:
    results = _run_jobs(spec, build_jobs(spec), progress)
    aggs = aggregate(results)
    table = {}
    for scen in spec.scenarios:
        vals = {a: _agg_lookup(aggs, algorithm=a, scenario=scen)["ecpm_mean"] for a in spec.algos}
        best = max(vals.values())
        table[scen] = {a: {"ecpm": v, "gap_to_best": (best - v) / best if best else float("nan")}
                       for a, v in vals.items()}
    return _finish(spec, results, {"table": table}, write)


def run_sensitivity(spec: ExperimentSpec, write: bool = True, progress=None) -> ExperimentResult:
    results = _run_jobs(spec, build_jobs(spec), progress)
    aggs = aggregate(results)
    grid = [{k: a[k] for k in ("scenario", "algorithm", "reward_noise", "noise_weight", "top_p",
                               "ecpm_mean", "ecpm_std")} for a in aggs]
    return _finish(spec, results, {"grid": grid}, write)


def admit_trend(online_ratio, frac: float = 0.1) -> tuple[float, float]:
    """Mean online-admit ratio over the first and last ``frac`` of the online phase."""
    x = np.asarray(online_ratio, dtype=np.float64)
    k = max(1, int(len(x) * frac))
    return float(np.nanmean(x[:k])), float(np.nanmean(x[-k:]))


def run_o2o(spec: ExperimentSpec, write: bool = True, progress=None) -> ExperimentResult:
    results = _run_jobs(spec, build_jobs(spec), progress)
    trends = {}
    for res in results:
        if res.online_ratio:
            first, last = admit_trend(res.online_ratio)
            trends[res.run_id] = {"admit_first10": first, "admit_last10": last}
    return _finish(spec, results, {"admit_trend": trends}, write)


def run_divergence(spec: ExperimentSpec, write: bool = True, progress=None) -> ExperimentResult:
    """Scalar dynamics fits, fragility and on-policy checks, plus a phantom run per scenario/seed."""
    out = Path(spec.out)
    if write:
        out.mkdir(parents=True, exist_ok=True)
    n_dyn = int(spec.option("dyn_steps"))
    extra: dict = {"dynamics": {}, "phantom": {}}
    cases = {
        "repulsive": dv.DynState(mu=0.5, xi=0.0, anchor=0.0, advantage=-1.0, lr=0.01, learn_variance=False),
        "repulsive_joint": dv.DynState(mu=2.0, xi=0.0, anchor=0.0, advantage=-1.0, lr=0.01),
        "attractive": dv.DynState(mu=2.0, xi=0.0, anchor=0.0, advantage=1.0, lr=0.01, learn_variance=False),
    }
    for name, init in cases.items():
        traj = dv.simulate_dynamics(init, n_dyn)
        fit = dv.fit_explosion_exponent(traj) if len(traj) > 4 else None
        extra["dynamics"][name] = {
            "steps": len(traj), "overflow": traj.overflow,
            "rho_fit": fit.rho if fit else None,
            "slope_delta": fit.slope_delta if fit else None,
            "slope_grad": fit.slope_grad if fit else None,
            "slope_ratio": fit.ratio if fit else None}
        if write:
            traj.to_csv(out / f"trajectory_{name}.csv")
    extra["fragility"] = [{"sigma": r.sigma, "d_mu": r.d_mu, "d_xi": r.d_xi, "norm": r.norm}
                          for r in dv.fragility_sweep(1.0, [2.0 ** -k for k in range(8)])]
    extra["onpolicy"] = [vars(e) for e in dv.onpolicy_invariance_check(1.0, 10, [0.0, 100.0], 100_000,
                                                                       seed=spec.master_seed)]
    results = []
    for scen_name in spec.scenarios:
        for idx in spec.seeds:
            t0 = time.perf_counter()
            ds = RecSim(_scenario_config(spec, scen_name, idx)).generate_dataset()
            cfg = _algo_config(spec, "apg", derive_seed(spec.master_seed, "phantom", scen_name, idx))
            rep = dv.phantom_monitor(ds, cfg)
            key = f"divergence/{scen_name}/phantom/s{idx}"
            extra["phantom"][key] = {"final_ratios": rep.final_ratios(),
                                     "increasing": {p: rep.is_increasing(p) for p in ("total", "mu", "xi")},
                                     "wall_time": time.perf_counter() - t0}
            if write:
                rep.to_csv(out / f"phantom_{scen_name}_s{idx}.csv")
            if progress:
                progress(key)
    if write:
        write_summary(out / "summary.json", spec, extra)
    return ExperimentResult(spec, results, [], extra, out if write else None)


RUNNERS = {
    "benchmark": run_benchmark,
    "noise_sweep": run_noise_sweep,
    "ablation": run_ablation,
    "sensitivity": run_sensitivity,
    "o2o": run_o2o,
    "divergence": run_divergence,
}


def run_experiment(spec: ExperimentSpec, write: bool = True, progress=None) -> ExperimentResult:
    return RUNNERS[spec.kind](spec, write=write, progress=progress)
