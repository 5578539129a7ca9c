"""Experiment runner: config persistence, per-seed metrics and traces,
aggregation across seeds and the UAV-count sweep.

Artifacts of one run directory::

    config.json              resolved env/trainer/ga config, policy, seeds, fingerprint
    metrics_seed<S>.csv      one row per training episode (schema comment first)
    timing_seed<S>.csv       wall-clock seconds per episode (kept apart so metrics stay bitwise reproducible)
    trace_seed<S>.csv        per-slot trace of the final evaluation episode
    summary_seed<S>.json     final evaluation numbers
    checkpoints/seed<S>/     trainer checkpoints (learned policies only)
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import shutil
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import as_episode_policy, ga_policy, random_policy
from .config import (
    LEARNED_POLICIES,
    POLICIES,
    EnvConfig,
    GaConfig,
    TrainerConfig,
    apply_policy_flags,
    fingerprint,
    load_config,
    save_config,
)
from .env import IsacEnv
from .happo import (
    ACT_STREAM,
    ENV_STREAM,
    EVAL_ROUND,
    METRIC_FIELDS,
    EpisodeLog,
    evaluate_agents,
    round_metrics,
    RolloutBatch,
    run_episode,
    stream,
    stream_seed,
    train,
)

log = logging.getLogger(__name__)

METRICS_SCHEMA = "uavisac-metrics/1"
TRACE_SCHEMA = "uavisac-trace/1"
PLOT_SCHEMA = "uavisac-plot/1"
SWEEP_SCHEMA = "uavisac-sweep/1"


class OutputExists(FileExistsError):
    pass


class SchemaMismatch(ValueError):
    pass


@dataclass
class ExperimentSpec:
    scenario: str = "default"
    policy: str = "chappo"
    seeds: list[int] = field(default_factory=lambda: [0])
    env: EnvConfig = field(default_factory=EnvConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    ga: GaConfig = field(default_factory=GaConfig)
    out: Path = Path("runs/default")
    resume: Path | None = None

    def __post_init__(self) -> None:
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        self.out = Path(self.out)

    def resolved(self) -> tuple[EnvConfig, TrainerConfig]:
        """Configs with the policy's ablation flags applied."""
        return apply_policy_flags(self.policy, self.env, self.trainer)

    @property
    def fingerprint(self) -> str:
        env, tr = self.resolved()
        return fingerprint(env, tr, self.ga, extra={"policy": self.policy, "scenario": self.scenario})


def write_csv(path: Path, schema: str, rows: list[dict], fields: list[str] | None = None, meta: str = "") -> None:
    fields = fields or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        fh.write(f"# {schema}{(' ' + meta) if meta else ''}\n")
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in fields})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer, np.bool_)):
        return v.item()
    return v


def read_csv(path: Path) -> tuple[str, list[str], list[dict]]:
    """Returns ``(schema comment, field names, rows)`` with numeric fields as floats."""
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith("#"):
            raise SchemaMismatch(f"{path}: missing schema comment line")
        reader = csv.DictReader(fh)
        rows = []
        for r in reader:
            rows.append({k: _parse(v) for k, v in r.items()})
        return first[1:].strip(), list(reader.fieldnames or []), rows


def _parse(v: str):
    try:
        return float(v)
    except ValueError:
        return v


def prepare_output(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise OutputExists(f"{out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def _baseline_rounds(spec: ExperimentSpec, env_cfg: EnvConfig, seed: int, on_row, on_timing) -> list[dict]:
    env = IsacEnv(env_cfg)
    rows = []
    workers = spec.trainer.workers
    for k in range(spec.trainer.episodes):
        t0 = time.perf_counter()
        episodes = [run_episode(env, _baseline(spec, stream(seed, k, w, ACT_STREAM)),
                                stream_seed(seed, k, w, ENV_STREAM)) for w in range(workers)]
        row = round_metrics(k, 0, RolloutBatch(episodes))
        rows.append(row)
        on_row(row)
        on_timing(k + 1, time.perf_counter() - t0)
    return rows


def _baseline(spec: ExperimentSpec, rng):
    if spec.policy == "random":
        return as_episode_policy(random_policy, rng)
    return as_episode_policy(lambda env, r: ga_policy(env, spec.ga, r), rng)


def _eval_summary(episodes: list[EpisodeLog]) -> dict:
    return {
        "mean_reward": float(np.mean([e.total_reward for e in episodes])),
        "mean_rho": float(np.mean([e.rho.mean() for e in episodes])),
        "mean_rho_bs_only": float(np.mean([e.rho_bs_only.mean() for e in episodes])),
        "violation_rate": float(np.mean([e.violations.mean() for e in episodes])),
        "rmse": np.mean([e.rmse for e in episodes], axis=0).tolist(),
    }


def run_seed(spec: ExperimentSpec, seed: int) -> dict:
    """Train (or play) one seed and write its artifacts into ``spec.out``."""
    env_cfg, tcfg = spec.resolved()
    out = spec.out
    fp = spec.fingerprint
    rows: list[dict] = []
    timing: list[dict] = []

    def on_row(r):
        rows.append(r)

    def on_timing(ep, sec):
        timing.append({"episode": ep, "seconds": sec})

    if spec.policy in LEARNED_POLICIES:
        ckpt = out / "checkpoints" / f"seed{seed}"
        ckpt.mkdir(parents=True, exist_ok=True)
        result = train(env_cfg, tcfg, seed, on_row=on_row, checkpoint_dir=ckpt, resume=spec.resume,
                       on_timing=on_timing)
        evals = evaluate_agents(result.agents, env_cfg, seed, max(tcfg.eval_episodes, 1))
        extra = {"transitions": result.transitions, "final_level": result.curriculum.level,
                 "final_grading": result.curriculum.grading().tolist()}
    else:
        _baseline_rounds(spec, env_cfg, seed, on_row, on_timing)
        env = IsacEnv(env_cfg)
        evals = []
        n_eval = max(tcfg.eval_episodes, 1)
        for e in range(n_eval):
            evals.append(run_episode(env, _baseline(spec, stream(seed, EVAL_ROUND, e, ACT_STREAM)),
                                     stream_seed(seed, EVAL_ROUND, e, ENV_STREAM), record_trace=e == n_eval - 1))
        extra = {}
    meta = f"policy={spec.policy} scenario={spec.scenario} seed={seed} fingerprint={fp}"
    write_csv(out / f"metrics_seed{seed}.csv", METRICS_SCHEMA, rows, METRIC_FIELDS, meta)
    write_csv(out / f"timing_seed{seed}.csv", METRICS_SCHEMA + "-timing", timing, ["episode", "seconds"], meta)
    trace = evals[-1].trace
    write_csv(out / f"trace_seed{seed}.csv", TRACE_SCHEMA, trace, list(trace[0]) if trace else ["t"], meta)
    summary = {"seed": seed, "policy": spec.policy, "fingerprint": fp, "eval": _eval_summary(evals), **extra}
    (out / f"summary_seed{seed}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def run(spec: ExperimentSpec, force: bool = False) -> Path:
    prepare_output(spec.out, force)
    env_cfg, tcfg = spec.resolved()
    save_config(spec.out / "config.json", env=env_cfg, trainer=tcfg, ga=spec.ga)
    data = json.loads((spec.out / "config.json").read_text())
    data.update(policy=spec.policy, scenario=spec.scenario, seeds=list(spec.seeds), fingerprint=spec.fingerprint)
    (spec.out / "config.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    for seed in spec.seeds:
        log.info("%s seed %d -> %s", spec.policy, seed, spec.out)
        run_seed(spec, seed)
    return spec.out


def spec_from_config_file(path: Path, **overrides) -> ExperimentSpec:
    cfg = load_config(path)
    kwargs = {k: cfg[k] for k in ("env", "trainer", "ga") if k in cfg}
    for k in ("policy", "scenario", "seeds"):
        if k in cfg:
            kwargs[k] = cfg[k]
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentSpec(**kwargs)


# -- aggregation ----------------------------------------------------------------

def _schema_policy(comment: str) -> tuple[str, str]:
    parts = comment.split()
    tags = dict(p.split("=", 1) for p in parts[1:] if "=" in p)
    return parts[0], tags.get("policy", "unknown")


def collect_metrics(dirs) -> dict[str, list[list[dict]]]:
    """Metrics rows grouped by policy; one list per (run dir, seed)."""
    runs: dict[str, list[list[dict]]] = defaultdict(list)
    fields_seen = None
    for d in dirs:
        files = sorted(Path(d).glob("metrics_seed*.csv"))
        if not files:
            raise FileNotFoundError(f"{d} holds no metrics files")
        for f in files:
            comment, fields, rows = read_csv(f)
            schema, policy = _schema_policy(comment)
            if schema != METRICS_SCHEMA:
                raise SchemaMismatch(f"{f}: schema {schema!r}, expected {METRICS_SCHEMA!r}")
            if fields_seen is None:
                fields_seen = fields
            elif fields != fields_seen:
                raise SchemaMismatch(f"{f}: columns {fields} differ from {fields_seen}")
            runs[policy].append(rows)
    return runs


def aggregate(dirs, out: Path | None = None) -> list[dict]:
    """Mean and population std across seeds per (policy, episode, metric)."""
    runs = collect_metrics(dirs)
    metrics = [m for m in METRIC_FIELDS if m != "episode"]
    long_rows = []
    for policy in sorted(runs):
        by_ep: dict[int, list[dict]] = defaultdict(list)
        for rows in runs[policy]:
            for r in rows:
                by_ep[int(r["episode"])].append(r)
        for ep in sorted(by_ep):
            for m in metrics:
                vals = np.array([r[m] for r in by_ep[ep]], float)
                long_rows.append({"episode": ep, "policy": policy, "metric": m, "mean": float(vals.mean()),
                                  "std": float(vals.std()), "n": len(vals)})
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "plot_data.csv", PLOT_SCHEMA, long_rows, ["episode", "policy", "metric", "mean", "std", "n"])
        write_csv(out / "summary.csv", PLOT_SCHEMA + "-summary", final_summary(long_rows),
                  ["policy", "metric", "mean", "std"])
    return long_rows


def final_summary(long_rows: list[dict], window: int = 20) -> list[dict]:
    """Per policy and metric: the mean over the last ``window`` episodes."""
    out = []
    groups: dict[tuple[str, str], list[dict]] = defaultdict(list)
    for r in long_rows:
        groups[(r["policy"], r["metric"])].append(r)
    for (policy, metric), rows in sorted(groups.items()):
        rows = sorted(rows, key=lambda r: r["episode"])[-window:]
        out.append({"policy": policy, "metric": metric, "mean": float(np.mean([r["mean"] for r in rows])),
                    "std": float(np.mean([r["std"] for r in rows]))})
    return out


# -- UAV-count sweep ------------------------------------------------------------

def uav_count_sweep(spec: ExperimentSpec, n_list=(2, 4, 6, 8), force: bool = False) -> list[dict]:
    """For each N: train (learned policies) with fusion on, then evaluate the
    policy greedily with fusion on and off. Baselines are simply played."""
    prepare_output(spec.out, force)
    rows = []
    for n in n_list:
        env_n = dataclasses.replace(spec.env, n_uavs=n, uav_init=None, fusion=True)
        sub = dataclasses.replace(spec, env=env_n, out=spec.out / f"n{n}", scenario=f"{spec.scenario}-n{n}")
        sub.out.mkdir(parents=True, exist_ok=True)
        for seed in spec.seeds:
            env_cfg, tcfg = sub.resolved()
            agents = None
            if spec.policy in LEARNED_POLICIES:
                agents = train(env_cfg, tcfg, seed).agents
            for mode, fusion in (("fusion", True), ("bs_only", False)):
                cfg = dataclasses.replace(env_cfg, fusion=fusion)
                if agents is not None:
                    evals = evaluate_agents(agents, cfg, seed, max(tcfg.eval_episodes, 1))
                else:
                    env = IsacEnv(cfg)
                    evals = [run_episode(env, _baseline(sub, stream(seed, EVAL_ROUND, e, ACT_STREAM)),
                                         stream_seed(seed, EVAL_ROUND, e, ENV_STREAM))
                             for e in range(max(tcfg.eval_episodes, 1))]
                s = _eval_summary(evals)
                rows.append({"n_uavs": n, "mode": mode, "seed": seed, "mean_rho": s["mean_rho"],
                             "violation_rate": s["violation_rate"]})
    write_csv(spec.out / "sweep.csv", SWEEP_SCHEMA, rows, ["n_uavs", "mode", "seed", "mean_rho", "violation_rate"],
              f"policy={spec.policy}")
    return rows
