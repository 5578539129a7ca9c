import dataclasses
import json

import numpy as np
import pytest

from uavisac.cli import EXIT_EXISTS, EXIT_OK, EXIT_USAGE, main
from uavisac.config import EnvConfig, GaConfig, TrainerConfig
from uavisac.harness import (
    METRICS_SCHEMA,
    ExperimentSpec,
    SchemaMismatch,
    aggregate,
    read_csv,
    run,
    spec_from_config_file,
    uav_count_sweep,
    write_csv,
)

TINY_FLAGS = ["--slots", "4", "--episodes", "2", "--workers", "2", "--hidden", "8", "--epochs", "1"]


def tiny_spec(out, policy="chappo", seeds=(0,)):
    return ExperimentSpec(policy=policy, seeds=list(seeds), out=out, env=EnvConfig(slots=4),
                          trainer=TrainerConfig(episodes=2, workers=2, hidden=8, epochs=1),
                          ga=GaConfig(population=4, generations=1))


def test_cli_smoke_writes_artifacts(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--policy", "chappo", "--seeds", "0", "--out", str(out), *TINY_FLAGS]) == EXIT_OK
    comment, fields, rows = read_csv(out / "metrics_seed0.csv")
    assert comment.startswith(METRICS_SCHEMA)
    assert len(rows) == 2
    assert fields[0] == "episode"
    _, _, trace = read_csv(out / "trace_seed0.csv")
    assert len(trace) == 4
    assert (out / "checkpoints" / "seed0" / "final.ckpt").exists()
    summary = json.loads((out / "summary_seed0.json").read_text())
    assert summary["policy"] == "chappo"


def test_cli_refuses_existing_output_without_force(tmp_path):
    out = tmp_path / "run"
    args = ["run", "--policy", "random", "--out", str(out), *TINY_FLAGS]
    assert main(args) == EXIT_OK
    assert main(args) == EXIT_EXISTS
    assert main(args + ["--force"]) == EXIT_OK


def test_cli_usage_errors(tmp_path):
    assert main(["run", "--out", str(tmp_path / "a"), "--slots", "zero"]) == EXIT_USAGE
    with pytest.raises(SystemExit):
        main(["run", "--policy", "nonsense", "--out", str(tmp_path / "b")])


def test_cli_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("UAVISAC_OUTPUT_ROOT", str(tmp_path))
    assert main(["run", "--policy", "random", "--out", "rel", *TINY_FLAGS]) == EXIT_OK
    assert (tmp_path / "rel" / "metrics_seed0.csv").exists()


def test_same_seed_gives_identical_metrics(tmp_path):
    run(tiny_spec(tmp_path / "a"))
    run(tiny_spec(tmp_path / "b"))
    assert (tmp_path / "a" / "metrics_seed0.csv").read_bytes() == (tmp_path / "b" / "metrics_seed0.csv").read_bytes()


def test_config_round_trip(tmp_path):
    spec = tiny_spec(tmp_path / "a", policy="nqr", seeds=(3, 4))
    run(spec)
    again = spec_from_config_file(tmp_path / "a" / "config.json", out=tmp_path / "b")
    assert again.policy == "nqr"
    assert again.seeds == [3, 4]
    assert again.fingerprint == spec.fingerprint


def test_cli_config_file_reproduces_run(tmp_path):
    assert main(["run", "--policy", "random", "--seeds", "2", "--out", str(tmp_path / "a"), *TINY_FLAGS]) == EXIT_OK
    assert main(["run", "--config", str(tmp_path / "a" / "config.json"), "--out", str(tmp_path / "b")]) == EXIT_OK
    assert (tmp_path / "a" / "metrics_seed2.csv").read_bytes() == (tmp_path / "b" / "metrics_seed2.csv").read_bytes()


def test_fingerprints_differ_across_ablations(tmp_path):
    fps = {p: tiny_spec(tmp_path, policy=p).fingerprint for p in ("chappo", "happo", "ncl", "nkr", "nqr", "random")}
    assert len(set(fps.values())) == len(fps)


def test_aggregate_single_run_and_zero_std(tmp_path):
    run(tiny_spec(tmp_path / "a", policy="random"))
    run(tiny_spec(tmp_path / "b", policy="random"))
    rows = aggregate([tmp_path / "a", tmp_path / "b"], tmp_path / "agg")
    assert all(r["std"] == 0.0 and r["n"] == 2 for r in rows)
    single = aggregate([tmp_path / "a"])
    _, _, metrics = read_csv(tmp_path / "a" / "metrics_seed0.csv")
    first = next(r for r in single if r["episode"] == 1 and r["metric"] == "mean_rho")
    assert first["mean"] == metrics[0]["mean_rho"]
    assert (tmp_path / "agg" / "plot_data.csv").exists()
    assert (tmp_path / "agg" / "summary.csv").exists()


def test_aggregate_hand_mean(tmp_path):
    fields = ["episode", "level", "mean_reward", "mean_rho", "violation_rate", "rmse_x", "rmse_y", "rmse_z"]
    for i, rho in enumerate([1.0, 2.0, 6.0]):
        d = tmp_path / f"r{i}"
        d.mkdir()
        write_csv(d / "metrics_seed0.csv", METRICS_SCHEMA, [dict.fromkeys(fields, 0.0) | {"episode": 1, "mean_rho": rho}],
                  fields, "policy=chappo")
    rows = aggregate([tmp_path / f"r{i}" for i in range(3)])
    r = next(r for r in rows if r["metric"] == "mean_rho")
    assert r["mean"] == pytest.approx(3.0)
    assert r["std"] == pytest.approx(np.std([1.0, 2.0, 6.0]))


def test_aggregate_schema_mismatch(tmp_path):
    d = tmp_path / "bad"
    d.mkdir()
    write_csv(d / "metrics_seed0.csv", "other/9", [{"episode": 1}], ["episode"], "policy=x")
    with pytest.raises(SchemaMismatch):
        aggregate([d])
    assert main(["aggregate", str(d), "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_sweep_data_points(tmp_path):
    spec = tiny_spec(tmp_path / "sweep", policy="chappo")
    spec = dataclasses.replace(spec, trainer=dataclasses.replace(spec.trainer, episodes=1))
    rows = uav_count_sweep(spec, n_list=(2, 3))
    assert [(r["n_uavs"], r["mode"]) for r in rows] == [(2, "fusion"), (2, "bs_only"), (3, "fusion"), (3, "bs_only")]
    assert all(np.isfinite(r["mean_rho"]) and r["mean_rho"] > 0 for r in rows)
    assert (tmp_path / "sweep" / "sweep.csv").exists()
