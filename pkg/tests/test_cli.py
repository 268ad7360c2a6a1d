"""End-to-end CLI behavior: configs, runs, artifacts, exit codes."""

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mmdflow.cli import entry
from mmdflow.config import ConfigError, load_config, parse_config
from mmdflow.problems import latent_sampler, read_dataset_csv
from mmdflow.streams import substream
from mmdflow.surrogate import SurrogateStack, compose_apply, init_regressor, load_stack, save_stack


def make_config(tmp_path, name="t", seed=7, output=None, steps=30, stages=None, **over):
    doc = {
        "schema_version": 1,
        "name": name,
        "seed": seed,
        "output_dir": str(output or (tmp_path / "out")),
        "problem": {
            "generator": "linear_gaussian",
            "parameters": {"a": 1.0, "sigma": 1.0, "prior_std": 1.0, "N": 64},
        },
        "latent": {"kind": "gaussian"},
        "flow": {
            "record_every": 10,
            "stages": stages
            if stages is not None
            else [{"tau": 0.002, "momentum": 0.9, "steps": steps, "projections": 16}],
        },
        "surrogate": {
            "hidden": [8],
            "epochs": 60,
            "batch_size": 64,
            "learning_rate": 0.05,
            "momentum": 0.9,
            "stop_loss": 0.0,
        },
        "evaluation": {
            "conditions": [0.0, 1.0],
            "count": 200,
            "mean_tol": 0.15,
            "std_tol": 0.2,
        },
    }
    doc.update(over)
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(doc))
    return path, doc


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

def test_config_round_trip(tmp_path):
    path, _ = make_config(tmp_path)
    config = load_config(path)
    assert parse_config(config.serialize()) == config


def test_stage_plan_expansion(tmp_path):
    path, _ = make_config(
        tmp_path,
        stages={"count": 3, "base_steps": 100, "cap": 250, "tau": 0.01,
                "projections": 32},
    )
    config = load_config(path)
    assert [s["steps"] for s in config.flow["stages"]] == [100, 200, 250]
    assert all(s["tau"] == 0.01 and s["projections"] == 32
               for s in config.flow["stages"])
    assert parse_config(config.serialize()) == config


def test_config_errors_carry_field_paths(tmp_path):
    path, doc = make_config(tmp_path)
    doc["flow"]["stages"][0]["tau"] = -1.0
    path.write_text(json.dumps(doc))
    with pytest.raises(ConfigError) as exc:
        load_config(path)
    assert exc.value.path == "flow.stages[0].tau"

    doc["flow"]["stages"][0]["tau"] = 0.01
    del doc["seed"]
    path.write_text(json.dumps(doc))
    with pytest.raises(ConfigError) as exc:
        load_config(path)
    assert exc.value.path == "seed"


def test_invalid_config_exits_2_with_path(tmp_path, capsys):
    path, doc = make_config(tmp_path)
    doc["surrogate"]["momentum"] = 1.5
    path.write_text(json.dumps(doc))
    code = entry(["simulate", "--config", str(path)])
    assert code == 2
    assert "surrogate.momentum" in capsys.readouterr().err


def test_unknown_generator_rejected(tmp_path):
    path, doc = make_config(tmp_path)
    doc["problem"]["generator"] = "mystery"
    path.write_text(json.dumps(doc))
    with pytest.raises(ConfigError) as exc:
        load_config(path)
    assert exc.value.path == "problem.generator"


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def run_dir_for(path):
    config = load_config(path)
    return config.run_dir()


def test_simulate_zero_steps_single_snapshot(tmp_path):
    path, _ = make_config(tmp_path, name="zero", steps=0)
    assert entry(["simulate", "--config", str(path)]) == 0
    rd = run_dir_for(path)
    lines = (rd / "trajectory.csv").read_text().strip().splitlines()
    assert lines[0] == "step,particle_id,coordinate_index,value"
    assert len(lines) == 1 + 64  # one row per particle coordinate, d=1
    assert all(line.startswith("0,") for line in lines[1:])
    summary = json.loads((rd / "summary.json").read_text())
    assert summary["initial_mmd_sq"] == summary["final_mmd_sq"]
    series = (rd / "mmd_series.csv").read_text().strip().splitlines()
    assert len(series) == 2


def test_simulate_rerun_byte_identical(tmp_path):
    path, _ = make_config(tmp_path, name="det")
    assert entry(["simulate", "--config", str(path), "--out", str(tmp_path / "o1")]) == 0
    assert entry(["simulate", "--config", str(path), "--out", str(tmp_path / "o2")]) == 0
    for fname in ("config.json", "trajectory.csv", "mmd_series.csv", "summary.json"):
        a = (tmp_path / "o1" / "run_det" / fname).read_bytes()
        b = (tmp_path / "o2" / "run_det" / fname).read_bytes()
        assert a == b, fname


def test_simulate_multi_stage_steps_accumulate(tmp_path):
    stages = [
        {"tau": 0.002, "momentum": 0.9, "steps": 10, "projections": 8},
        {"tau": 0.002, "momentum": 0.9, "steps": 10, "projections": 8},
    ]
    path, _ = make_config(tmp_path, name="multi", stages=stages)
    assert entry(["simulate", "--config", str(path)]) == 0
    series = (run_dir_for(path) / "mmd_series.csv").read_text().strip().splitlines()
    steps = [int(line.split(",")[0]) for line in series[1:]]
    assert steps == [0, 10, 20]


def test_simulate_divergence_exit_3(tmp_path, capsys):
    stages = [{"tau": 1e9, "momentum": 0.0, "steps": 50, "projections": 8}]
    path, _ = make_config(tmp_path, name="boom", stages=stages)
    code = entry(["simulate", "--config", str(path)])
    assert code == 3
    assert "diverge" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# distill
# ---------------------------------------------------------------------------

def test_distill_zero_displacement_near_zero_loss(tmp_path):
    stages = [{"tau": 0.002, "momentum": 0.9, "steps": 0, "projections": 8}]
    path, _ = make_config(
        tmp_path, name="zd", stages=stages,
        surrogate={"hidden": [16], "epochs": 3000, "batch_size": 64,
                   "learning_rate": 0.2, "momentum": 0.9, "stop_loss": 1e-7},
    )
    assert entry(["distill", "--config", str(path)]) == 0
    rd = run_dir_for(path)
    summary = json.loads((rd / "summary.json").read_text())
    assert summary["stage_losses"][0] < 1e-6
    history = (rd / "loss_history.csv").read_text().strip().splitlines()
    assert history[0] == "stage,epoch,loss"
    assert len(history) > 1


def test_distill_stack_reload_bitwise(tmp_path):
    path, _ = make_config(tmp_path, name="rl", steps=10)
    assert entry(["distill", "--config", str(path)]) == 0
    stack_path = run_dir_for(path) / "stack.json"
    stack = load_stack(stack_path)
    rng = np.random.default_rng(0)
    z = rng.normal(size=(32, stack.d))
    y = rng.normal(size=(32, stack.n))
    out1 = compose_apply(stack, z, y)
    copy_path = tmp_path / "copy.json"
    save_stack(stack, copy_path)
    out2 = compose_apply(load_stack(copy_path), z, y)
    assert out1.tobytes() == out2.tobytes()


def test_distill_from_run_reuses_config(tmp_path):
    path, _ = make_config(tmp_path, name="fr", steps=10)
    assert entry(["simulate", "--config", str(path)]) == 0
    rd = run_dir_for(path)
    assert entry(["distill", "--from-run", str(rd)]) == 0
    assert (rd / "stack.json").exists()


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def zero_stack_file(tmp_path, d=1, n=1):
    reg = init_regressor(d, n, (4,), np.random.default_rng(0))
    for w in reg.weights:
        w[:] = 0.0
    for b in reg.biases:
        b[:] = 0.0
    stack = SurrogateStack(regressors=[reg], d=d, n=n)
    path = tmp_path / "zero_stack.json"
    save_stack(stack, path)
    return path


def test_generate_identity_stack_returns_latents(tmp_path):
    stack_path = zero_stack_file(tmp_path)
    out = tmp_path / "samples.csv"
    code = entry(["generate", "--stack", str(stack_path), "--y", "0.5",
                  "--count", "50", "--seed", "3", "--out-file", str(out)])
    assert code == 0
    x, y = read_dataset_csv(out)
    child = int(substream(3, "generate", 0).integers(0, 2**63))
    expected = latent_sampler("gaussian", d=1, N=50, seed=child)
    assert x.tobytes() == expected.tobytes()
    assert np.all(y == 0.5)


def test_generate_dimension_mismatch_exit_2(tmp_path, capsys):
    stack_path = zero_stack_file(tmp_path)
    code = entry(["generate", "--stack", str(stack_path), "--y", "0.5,1.0",
                  "--count", "10", "--out-file", str(tmp_path / "s.csv")])
    assert code == 2
    assert "condition" in capsys.readouterr().err


def test_generate_conditions_file(tmp_path):
    stack_path = zero_stack_file(tmp_path)
    cf = tmp_path / "conds.csv"
    cf.write_text("y_0\n-1.0\n2.0\n")
    out = tmp_path / "s.csv"
    code = entry(["generate", "--stack", str(stack_path), "--conditions-file",
                  str(cf), "--count", "20", "--seed", "1", "--out-file", str(out)])
    assert code == 0
    x, y = read_dataset_csv(out)
    assert x.shape == (40, 1)
    assert set(np.unique(y)) == {-1.0, 2.0}


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def write_samples_csv(path, oracle, y_values, count, shift=0.0, seed=0):
    rng = substream(seed, "eval-samples")
    lines = ["x_0,y_0"]
    for yv in y_values:
        draws = oracle.sample(np.array([yv]), count, rng) + shift
        for v in draws[:, 0]:
            lines.append(f"{float(v)!r},{float(yv)!r}")
    path.write_text("\n".join(lines) + "\n")


def oracle_for(path):
    from mmdflow.config import build_problem

    return build_problem(load_config(path))[1]


def test_eval_oracle_samples_pass(tmp_path):
    path, _ = make_config(tmp_path, name="ev")
    oracle = oracle_for(path)
    samples = tmp_path / "good.csv"
    write_samples_csv(samples, oracle, [0.0, 1.0], 2000)
    code = entry(["eval", "--samples", str(samples), "--config", str(path)])
    assert code == 0
    report = json.loads((tmp_path / "reports.jsonl").read_text().strip())
    assert report["passed"] is True


def test_eval_shifted_samples_fail_exit_4(tmp_path):
    path, _ = make_config(tmp_path, name="ev2")
    oracle = oracle_for(path)
    samples = tmp_path / "bad.csv"
    shift = float(oracle.std(np.array([0.0]))[0])
    write_samples_csv(samples, oracle, [0.0], 2000, shift=shift)
    out = tmp_path / "r.jsonl"
    code = entry(["eval", "--samples", str(samples), "--config", str(path),
                  "--out-file", str(out)])
    assert code == 4
    report = json.loads(out.read_text().strip())
    cond = report["context"]["per_condition"][0]
    assert abs(cond["mean_err"] - 1.0) < 0.1


def test_eval_missing_column_exit_2(tmp_path, capsys):
    path, _ = make_config(tmp_path, name="ev3")
    samples = tmp_path / "cols.csv"
    samples.write_text("x_0\n1.0\n2.0\n")
    code = entry(["eval", "--samples", str(samples), "--config", str(path)])
    assert code == 2
    assert "y_0" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def test_bench_single_rep_emits_medians(tmp_path):
    out = tmp_path / "bench.csv"
    code = entry(["bench", "--sizes", "64,128", "--reps", "1",
                  "--out-file", str(out)])
    assert code == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "method,N,median_seconds,reps"
    assert len(lines) == 1 + 4
    summary = json.loads((tmp_path / "bench_summary.json").read_text())
    assert set(summary["slopes"]) == {"grad_1d_sorted", "grad_full"}


def test_bench_size_guard(tmp_path, capsys):
    code = entry(["bench", "--sizes", "64", "--reps", "1",
                  "--out-file", str(tmp_path / "b.csv")])
    assert code == 2
    assert "sizes" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# y-drift
# ---------------------------------------------------------------------------

def test_ydrift_frozen_all_zero(tmp_path):
    path, _ = make_config(tmp_path, name="yd", steps=20)
    code = entry(["y-drift", "--config", str(path), "--freeze"])
    assert code == 0
    rd = run_dir_for(path)
    lines = (rd / "ydrift.csv").read_text().strip().splitlines()
    assert lines[0] == "step,ratio"
    ratios = [float(line.split(",")[1]) for line in lines[1:]]
    assert ratios and all(r == 0.0 for r in ratios)
    summary = json.loads((rd / "summary.json").read_text())
    assert summary["frozen"] is True
    assert summary["mean_ratio"] == 0.0


def test_ydrift_free_runs(tmp_path):
    path, _ = make_config(tmp_path, name="ydf", steps=20)
    assert entry(["y-drift", "--config", str(path)]) == 0
    summary = json.loads((run_dir_for(path) / "summary.json").read_text())
    assert summary["frozen"] is False
    assert summary["mean_ratio"] > 0.0


# ---------------------------------------------------------------------------
# full pipeline determinism
# ---------------------------------------------------------------------------

def run_pipeline(tmp_path, config_path, out_dir):
    assert entry(["simulate", "--config", str(config_path), "--out", str(out_dir)]) == 0
    assert entry(["distill", "--config", str(config_path), "--out", str(out_dir)]) == 0
    stack = out_dir / "run_pipe" / "stack.json"
    samples = out_dir / "run_pipe" / "samples.csv"
    assert entry(["generate", "--stack", str(stack), "--config", str(config_path),
                  "--count", "40", "--seed", "5", "--out-file", str(samples)]) == 0
    return out_dir / "run_pipe"


def test_pipeline_rerun_byte_identical(tmp_path):
    stages = [
        {"tau": 0.002, "momentum": 0.9, "steps": 8, "projections": 8},
        {"tau": 0.002, "momentum": 0.9, "steps": 8, "projections": 8},
    ]
    path, _ = make_config(
        tmp_path, name="pipe", stages=stages,
        surrogate={"hidden": [8], "epochs": 30, "batch_size": 64,
                   "learning_rate": 0.05, "momentum": 0.9, "stop_loss": 0.0},
    )
    rd1 = run_pipeline(tmp_path, path, tmp_path / "p1")
    rd2 = run_pipeline(tmp_path, path, tmp_path / "p2")
    for fname in ("trajectory.csv", "stack.json", "samples.csv"):
        assert (rd1 / fname).read_bytes() == (rd2 / fname).read_bytes(), fname


# ---------------------------------------------------------------------------
# process-level invocation
# ---------------------------------------------------------------------------

def test_module_invocation_subprocess(tmp_path):
    path, _ = make_config(tmp_path, name="sub", steps=5)
    result = subprocess.run(
        [sys.executable, "-m", "mmdflow.cli", "simulate", "--config", str(path),
         "--threads", "1"],
        capture_output=True, text=True,
    )
    assert result.returncode == 0, result.stderr
    assert (run_dir_for(path) / "summary.json").exists()
