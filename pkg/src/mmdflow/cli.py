"""Config-driven command line for flows, distillation, sampling and checks.

Subcommands: simulate, distill, generate, eval, bench, y-drift. Exit codes:
0 success, 2 configuration error, 3 numerical divergence, 4 evaluation
failure. All outputs of config-driven commands land in
output_dir/run_<name>/ together with a copy of the normalized config, and
contain no timestamps, so a rerun with the same seed reproduces every file
byte for byte.

Heavy imports happen inside the command functions: --threads must pin the
BLAS pool sizes through environment variables before numpy first loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _write_lines(path, lines):
    with open(path, "w") as fh:
        for line in lines:
            fh.write(line + "\n")


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fmt(v) -> str:
    return repr(float(v))


# ---------------------------------------------------------------------------
# shared config plumbing
# ---------------------------------------------------------------------------

def _load_run_config(args):
    import dataclasses

    from .config import ConfigError, load_config

    path = getattr(args, "config", None)
    from_run = getattr(args, "from_run", None)
    if from_run:
        path = Path(from_run) / "config.json"
    if not path:
        raise ConfigError("", "a --config file is required")
    config = load_config(path)
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def _prepare_run_dir(config, args):
    from .config import save_config

    run_dir = config.run_dir(getattr(args, "out", None))
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, run_dir / "config.json")
    return run_dir


def _build_flow_inputs(config):
    from .config import build_latents, build_problem, stage_schedules
    from .flow import ParticleEnsemble, TargetSample

    ds, oracle = build_problem(config)
    latents = build_latents(config, ds.d, ds.x.shape[0])
    targets = TargetSample(positions=ds.x, conditions=ds.y)
    init = ParticleEnsemble(positions=latents, conditions=ds.y)
    schedules = stage_schedules(config, ds.x, latents.shape[0])
    return ds, oracle, init, targets, schedules


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    import numpy as np

    from .flow import run_staged_conditional_flow, trajectory_to_csv
    from .kernels import mmd_sq

    config = _load_run_config(args)
    run_dir = _prepare_run_dir(config, args)
    ds, _, init, targets, schedules = _build_flow_inputs(config)
    traj = run_staged_conditional_flow(
        init, targets, schedules, record_every=config.flow["record_every"]
    )

    trajectory_to_csv(traj, run_dir / "trajectory.csv")
    target_joint = np.concatenate([targets.positions, targets.conditions], axis=1)
    series = []
    for step, pos in traj.snapshots:
        value = mmd_sq(np.concatenate([pos, traj.conditions], axis=1), target_joint)
        series.append(f"{step},{_fmt(value)}")
    _write_lines(run_dir / "mmd_series.csv", ["step,mmd_sq"] + series)

    ratio = (traj.final_mmd_sq / traj.initial_mmd_sq
             if traj.initial_mmd_sq > 0 else None)
    _write_json(
        run_dir / "summary.json",
        {
            "command": "simulate",
            "n_particles": int(init.positions.shape[0]),
            "n_targets": int(targets.positions.shape[0]),
            "d": int(ds.d),
            "n": int(ds.n),
            "steps_total": int(sum(s.steps for s in schedules)),
            "snapshots": len(traj.snapshots),
            "initial_mmd_sq": traj.initial_mmd_sq,
            "final_mmd_sq": traj.final_mmd_sq,
            "final_over_initial": ratio,
        },
    )
    print(f"simulate: {len(traj.snapshots)} snapshots -> {run_dir}")
    return 0


def cmd_distill(args) -> int:
    from .config import train_config
    from .surrogate import distill, save_stack

    config = _load_run_config(args)
    run_dir = _prepare_run_dir(config, args)
    _, _, init, targets, schedules = _build_flow_inputs(config)
    stack, info = distill(targets, init.positions, schedules, train_config(config))

    save_stack(stack, run_dir / "stack.json")
    rows = ["stage,epoch,loss"]
    for stage_index, history in enumerate(stack.loss_history):
        for epoch, loss in enumerate(history):
            rows.append(f"{stage_index},{epoch},{_fmt(loss)}")
    _write_lines(run_dir / "loss_history.csv", rows)
    _write_json(
        run_dir / "summary.json",
        {
            "command": "distill",
            "stages": len(stack.regressors),
            "stage_losses": [float(v) for v in info["stage_losses"]],
            "epochs_run": [r.meta.get("epochs_run") for r in stack.regressors],
        },
    )
    print(f"distill: {len(stack.regressors)} stages -> {run_dir}")
    return 0


def _parse_inline_y(text):
    from .config import ConfigError

    try:
        return [float(part) for part in text.split(",")]
    except ValueError:
        raise ConfigError("y", f"could not parse condition vector {text!r}")


def _read_conditions_file(path):
    import numpy as np

    from .config import ConfigError

    p = Path(path)
    if not p.exists():
        raise ConfigError("conditions-file", f"no such file: {path}")
    with open(p) as fh:
        header = fh.readline().strip().split(",")
    if not header or not all(c.startswith("y_") for c in header):
        raise ConfigError("conditions-file", "header must contain only y_* columns")
    data = np.loadtxt(p, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != len(header):
        raise ConfigError("conditions-file", "row width does not match header")
    return [row.tolist() for row in data]


def cmd_generate(args) -> int:
    import numpy as np

    from .config import ConfigError
    from .problems import latent_sampler
    from .streams import substream
    from .surrogate import compose_apply, load_stack

    try:
        stack = load_stack(args.stack)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError("stack", f"cannot load stack: {exc}")

    conditions = []
    if args.y is not None:
        conditions.append(_parse_inline_y(args.y))
    if args.conditions_file is not None:
        conditions.extend(_read_conditions_file(args.conditions_file))
    config = None
    if args.config is not None:
        config = _load_run_config(args)
        if not conditions and config.evaluation is not None:
            conditions = [list(c) for c in config.evaluation["conditions"]]
    if not conditions:
        raise ConfigError("y", "no conditions given (use --y, --conditions-file, "
                               "or a config with an evaluation section)")
    for i, cond in enumerate(conditions):
        if len(cond) != stack.n:
            raise ConfigError(f"conditions[{i}]",
                              f"stack expects {stack.n} condition entries, got {len(cond)}")

    count = args.count
    if count < 1:
        raise ConfigError("count", "must be >= 1")
    seed = args.seed if args.seed is not None else 0

    if args.out_file is not None:
        out_path = Path(args.out_file)
    elif config is not None:
        out_path = _prepare_run_dir(config, args) / "samples.csv"
    else:
        out_path = Path(args.stack).parent / "samples.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)

    header = ",".join([f"x_{i}" for i in range(stack.d)]
                      + [f"y_{j}" for j in range(stack.n)])
    lines = [header]
    for i, cond in enumerate(conditions):
        child = int(substream(seed, "generate", i).integers(0, 2**63))
        z = latent_sampler(args.latent, d=stack.d, N=count, seed=child)
        x = compose_apply(stack, z, np.asarray(cond, dtype=np.float64))
        for row in range(count):
            values = [_fmt(v) for v in x[row]] + [_fmt(v) for v in cond]
            lines.append(",".join(values))
    _write_lines(out_path, lines)
    print(f"generate: {len(conditions)} conditions x {count} samples -> {out_path}")
    return 0


def cmd_eval(args) -> int:
    import numpy as np

    from .config import ConfigError, build_problem
    from .metrics import posterior_error, write_reports_jsonl
    from .problems import read_dataset_csv

    config = _load_run_config(args)
    _, oracle = build_problem(config)

    path = Path(args.samples)
    if not path.exists():
        raise ConfigError("samples", f"no such file: {args.samples}")
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    expected = [f"x_{i}" for i in range(oracle.d)] + [f"y_{j}" for j in range(oracle.n)]
    for col in expected:
        if col not in header:
            raise ConfigError("samples", f"missing column {col}")
    if len(header) != len(expected):
        extra = [c for c in header if c not in expected]
        raise ConfigError("samples", f"unexpected columns {extra}")
    x, y = read_dataset_csv(path)

    pairs = []
    for uy in np.unique(y, axis=0):
        mask = np.all(y == uy, axis=1)
        pairs.append((uy, x[mask]))

    ev = config.evaluation or {}
    report = posterior_error(
        pairs,
        oracle,
        mean_tol=ev.get("mean_tol", 0.15),
        std_tol=ev.get("std_tol", 0.2),
    )
    out_path = (Path(args.out_file) if args.out_file
                else path.parent / "reports.jsonl")
    write_reports_jsonl([report], out_path)
    status = "pass" if report.passed else "FAIL"
    print(f"eval: posterior_error value={report.value:.4f} [{status}] -> {out_path}")
    return 0 if report.passed else 4


def cmd_bench(args) -> int:
    import numpy as np

    from .config import ConfigError
    from .kernels import grad_full
    from .slicing import grad_1d_sorted
    from .streams import substream

    try:
        sizes = [int(s) for s in args.sizes.split(",")]
    except ValueError:
        raise ConfigError("sizes", f"could not parse size list {args.sizes!r}")
    if len(sizes) < 2 or any(s < 2 for s in sizes):
        raise ConfigError("sizes", "need at least two sizes, each >= 2")
    reps = args.reps
    if reps < 1:
        raise ConfigError("reps", "must be >= 1")

    methods = {
        "grad_1d_sorted": lambda x, p: grad_1d_sorted(x, p),
        "grad_full": lambda x, p: grad_full(x[:, None], p[:, None]),
    }
    rows = ["method,N,median_seconds,reps"]
    medians = {name: [] for name in methods}
    for size in sizes:
        rng = substream(args.seed, "bench", size)
        x = rng.normal(size=size)
        p = rng.normal(size=size)
        for name, fn in methods.items():
            fn(x, p)  # warm-up outside the timed region
            times = []
            for _ in range(reps):
                t0 = time.perf_counter()
                fn(x, p)
                times.append(time.perf_counter() - t0)
            med = float(np.median(times))
            medians[name].append(med)
            rows.append(f"{name},{size},{_fmt(med)},{reps}")

    out_path = Path(args.out_file) if args.out_file else Path("bench.csv")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _write_lines(out_path, rows)
    slopes = {}
    logs = np.log10(np.asarray(sizes, dtype=np.float64))
    for name, meds in medians.items():
        slopes[name] = float(np.polyfit(logs, np.log10(np.asarray(meds)), 1)[0])
    _write_json(out_path.with_name(out_path.stem + "_summary.json"),
                {"command": "bench", "sizes": sizes, "reps": reps, "slopes": slopes})
    for name, slope in slopes.items():
        print(f"bench: {name} log-log slope {slope:.3f}")
    return 0


def cmd_ydrift(args) -> int:
    import numpy as np

    from .flow import measure_y_drift

    config = _load_run_config(args)
    run_dir = _prepare_run_dir(config, args)
    _, _, init, targets, schedules = _build_flow_inputs(config)
    drift = measure_y_drift(
        init,
        targets,
        schedules[0],
        record_every=config.flow["record_every"],
        freeze_conditions=args.freeze,
    )
    rows = ["step,ratio"] + [f"{int(step)},{_fmt(ratio)}" for step, ratio in drift]
    _write_lines(run_dir / "ydrift.csv", rows)
    _write_json(
        run_dir / "summary.json",
        {
            "command": "y-drift",
            "frozen": bool(args.freeze),
            "steps": int(schedules[0].steps),
            "mean_ratio": float(np.mean(drift[:, 1])) if len(drift) else None,
            "max_ratio": float(np.max(drift[:, 1])) if len(drift) else None,
        },
    )
    print(f"y-drift: {len(drift)} checkpoints -> {run_dir}")
    return 0


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmdflow",
        description="Conditional MMD particle flows: simulate, distill, sample, check.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="override the config's global seed")
    common.add_argument("--threads", type=int, default=None,
                        help="pin BLAS/OpenMP thread count")

    cfg = argparse.ArgumentParser(add_help=False)
    cfg.add_argument("--config", help="path to a run config JSON")
    cfg.add_argument("--out", default=None, help="override the config's output_dir")

    p = sub.add_parser("simulate", parents=[common, cfg],
                       help="run the staged conditional flow and record it")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("distill", parents=[common, cfg],
                       help="flow stage by stage and fit surrogate networks")
    p.add_argument("--from-run", default=None,
                   help="reuse the config copied into a previous run directory")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("generate", parents=[common, cfg],
                       help="sample from a trained surrogate stack")
    p.add_argument("--stack", required=True, help="stack JSON written by distill")
    p.add_argument("--y", default=None, help="inline condition vector, comma-separated")
    p.add_argument("--conditions-file", default=None,
                   help="CSV of conditions with y_* columns")
    p.add_argument("--count", type=int, default=2000, help="samples per condition")
    p.add_argument("--latent", choices=("gaussian", "uniform"), default="gaussian")
    p.add_argument("--out-file", default=None, help="output CSV path")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", parents=[common, cfg],
                       help="compare generated samples against the problem's oracle")
    p.add_argument("--samples", required=True, help="samples CSV with x_*/y_* columns")
    p.add_argument("--out-file", default=None, help="reports JSONL path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common],
                       help="time the sorted 1-D gradient against the full one")
    p.add_argument("--sizes", default="1000,10000,100000",
                   help="comma-separated particle counts")
    p.add_argument("--reps", type=int, default=3, help="repetitions per size")
    p.add_argument("--out-file", default=None, help="timing CSV path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("y-drift", parents=[common, cfg],
                       help="measure condition drift when the y-block is released")
    p.add_argument("--freeze", action="store_true",
                   help="zero the condition gradient (ratio must be exactly 0)")
    p.set_defaults(func=cmd_ydrift)

    return parser


def entry(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", None):
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)
    if args.func is cmd_bench and args.seed is None:
        args.seed = 0

    from .config import ConfigError
    from .flow import FlowDivergenceError
    from .surrogate import TrainingDivergedError

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FlowDivergenceError, TrainingDivergedError) as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(entry())
