"""Evaluation metrics for flows and samplers.

Includes the exact 1-D Wasserstein-1 distance for equal-size empirical
measures (sorting coupling), a property sweep checking mmd_sq <= W1 on
random pairs, per-condition posterior moment errors against an oracle,
and a rank-correlation harness comparing joint discrepancy with the
condition-averaged posterior discrepancy along a trajectory. Reports are
serialized one JSON object per line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .kernels import mmd_sq
from .streams import substream


@dataclass(frozen=True)
class MetricReport:
    """One named metric value with its pass criterion and context."""

    name: str
    value: float
    tolerance: float
    passed: bool
    context: dict = field(default_factory=dict)


def report_to_json_line(report: MetricReport) -> str:
    return json.dumps(
        {
            "name": report.name,
            "value": report.value,
            "tolerance": report.tolerance,
            "passed": report.passed,
            "context": report.context,
        }
    )


def write_reports_jsonl(reports, path) -> None:
    with open(path, "w") as fh:
        for r in reports:
            fh.write(report_to_json_line(r) + "\n")


# ---------------------------------------------------------------------------
# 1-D Wasserstein for equal-size samples
# ---------------------------------------------------------------------------

def w1_sorted(a, b) -> float:
    """W1 between equal-size 1-D empirical measures: sort both, average the
    coordinate gaps. Unequal sizes are out of scope."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape or a.size == 0:
        raise ValueError("w1_sorted needs two non-empty samples of equal size")
    return float(np.mean(np.abs(np.sort(a) - np.sort(b))))


def check_mmd_w1_bound(trials, N, seed) -> MetricReport:
    """Sweeps random equal-size 1-D pairs and records the largest value of
    mmd_sq - w1, which must stay below 1e-9."""
    rng = substream(seed, "mmd_w1_bound")
    worst = -np.inf
    for _ in range(int(trials)):
        scale = float(rng.uniform(0.2, 5.0))
        shift = float(rng.uniform(-3.0, 3.0))
        a = rng.normal(size=(int(N), 1)) * scale
        b = rng.normal(size=(int(N), 1)) * scale + shift
        worst = max(worst, mmd_sq(a, b) - w1_sorted(a[:, 0], b[:, 0]))
    return MetricReport(
        name="mmd_sq_le_w1",
        value=float(worst),
        tolerance=1e-9,
        passed=bool(worst <= 1e-9),
        context={"trials": int(trials), "N": int(N), "seed": int(seed)},
    )


# ---------------------------------------------------------------------------
# posterior moment errors
# ---------------------------------------------------------------------------

def posterior_error(samples_by_condition, oracle, mean_tol=0.15, std_tol=0.2,
                    min_samples=100) -> MetricReport:
    """Per condition: worst-coordinate |empirical mean - oracle mean| in
    oracle-std units and |empirical std / oracle std - 1|. The report value
    is the largest error over conditions, normalized by its tolerance, so
    the run passes iff value <= 1.
    """
    per_condition = []
    for y, samples in samples_by_condition:
        s = np.asarray(samples, dtype=np.float64)
        if s.ndim != 2:
            raise ValueError("samples must be 2-D per condition")
        if s.shape[0] < min_samples:
            raise ValueError(
                f"need at least {min_samples} samples per condition, got {s.shape[0]}"
            )
        om = oracle.mean(y)
        os_ = oracle.std(y)
        if np.any(os_ <= 0):
            raise ValueError("oracle std must be positive")
        mean_err = float(np.max(np.abs(s.mean(axis=0) - om) / os_))
        std_err = float(np.max(np.abs(s.std(axis=0) / os_ - 1.0)))
        per_condition.append(
            {
                "y": np.asarray(y, dtype=np.float64).reshape(-1).tolist(),
                "count": int(s.shape[0]),
                "mean_err": mean_err,
                "std_err": std_err,
            }
        )
    if not per_condition:
        raise ValueError("need at least one condition")
    max_mean = max(c["mean_err"] for c in per_condition)
    max_std = max(c["std_err"] for c in per_condition)
    value = max(max_mean / mean_tol, max_std / std_tol)
    return MetricReport(
        name="posterior_error",
        value=float(value),
        tolerance=1.0,
        passed=bool(value <= 1.0),
        context={
            "per_condition": per_condition,
            "mean_tol": float(mean_tol),
            "std_tol": float(std_tol),
            "max_mean_err": max_mean,
            "max_std_err": max_std,
            "avg_mean_err": float(np.mean([c["mean_err"] for c in per_condition])),
            "avg_std_err": float(np.mean([c["std_err"] for c in per_condition])),
        },
    )


# ---------------------------------------------------------------------------
# joint vs. posterior discrepancy trend
# ---------------------------------------------------------------------------

def joint_vs_posterior_trend(trajectory, targets, oracle, threshold=0.9,
                             degenerate_floor=1e-10) -> MetricReport:
    """Rank correlation between two discrepancy series along a trajectory:
    the joint mmd_sq of (position, condition) pairs against the targets,
    and the target-frequency-weighted average of per-atom posterior mmd_sq.
    Requires a discrete-condition oracle so posteriors condition exactly.
    A trajectory already at the minimizer (both series below the floor at
    every checkpoint) passes as degenerate."""
    if oracle.kind != "discrete":
        raise ValueError("trend harness needs a discrete-condition oracle")
    conditions = trajectory.conditions
    ty = targets.conditions
    tx = targets.positions
    atom_rows = []
    weights = []
    for atom in oracle.atoms:
        pm = np.all(conditions == atom, axis=1)
        tm = np.all(ty == atom, axis=1)
        if pm.sum() == 0 or tm.sum() == 0:
            continue
        atom_rows.append((pm, tm))
        weights.append(float(tm.sum()))
    if not atom_rows:
        raise ValueError("no condition atom is populated on both sides")
    weights = np.asarray(weights) / float(sum(weights))

    target_joint = np.concatenate([tx, ty], axis=1)
    joint_series = []
    post_series = []
    for _, pos in trajectory.snapshots:
        joint_series.append(mmd_sq(np.concatenate([pos, conditions], axis=1),
                                   target_joint))
        vals = [mmd_sq(pos[pm], tx[tm]) for pm, tm in atom_rows]
        post_series.append(float(np.dot(weights, vals)))

    joint_series = [float(v) for v in joint_series]
    degenerate = (max(joint_series) < degenerate_floor
                  and max(post_series) < degenerate_floor)
    if degenerate:
        value = 1.0
    else:
        corr = spearmanr(joint_series, post_series).statistic
        value = float(corr) if np.isfinite(corr) else 0.0
    return MetricReport(
        name="joint_vs_posterior_trend",
        value=value,
        tolerance=float(threshold),
        passed=bool(degenerate or value > threshold),
        context={
            "joint_series": joint_series,
            "posterior_series": post_series,
            "checkpoints": [int(k) for k, _ in trajectory.snapshots],
            "atom_weights": weights.tolist(),
            "degenerate": bool(degenerate),
        },
    )
