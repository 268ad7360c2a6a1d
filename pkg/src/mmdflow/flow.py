"""Time integration of interaction-attraction particle flows.

Explicit Euler steps, the momentum form used by staged distillation, and
condition-frozen flows: particles carry condition vectors that enter the
gradient through joint-space projections but are never updated themselves.
The drift harness `measure_y_drift` releases the condition block on purpose
and reports how much it actually moves.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from mmdflow.kernels import grad_full_conditional, mmd_sq
from mmdflow.slicing import sliced_grad_conditional
from mmdflow.streams import substream

__all__ = [
    "ParticleEnsemble",
    "TargetSample",
    "StageSchedule",
    "FlowTrajectory",
    "FlowDivergenceError",
    "default_step_size",
    "exact_conditional_grad",
    "make_sliced_grad_fn",
    "euler_step",
    "momentum_step",
    "run_conditional_flow",
    "run_unconditional_flow",
    "measure_y_drift",
    "trajectory_to_csv",
]

# particles past this coordinate magnitude are treated as ejected
_DIVERGENCE_LIMIT = 1e8


class FlowDivergenceError(RuntimeError):
    """Raised when a flow produces non-finite gradients or ejected particles."""

    def __init__(self, step_index: int, detail: str):
        super().__init__(f"flow diverged at step {step_index}: {detail}")
        self.step_index = step_index


def _as_2d(arr, name, allow_empty_cols=False) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim == 1:
        out = out.reshape(-1, 1)
    if out.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D array, got shape {out.shape}")
    if out.shape[0] == 0 or (out.shape[1] == 0 and not allow_empty_cols):
        raise ValueError(f"{name}: empty array (shape {out.shape})")
    if out.size and not np.all(np.isfinite(out)):
        raise ValueError(f"{name}: non-finite values")
    return out


@dataclass(frozen=True)
class ParticleEnsemble:
    """N particle positions in R^d with one frozen condition vector each (n >= 0)."""

    positions: np.ndarray
    conditions: np.ndarray
    step_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "positions", _as_2d(self.positions, "positions"))
        object.__setattr__(
            self, "conditions", _as_2d(self.conditions, "conditions", allow_empty_cols=True)
        )
        if self.conditions.shape[0] != self.positions.shape[0]:
            raise ValueError("one condition row required per particle")
        if self.step_index < 0:
            raise ValueError("step_index must be >= 0")


@dataclass(frozen=True)
class TargetSample:
    """Empirical joint target: M positions with matching condition vectors."""

    positions: np.ndarray
    conditions: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "positions", _as_2d(self.positions, "target positions"))
        object.__setattr__(
            self,
            "conditions",
            _as_2d(self.conditions, "target conditions", allow_empty_cols=True),
        )
        if self.conditions.shape[0] != self.positions.shape[0]:
            raise ValueError("one condition row required per target")


@dataclass(frozen=True)
class StageSchedule:
    """One flow stage: step size, momentum, step count, projections, seed."""

    tau: float
    momentum: float
    steps: int
    projections: int
    seed: int

    def __post_init__(self):
        if not (self.tau > 0 and np.isfinite(self.tau)):
            raise ValueError("tau must be a positive finite step size")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must lie in [0, 1)")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.projections < 1:
            raise ValueError("projections must be >= 1")


@dataclass
class FlowTrajectory:
    """Recorded flow: (step_index, positions) snapshots plus the frozen conditions."""

    snapshots: list
    record_every: int
    conditions: np.ndarray
    initial_mmd_sq: float
    final_mmd_sq: float

    def __post_init__(self):
        steps = [s for s, _ in self.snapshots]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("snapshot step indices must be strictly increasing")


def default_step_size(target_positions, n_particles: int) -> float:
    """Default tau = 0.1 * (target bounding-box diagonal) / n_particles.

    The tau*N product in the update makes the effective per-step displacement
    independent of the particle count; 0.1 of the data diameter is a safe
    sub-critical step for the negative distance kernel.
    """
    pts = _as_2d(target_positions, "target_positions")
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    diameter = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    if diameter == 0.0:
        diameter = 1.0
    return 0.1 * diameter / n_particles


def exact_conditional_grad(ens: ParticleEnsemble, targets: TargetSample) -> np.ndarray:
    """Exact x-block gradient (quadratic cost); reference for tests and small runs."""
    return grad_full_conditional(
        ens.positions, ens.conditions, targets.positions, targets.conditions
    )


def make_sliced_grad_fn(projections: int, rng: np.random.Generator):
    """Gradient callback drawing `projections` fresh directions from rng per call."""

    def fn(ens: ParticleEnsemble, targets: TargetSample) -> np.ndarray:
        return sliced_grad_conditional(
            ens.positions,
            ens.conditions,
            targets.positions,
            targets.conditions,
            projections,
            rng,
        )

    return fn


def _check_flow_inputs(ens: ParticleEnsemble, targets: TargetSample):
    if ens.positions.shape[1] != targets.positions.shape[1]:
        raise ValueError("particle and target position dimensions differ")
    if ens.conditions.shape[1] != targets.conditions.shape[1]:
        raise ValueError("particle and target condition dimensions differ")


def _guard(step_index: int, grad: np.ndarray, positions: np.ndarray):
    if not np.all(np.isfinite(grad)):
        raise FlowDivergenceError(step_index, "non-finite gradient")
    if np.max(np.abs(positions)) > _DIVERGENCE_LIMIT:
        raise FlowDivergenceError(step_index, "particle coordinate exceeded 1e8")


def euler_step(ens: ParticleEnsemble, targets: TargetSample, tau: float, grad_fn) -> ParticleEnsemble:
    """positions <- positions - tau*N*grad; conditions pass through untouched."""
    _check_flow_inputs(ens, targets)
    if tau <= 0:
        raise ValueError("tau must be positive")
    grad = grad_fn(ens, targets)
    n = ens.positions.shape[0]
    if not np.all(np.isfinite(grad)):
        raise FlowDivergenceError(ens.step_index, "non-finite gradient")
    new_pos = ens.positions - tau * n * grad
    _guard(ens.step_index, grad, new_pos)
    return replace(ens, positions=new_pos, step_index=ens.step_index + 1)


def momentum_step(
    ens: ParticleEnsemble,
    targets: TargetSample,
    schedule: StageSchedule,
    velocity: np.ndarray,
    grad_fn=None,
    rng: np.random.Generator | None = None,
):
    """velocity <- grad + m*velocity; positions <- positions - tau*N*velocity.

    With grad_fn omitted, the schedule's sliced conditional gradient is used
    and an rng must be supplied (the velocity buffer belongs to the caller and
    must start at zero at each stage boundary).
    """
    _check_flow_inputs(ens, targets)
    if grad_fn is None:
        if rng is None:
            raise ValueError("momentum_step needs an rng when grad_fn is not given")
        grad_fn = make_sliced_grad_fn(schedule.projections, rng)
    grad = grad_fn(ens, targets)
    if not np.all(np.isfinite(grad)):
        raise FlowDivergenceError(ens.step_index, "non-finite gradient")
    velocity = grad + schedule.momentum * velocity
    n = ens.positions.shape[0]
    new_pos = ens.positions - schedule.tau * n * velocity
    _guard(ens.step_index, grad, new_pos)
    return replace(ens, positions=new_pos, step_index=ens.step_index + 1), velocity


def _joint(positions: np.ndarray, conditions: np.ndarray) -> np.ndarray:
    if conditions.shape[1] == 0:
        return positions
    return np.concatenate([positions, conditions], axis=1)


def _run_flow(init, targets, schedule, record_every, grad_fn) -> FlowTrajectory:
    _check_flow_inputs(init, targets)
    if record_every < 1:
        raise ValueError("record_every must be >= 1")
    if grad_fn is None:
        rng = substream(schedule.seed, "projections")
        grad_fn = make_sliced_grad_fn(schedule.projections, rng)

    target_joint = _joint(targets.positions, targets.conditions)
    initial_mmd = mmd_sq(_joint(init.positions, init.conditions), target_joint)

    snapshots = [(init.step_index, init.positions.copy())]
    ens = init
    velocity = np.zeros_like(init.positions)
    for k in range(schedule.steps):
        ens, velocity = momentum_step(ens, targets, schedule, velocity, grad_fn=grad_fn)
        if ens.step_index % record_every == 0 or k == schedule.steps - 1:
            snapshots.append((ens.step_index, ens.positions.copy()))

    if schedule.steps == 0:
        final_mmd = initial_mmd
    else:
        final_mmd = mmd_sq(_joint(ens.positions, ens.conditions), target_joint)
    return FlowTrajectory(
        snapshots=snapshots,
        record_every=record_every,
        conditions=init.conditions,
        initial_mmd_sq=initial_mmd,
        final_mmd_sq=final_mmd,
    )


def run_conditional_flow(
    init: ParticleEnsemble,
    targets: TargetSample,
    schedule: StageSchedule,
    record_every: int = 100,
    grad_fn=None,
) -> FlowTrajectory:
    """Momentum flow of the particle positions with conditions held fixed.

    Records snapshots every `record_every` steps (plus start and end) and the
    exact squared MMD between the joint particle and joint target measures at
    both ends. The conditions array is passed through by reference: it is
    byte-identical after any number of steps.
    """
    return _run_flow(init, targets, schedule, record_every, grad_fn)


def run_unconditional_flow(
    init: ParticleEnsemble,
    targets: TargetSample,
    schedule: StageSchedule,
    record_every: int = 100,
    grad_fn=None,
) -> FlowTrajectory:
    """Plain particle flow (no conditions); otherwise as run_conditional_flow."""
    if init.conditions.shape[1] != 0 or targets.conditions.shape[1] != 0:
        raise ValueError("unconditional flow requires empty condition blocks")
    return _run_flow(init, targets, schedule, record_every, grad_fn)


def run_staged_conditional_flow(
    init: ParticleEnsemble,
    targets: TargetSample,
    schedules,
    record_every: int = 100,
) -> FlowTrajectory:
    """Chains several stages into one trajectory with cumulative step numbers.

    Each stage starts from the previous stage's endpoint with its velocity
    reset to zero; duplicate boundary snapshots are dropped. The reported
    initial/final mmd_sq bracket the whole chain.
    """
    schedules = list(schedules)
    if not schedules:
        raise ValueError("need at least one stage schedule")
    snapshots = []
    ens = init
    offset = 0
    initial_mmd = None
    final_mmd = None
    for i, schedule in enumerate(schedules):
        traj = run_conditional_flow(ens, targets, schedule, record_every=record_every)
        if i == 0:
            initial_mmd = traj.initial_mmd_sq
            snapshots.extend((offset + k, pos) for k, pos in traj.snapshots)
        else:
            snapshots.extend((offset + k, pos) for k, pos in traj.snapshots if k > 0)
        final_mmd = traj.final_mmd_sq
        offset += schedule.steps
        ens = ParticleEnsemble(
            positions=traj.snapshots[-1][1], conditions=ens.conditions, step_index=0
        )
    return FlowTrajectory(
        snapshots=snapshots,
        record_every=record_every,
        conditions=init.conditions,
        initial_mmd_sq=initial_mmd,
        final_mmd_sq=final_mmd,
    )


def measure_y_drift(
    init: ParticleEnsemble,
    targets: TargetSample,
    schedule: StageSchedule,
    record_every: int = 1,
    freeze_conditions: bool = False,
) -> np.ndarray:
    """Velocity ratio mean|v_y| / mean|v_x| along a flow with the y-block released.

    Runs momentum steps on the concatenated (x, y) state using full joint
    gradients, so the condition block moves unless `freeze_conditions` zeroes
    its gradient (in which case the ratio is exactly 0 at every step).
    Returns an array of (step_index, ratio) rows; diagnostic only.
    """
    _check_flow_inputs(init, targets)
    d = init.positions.shape[1]
    if init.conditions.shape[1] == 0:
        raise ValueError("y-drift needs a nonempty condition block")
    if record_every < 1:
        raise ValueError("record_every must be >= 1")

    joint_ens = ParticleEnsemble(
        positions=_joint(init.positions, init.conditions),
        conditions=np.zeros((init.positions.shape[0], 0)),
        step_index=init.step_index,
    )
    joint_tg = TargetSample(
        positions=_joint(targets.positions, targets.conditions),
        conditions=np.zeros((targets.positions.shape[0], 0)),
    )
    rng = substream(schedule.seed, "projections")
    base_fn = make_sliced_grad_fn(schedule.projections, rng)

    def grad_fn(ens, tg):
        g = base_fn(ens, tg)
        if freeze_conditions:
            g[:, d:] = 0.0
        return g

    rows = []
    ens = joint_ens
    velocity = np.zeros_like(joint_ens.positions)
    for k in range(schedule.steps):
        ens, velocity = momentum_step(ens, joint_tg, schedule, velocity, grad_fn=grad_fn)
        if ens.step_index % record_every == 0 or k == schedule.steps - 1:
            vy = float(np.mean(np.abs(velocity[:, d:])))
            vx = float(np.mean(np.abs(velocity[:, :d])))
            if vx == 0.0:
                ratio = 0.0 if vy == 0.0 else np.inf
            else:
                ratio = vy / vx
            rows.append((ens.step_index, ratio))
    return np.asarray(rows, dtype=np.float64).reshape(-1, 2)


def trajectory_to_csv(traj: FlowTrajectory, path) -> None:
    """Write snapshots as rows step,particle_id,coordinate_index,value."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step,particle_id,coordinate_index,value\n")
        for step, pos in traj.snapshots:
            for pid in range(pos.shape[0]):
                for ci in range(pos.shape[1]):
                    fh.write(f"{step},{pid},{ci},{float(pos[pid, ci])!r}\n")
