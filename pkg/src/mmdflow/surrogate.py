"""Feed-forward surrogates that distill flow segments into composable maps.

Each stage of a particle flow is summarised by a small fully connected
network trained to predict the displacement of a particle over that stage
from its start position and its condition. Applying the trained networks
in order reproduces the flow endpoint without re-running the dynamics:

    u <- u - net_l(u, y)    for l = 1..L

Networks use a silu activation, x * sigmoid(x), and an additive skip
between consecutive hidden layers of equal width. Gradients are computed
by hand-written reverse accumulation; training is minibatch gradient
descent with momentum and a cosine learning-rate decay.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .flow import ParticleEnsemble, StageSchedule, TargetSample, run_conditional_flow
from .streams import substream

ACTIVATION = "silu"

STACK_SCHEMA_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss becomes non-finite."""

    def __init__(self, epoch: int, detail: str = ""):
        self.epoch = int(epoch)
        msg = f"training diverged at epoch {self.epoch}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


@dataclass
class Regressor:
    """Fully connected displacement predictor mapping (u, q) to R^d.

    weights[i] has shape (dims[i], dims[i+1]); forward maps are h @ W + b.
    Hidden activations are silu; the final layer is linear. A hidden layer
    whose input and output widths agree adds its input back after the
    activation.
    """

    weights: list
    biases: list
    d: int
    n: int
    meta: dict = field(default_factory=dict)

    @property
    def dims(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must be non-empty and aligned")
        if self.d < 1 or self.n < 0:
            raise ValueError("need d >= 1 and n >= 0")
        if self.weights[0].shape[0] != self.d + self.n:
            raise ValueError("first layer width must equal d + n")
        if self.weights[-1].shape[1] != self.d:
            raise ValueError("last layer width must equal d")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[1],):
                raise ValueError("bias shape must match layer output width")
            if i > 0 and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError("consecutive layer widths must chain")


def init_regressor(d: int, n: int, hidden, rng) -> Regressor:
    """Glorot-normal weights, zero biases, for widths [d+n, *hidden, d]."""
    hidden = tuple(int(h) for h in hidden)
    if any(h < 1 for h in hidden):
        raise ValueError("hidden widths must be positive")
    dims = [int(d) + int(n), *hidden, int(d)]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        scale = np.sqrt(2.0 / (fan_in + fan_out))
        weights.append(rng.normal(scale=scale, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Regressor(weights=weights, biases=biases, d=int(d), n=int(n))


def _as_batch(arr, width, name):
    a = np.asarray(arr, dtype=np.float64)
    single = a.ndim == 1
    if single:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != width:
        raise ValueError(f"{name} must have {width} columns, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a, single


def _stack_inputs(reg, u, q):
    u2, single_u = _as_batch(u, reg.d, "u")
    if reg.n > 0:
        q2, single_q = _as_batch(q, reg.n, "q")
    else:
        q2, single_q = np.zeros((u2.shape[0], 0)), single_u
    if q2.shape[0] != u2.shape[0]:
        raise ValueError("u and q must have the same number of rows")
    return np.concatenate([u2, q2], axis=1), single_u and single_q


def _forward_cached(reg, x):
    """Returns (output, caches) where caches hold each layer's input,
    pre-activation, sigmoid and skip flag for the backward pass."""
    h = x
    caches = []
    last = len(reg.weights) - 1
    for i, (w, b) in enumerate(zip(reg.weights, reg.biases)):
        z = h @ w + b
        if i == last:
            caches.append((h, None, None, False))
            h = z
        else:
            sig = expit(z)
            skip = w.shape[0] == w.shape[1]
            caches.append((h, z, sig, skip))
            a = z * sig
            h = a + caches[-1][0] if skip else a
    return h, caches


def forward(reg: Regressor, u, q):
    """Evaluates the network on one sample or a batch of samples."""
    x, single = _stack_inputs(reg, u, q)
    out, _ = _forward_cached(reg, x)
    return out[0] if single else out


def displacement_loss(reg: Regressor, u, q, targets) -> float:
    """Mean squared displacement error, (1/B) sum_i ||net(u_i,q_i) - t_i||^2."""
    x, t = _grad_inputs(reg, u, q, targets)
    out, _ = _forward_cached(reg, x)
    return float(np.mean(np.sum((out - t) ** 2, axis=1)))


def param_gradient(reg: Regressor, u, q, targets):
    """Gradient of the mean squared displacement error in the network
    parameters, by reverse accumulation. Returns (grads_weights,
    grads_biases) shaped like reg.weights and reg.biases."""
    gw, gb, _ = _loss_and_grads(reg, *_grad_inputs(reg, u, q, targets))
    return gw, gb


def _grad_inputs(reg, u, q, targets):
    x, _ = _stack_inputs(reg, u, q)
    if x.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    t, _ = _as_batch(targets, reg.d, "targets")
    if t.shape[0] != x.shape[0]:
        raise ValueError("targets must match the batch size")
    return x, t


def _loss_and_grads(reg, x, t):
    out, caches = _forward_cached(reg, x)
    diff = out - t
    loss = float(np.mean(np.sum(diff**2, axis=1)))
    grad_w = [None] * len(reg.weights)
    grad_b = [None] * len(reg.biases)
    dh = (2.0 / x.shape[0]) * diff
    for i in range(len(reg.weights) - 1, -1, -1):
        h_in, z, sig, skip = caches[i]
        if z is None:
            dz = dh
        else:
            # d silu(z) = sigmoid(z) * (1 + z * (1 - sigmoid(z)))
            dz = dh * (sig * (1.0 + z * (1.0 - sig)))
        grad_w[i] = h_in.T @ dz
        grad_b[i] = dz.sum(axis=0)
        dnext = dz @ reg.weights[i].T
        dh = dnext + dh if skip else dnext
    return grad_w, grad_b, loss


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Settings for fitting one stage surrogate.

    stop_loss > 0 stops training early once an epoch's mean minibatch loss
    falls below it; 0 disables the early exit.
    """

    hidden: tuple = (128, 128)
    epochs: int = 2000
    batch_size: int = 256
    learning_rate: float = 0.05
    momentum: float = 0.9
    stop_loss: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (self.learning_rate > 0 and np.isfinite(self.learning_rate)):
            raise ValueError("learning_rate must be positive and finite")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must lie in [0, 1)")
        if self.stop_loss < 0:
            raise ValueError("stop_loss must be >= 0")


def train_stage(u0, q, uT, config: TrainConfig) -> Regressor:
    """Fits a regressor to the displacements u0 - uT of one flow stage.

    Minibatch SGD with momentum and cosine learning-rate decay; the data
    order is reshuffled every epoch from a seeded stream. Returns the
    trained regressor with final_loss / epochs_run / loss_history in meta.
    """
    u0a, _ = _as_batch(u0, np.asarray(u0).shape[-1], "u0")
    d = u0a.shape[1]
    qa = np.asarray(q, dtype=np.float64)
    if qa.ndim == 1:
        qa = qa[:, None]
    n = qa.shape[1]
    uTa, _ = _as_batch(uT, d, "uT")
    if not (u0a.shape[0] == qa.shape[0] == uTa.shape[0]) or u0a.shape[0] == 0:
        raise ValueError("u0, q and uT must be non-empty with matching rows")
    disp = u0a - uTa
    x = np.concatenate([u0a, qa], axis=1)

    reg = init_regressor(d, n, config.hidden, substream(config.seed, "init"))
    shuffle_rng = substream(config.seed, "shuffle")
    vel_w = [np.zeros_like(w) for w in reg.weights]
    vel_b = [np.zeros_like(b) for b in reg.biases]

    total = x.shape[0]
    history = []
    epochs_run = 0
    for epoch in range(config.epochs):
        lr = config.learning_rate * 0.5 * (1.0 + np.cos(np.pi * epoch / config.epochs))
        perm = shuffle_rng.permutation(total)
        batch_losses = []
        for start in range(0, total, config.batch_size):
            idx = perm[start : start + config.batch_size]
            gw, gb, loss = _loss_and_grads(reg, x[idx], disp[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, f"loss={loss!r}")
            for p, v, g in zip(reg.weights, vel_w, gw):
                v *= config.momentum
                v += g
                p -= lr * v
            for p, v, g in zip(reg.biases, vel_b, gb):
                v *= config.momentum
                v += g
                p -= lr * v
            batch_losses.append(loss)
        epoch_loss = float(np.mean(batch_losses))
        history.append(epoch_loss)
        epochs_run = epoch + 1
        if config.stop_loss > 0 and epoch_loss < config.stop_loss:
            break

    _, _, final_loss = _loss_and_grads(reg, x, disp)
    if not np.isfinite(final_loss):
        raise TrainingDivergedError(epochs_run - 1, f"loss={final_loss!r}")
    reg.meta = {
        "final_loss": final_loss,
        "epochs_run": epochs_run,
        "loss_history": history,
    }
    return reg


# ---------------------------------------------------------------------------
# stacks
# ---------------------------------------------------------------------------

@dataclass
class SurrogateStack:
    """Ordered stage surrogates composed as u <- u - net_l(u, y)."""

    regressors: list
    d: int
    n: int
    loss_history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.regressors:
            raise ValueError("a stack needs at least one regressor")
        for reg in self.regressors:
            if reg.d != self.d or reg.n != self.n:
                raise ValueError("all regressors must share the stack's d and n")


def compose_apply(stack: SurrogateStack, z, y):
    """Pushes latent draws through every stage surrogate in order."""
    u2, single = _as_batch(z, stack.d, "z")
    if stack.n > 0:
        ya = np.asarray(y, dtype=np.float64)
        if ya.ndim == 1:
            # one condition shared by the whole batch
            ya = np.broadcast_to(ya, (u2.shape[0], ya.shape[0]))
        if ya.shape != (u2.shape[0], stack.n):
            raise ValueError(f"y must have {stack.n} columns matching the batch")
    else:
        ya = np.zeros((u2.shape[0], 0))
    u = u2
    for reg in stack.regressors:
        u = u - forward(reg, u, ya)
    return u[0] if single else u


# ---------------------------------------------------------------------------
# distillation of a staged flow
# ---------------------------------------------------------------------------

def distill(targets: TargetSample, latents, schedules, train_config: TrainConfig):
    """Runs the staged flow/train loop and returns (stack, info).

    For each stage the current particle positions are flowed under that
    stage's schedule, a regressor is fitted to the resulting displacements,
    and the particles are replaced by the regressor's own outputs so that
    later stages learn to correct earlier approximation error. info carries
    the training latents/conditions, per-stage losses, the last stage's
    flow endpoint and the final composed positions.
    """
    if not schedules:
        raise ValueError("need at least one stage schedule")
    z0, _ = _as_batch(latents, np.asarray(latents).shape[-1], "latents")
    d = z0.shape[1]
    q = targets.conditions
    if q.shape[0] != z0.shape[0]:
        raise ValueError("latents must match the number of target conditions")

    regressors = []
    stage_losses = []
    histories = []
    u = z0
    flow_end = None
    for stage_index, sched in enumerate(schedules):
        ens = ParticleEnsemble(positions=u, conditions=q)
        traj = run_conditional_flow(ens, targets, sched, record_every=max(sched.steps, 1))
        flow_end = traj.snapshots[-1][1]
        stage_seed = int(substream(train_config.seed, "stage", stage_index).integers(0, 2**63))
        cfg = TrainConfig(
            hidden=train_config.hidden,
            epochs=train_config.epochs,
            batch_size=train_config.batch_size,
            learning_rate=train_config.learning_rate,
            momentum=train_config.momentum,
            stop_loss=train_config.stop_loss,
            seed=stage_seed,
        )
        reg = train_stage(u, q, flow_end, cfg)
        regressors.append(reg)
        stage_losses.append(reg.meta["final_loss"])
        histories.append(reg.meta["loss_history"])
        u = u - forward(reg, u, q)

    stack = SurrogateStack(
        regressors=regressors,
        d=d,
        n=q.shape[1],
        loss_history=histories,
        meta={"stage_losses": stage_losses},
    )
    info = {
        "latents": z0,
        "conditions": q,
        "stage_losses": stage_losses,
        "last_flow_end": flow_end,
        "final_positions": u,
    }
    return stack, info


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_stack(stack: SurrogateStack, path) -> None:
    """Writes the stack to JSON; float64 values survive bit-exactly."""
    stages = []
    for reg in stack.regressors:
        stages.append(
            {
                "dims": reg.dims,
                "weights": [w.tolist() for w in reg.weights],
                "biases": [b.tolist() for b in reg.biases],
                "final_loss": reg.meta.get("final_loss"),
                "epochs_run": reg.meta.get("epochs_run"),
            }
        )
    doc = {
        "schema_version": STACK_SCHEMA_VERSION,
        "kind": "surrogate_stack",
        "activation": ACTIVATION,
        "d": stack.d,
        "n": stack.n,
        "stages": stages,
        "loss_history": stack.loss_history,
        "meta": stack.meta,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_stack(path) -> SurrogateStack:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("kind") != "surrogate_stack":
        raise ValueError("not a surrogate stack file")
    if doc.get("schema_version") != STACK_SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {doc.get('schema_version')!r}")
    if doc.get("activation") != ACTIVATION:
        raise ValueError(f"unsupported activation {doc.get('activation')!r}")
    d, n = int(doc["d"]), int(doc["n"])
    regressors = []
    for stage in doc["stages"]:
        weights = [np.asarray(w, dtype=np.float64) for w in stage["weights"]]
        biases = [np.asarray(b, dtype=np.float64) for b in stage["biases"]]
        dims = [weights[0].shape[0]] + [w.shape[1] for w in weights]
        if dims != list(stage["dims"]):
            raise ValueError("stored dims do not match weight shapes")
        meta = {k: stage.get(k) for k in ("final_loss", "epochs_run")}
        regressors.append(Regressor(weights=weights, biases=biases, d=d, n=n, meta=meta))
    return SurrogateStack(
        regressors=regressors,
        d=d,
        n=n,
        loss_history=doc.get("loss_history", []),
        meta=doc.get("meta", {}),
    )
