"""Run configuration: a single versioned JSON document.

A RunConfig normalizes every section (defaults filled, stage plans
expanded to explicit lists) so that parse(serialize(config)) == config
and two configs compare equal iff they describe the same run. Validation
errors carry the dotted path of the offending field.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

CONFIG_SCHEMA_VERSION = 1

_GENERATOR_NAMES = ("linear_gaussian", "labeled_clusters", "discrete_y_toy")
_LATENT_KINDS = ("gaussian", "uniform")


class ConfigError(ValueError):
    """Invalid configuration; path points at the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}")


def _require(doc, key, path):
    if key not in doc:
        raise ConfigError(f"{path}.{key}" if path else key, "missing required field")
    return doc[key]


def _as_int(value, path, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(path, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(path, f"must be >= {minimum}, got {value}")
    return value


def _as_number(value, path, positive=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    v = float(value)
    if v != v or v in (float("inf"), float("-inf")):
        raise ConfigError(path, "must be finite")
    if positive and v <= 0:
        raise ConfigError(path, f"must be positive, got {value}")
    return v


def _as_str(value, path, choices=None):
    if not isinstance(value, str) or not value:
        raise ConfigError(path, f"expected a non-empty string, got {value!r}")
    if choices is not None and value not in choices:
        raise ConfigError(path, f"must be one of {list(choices)}, got {value!r}")
    return value


def _as_dict(value, path):
    if not isinstance(value, dict):
        raise ConfigError(path, f"expected an object, got {type(value).__name__}")
    return value


def _parse_stage(doc, path):
    doc = _as_dict(doc, path)
    known = {"tau", "momentum", "steps", "projections"}
    for key in doc:
        if key not in known:
            raise ConfigError(f"{path}.{key}", "unknown stage field")
    tau = doc.get("tau")
    if tau is not None:
        tau = _as_number(tau, f"{path}.tau", positive=True)
    momentum = _as_number(doc.get("momentum", 0.9), f"{path}.momentum")
    if not (0.0 <= momentum < 1.0):
        raise ConfigError(f"{path}.momentum", f"must lie in [0, 1), got {momentum}")
    if "steps" not in doc:
        raise ConfigError(f"{path}.steps", "missing required field")
    steps = _as_int(doc["steps"], f"{path}.steps", minimum=0)
    projections = _as_int(doc.get("projections", 128), f"{path}.projections", minimum=1)
    return {"tau": tau, "momentum": momentum, "steps": steps, "projections": projections}


def _expand_stage_plan(plan, path):
    plan = _as_dict(plan, path)
    known = {"count", "base_steps", "cap", "tau", "momentum", "projections"}
    for key in plan:
        if key not in known:
            raise ConfigError(f"{path}.{key}", "unknown stage-plan field")
    count = _as_int(_require(plan, "count", path), f"{path}.count", minimum=1)
    base = _as_int(_require(plan, "base_steps", path), f"{path}.base_steps", minimum=1)
    cap = plan.get("cap")
    if cap is not None:
        cap = _as_int(cap, f"{path}.cap", minimum=base)
    stages = []
    for l in range(1, count + 1):
        steps = base * l if cap is None else min(base * l, cap)
        stage = {"steps": steps}
        for key in ("tau", "momentum", "projections"):
            if key in plan:
                stage[key] = plan[key]
        stages.append(_parse_stage(stage, f"{path}[{l - 1}]"))
    return stages


def _parse_flow(doc, path):
    doc = _as_dict(doc, path)
    known = {"record_every", "stages"}
    for key in doc:
        if key not in known:
            raise ConfigError(f"{path}.{key}", "unknown flow field")
    record_every = _as_int(doc.get("record_every", 100), f"{path}.record_every", minimum=1)
    stages_doc = _require(doc, "stages", path)
    if isinstance(stages_doc, list):
        if not stages_doc:
            raise ConfigError(f"{path}.stages", "need at least one stage")
        stages = [_parse_stage(s, f"{path}.stages[{i}]") for i, s in enumerate(stages_doc)]
    elif isinstance(stages_doc, dict):
        stages = _expand_stage_plan(stages_doc, f"{path}.stages")
    else:
        raise ConfigError(f"{path}.stages", "expected a list of stages or a stage plan")
    return {"record_every": record_every, "stages": stages}


def _parse_surrogate(doc, path):
    doc = _as_dict(doc, path)
    known = {"hidden", "epochs", "batch_size", "learning_rate", "momentum", "stop_loss"}
    for key in doc:
        if key not in known:
            raise ConfigError(f"{path}.{key}", "unknown surrogate field")
    hidden = doc.get("hidden", [128, 128])
    if not isinstance(hidden, list):
        raise ConfigError(f"{path}.hidden", "expected a list of widths")
    hidden = [_as_int(h, f"{path}.hidden[{i}]", minimum=1) for i, h in enumerate(hidden)]
    out = {
        "hidden": hidden,
        "epochs": _as_int(doc.get("epochs", 2000), f"{path}.epochs", minimum=1),
        "batch_size": _as_int(doc.get("batch_size", 256), f"{path}.batch_size", minimum=1),
        "learning_rate": _as_number(doc.get("learning_rate", 0.05),
                                    f"{path}.learning_rate", positive=True),
        "momentum": _as_number(doc.get("momentum", 0.9), f"{path}.momentum"),
        "stop_loss": _as_number(doc.get("stop_loss", 0.0), f"{path}.stop_loss"),
    }
    if not (0.0 <= out["momentum"] < 1.0):
        raise ConfigError(f"{path}.momentum", "must lie in [0, 1)")
    if out["stop_loss"] < 0:
        raise ConfigError(f"{path}.stop_loss", "must be >= 0")
    return out


def _parse_evaluation(doc, path):
    doc = _as_dict(doc, path)
    known = {"conditions", "count", "mean_tol", "std_tol"}
    for key in doc:
        if key not in known:
            raise ConfigError(f"{path}.{key}", "unknown evaluation field")
    raw = _require(doc, "conditions", path)
    if not isinstance(raw, list) or not raw:
        raise ConfigError(f"{path}.conditions", "expected a non-empty list")
    conditions = []
    for i, c in enumerate(raw):
        if isinstance(c, (int, float)) and not isinstance(c, bool):
            conditions.append([float(c)])
        elif isinstance(c, list) and c:
            conditions.append([_as_number(v, f"{path}.conditions[{i}][{j}]")
                               for j, v in enumerate(c)])
        else:
            raise ConfigError(f"{path}.conditions[{i}]", "expected a number or list")
    widths = {len(c) for c in conditions}
    if len(widths) != 1:
        raise ConfigError(f"{path}.conditions", "all conditions must share one width")
    return {
        "conditions": conditions,
        "count": _as_int(doc.get("count", 2000), f"{path}.count", minimum=100),
        "mean_tol": _as_number(doc.get("mean_tol", 0.15), f"{path}.mean_tol", positive=True),
        "std_tol": _as_number(doc.get("std_tol", 0.2), f"{path}.std_tol", positive=True),
    }


@dataclass(frozen=True)
class RunConfig:
    """Normalized run description; compare with == for identity of runs."""

    name: str
    seed: int
    output_dir: str
    problem: dict
    latent: dict
    flow: dict
    surrogate: dict
    evaluation: dict | None

    def serialize(self) -> dict:
        return {
            "schema_version": CONFIG_SCHEMA_VERSION,
            "name": self.name,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "problem": copy.deepcopy(self.problem),
            "latent": copy.deepcopy(self.latent),
            "flow": copy.deepcopy(self.flow),
            "surrogate": copy.deepcopy(self.surrogate),
            "evaluation": copy.deepcopy(self.evaluation),
        }

    def run_dir(self, override_out=None) -> Path:
        base = Path(override_out) if override_out else Path(self.output_dir)
        return base / f"run_{self.name}"


def parse_config(doc) -> RunConfig:
    doc = _as_dict(doc, "")
    version = _require(doc, "schema_version", "")
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError("schema_version",
                          f"unsupported version {version!r}, expected {CONFIG_SCHEMA_VERSION}")
    known = {"schema_version", "name", "seed", "output_dir", "problem", "latent",
             "flow", "surrogate", "evaluation"}
    for key in doc:
        if key not in known:
            raise ConfigError(key, "unknown field")
    name = _as_str(_require(doc, "name", ""), "name")
    if not all(c.isalnum() or c in "-_" for c in name):
        raise ConfigError("name", "use only letters, digits, '-' and '_'")
    seed = _as_int(_require(doc, "seed", ""), "seed", minimum=0)
    output_dir = _as_str(doc.get("output_dir", "out"), "output_dir")

    problem = _as_dict(_require(doc, "problem", ""), "problem")
    for key in problem:
        if key not in ("generator", "parameters"):
            raise ConfigError(f"problem.{key}", "unknown field")
    generator = _as_str(_require(problem, "generator", "problem"), "problem.generator",
                        choices=_GENERATOR_NAMES)
    parameters = _as_dict(_require(problem, "parameters", "problem"), "problem.parameters")

    latent_doc = _as_dict(doc.get("latent", {"kind": "gaussian"}), "latent")
    for key in latent_doc:
        if key != "kind":
            raise ConfigError(f"latent.{key}", "unknown field")
    latent = {"kind": _as_str(latent_doc.get("kind", "gaussian"), "latent.kind",
                              choices=_LATENT_KINDS)}

    flow = _parse_flow(_require(doc, "flow", ""), "flow")
    surrogate = _parse_surrogate(doc.get("surrogate", {}), "surrogate")
    evaluation = (None if doc.get("evaluation") is None
                  else _parse_evaluation(doc["evaluation"], "evaluation"))

    return RunConfig(
        name=name,
        seed=seed,
        output_dir=output_dir,
        problem={"generator": generator, "parameters": copy.deepcopy(parameters)},
        latent=latent,
        flow=flow,
        surrogate=surrogate,
        evaluation=evaluation,
    )


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("", f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON: {exc}")
    return parse_config(doc)


def save_config(config: RunConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config.serialize(), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# builders that hand config sections to the numerical modules
# ---------------------------------------------------------------------------

def build_problem(config: RunConfig):
    """Returns (JointDataset, PosteriorOracle) for the configured problem."""
    from .problems import _GENERATORS

    gen = _GENERATORS[config.problem["generator"]]
    try:
        return gen(seed=config.seed, **config.problem["parameters"])
    except TypeError as exc:
        raise ConfigError("problem.parameters", str(exc))
    except ValueError as exc:
        raise ConfigError("problem.parameters", str(exc))


def build_latents(config: RunConfig, d: int, count: int):
    from .problems import latent_sampler

    return latent_sampler(config.latent["kind"], d=d, N=count, seed=config.seed)


def stage_schedules(config: RunConfig, target_positions, n_particles):
    """Materializes StageSchedule objects; stages without an explicit tau get
    the default step size derived from the targets. Per-stage seeds are
    split deterministically from the global seed."""
    from .flow import StageSchedule, default_step_size
    from .streams import substream

    schedules = []
    for index, stage in enumerate(config.flow["stages"]):
        tau = stage["tau"]
        if tau is None:
            tau = default_step_size(target_positions, n_particles)
        seed = int(substream(config.seed, "flow-stage", index).integers(0, 2**63))
        schedules.append(
            StageSchedule(
                tau=float(tau),
                momentum=float(stage["momentum"]),
                steps=int(stage["steps"]),
                projections=int(stage["projections"]),
                seed=seed,
            )
        )
    return schedules


def train_config(config: RunConfig):
    from .surrogate import TrainConfig

    s = config.surrogate
    return TrainConfig(
        hidden=tuple(s["hidden"]),
        epochs=s["epochs"],
        batch_size=s["batch_size"],
        learning_rate=s["learning_rate"],
        momentum=s["momentum"],
        stop_loss=s["stop_loss"],
        seed=config.seed,
    )
