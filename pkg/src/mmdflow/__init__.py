"""Particle gradient flows of the MMD with the negative distance kernel.

Exact kernel machinery, sliced gradient estimation, conditional particle
flows, surrogate distillation into transport maps, analytic-posterior toy
problems and evaluation metrics, plus a config-driven CLI.

Submodules are imported lazily so the CLI can pin BLAS thread counts via
environment variables before numpy is first loaded.
"""

import importlib

__version__ = "0.1.0"

_EXPORTS = {
    # kernels
    "as_points": "kernels",
    "mmd_sq": "kernels",
    "mmd_sq_assoc": "kernels",
    "discrete_functional": "kernels",
    "grad_full": "kernels",
    "grad_full_conditional": "kernels",
    "kernel_mean_embedding": "kernels",
    # slicing
    "SlicingConstant": "slicing",
    "Projection": "slicing",
    "slicing_constant": "slicing",
    "sample_sphere": "slicing",
    "grad_1d_sorted": "slicing",
    "sliced_grad": "slicing",
    "sliced_grad_conditional": "slicing",
    # flow
    "ParticleEnsemble": "flow",
    "TargetSample": "flow",
    "StageSchedule": "flow",
    "FlowTrajectory": "flow",
    "FlowDivergenceError": "flow",
    "default_step_size": "flow",
    "exact_conditional_grad": "flow",
    "make_sliced_grad_fn": "flow",
    "euler_step": "flow",
    "momentum_step": "flow",
    "run_conditional_flow": "flow",
    "run_unconditional_flow": "flow",
    "run_staged_conditional_flow": "flow",
    "measure_y_drift": "flow",
    "trajectory_to_csv": "flow",
    # surrogate
    "Regressor": "surrogate",
    "SurrogateStack": "surrogate",
    "TrainConfig": "surrogate",
    "TrainingDivergedError": "surrogate",
    "init_regressor": "surrogate",
    "forward": "surrogate",
    "displacement_loss": "surrogate",
    "param_gradient": "surrogate",
    "train_stage": "surrogate",
    "compose_apply": "surrogate",
    "distill": "surrogate",
    "save_stack": "surrogate",
    "load_stack": "surrogate",
    # problems
    "JointDataset": "problems",
    "PosteriorOracle": "problems",
    "linear_gaussian": "problems",
    "labeled_clusters": "problems",
    "discrete_y_toy": "problems",
    "latent_sampler": "problems",
    "problem_from_provenance": "problems",
    "dataset_from_provenance": "problems",
    "export_dataset": "problems",
    "read_dataset_csv": "problems",
    # metrics
    "MetricReport": "metrics",
    "w1_sorted": "metrics",
    "check_mmd_w1_bound": "metrics",
    "posterior_error": "metrics",
    "joint_vs_posterior_trend": "metrics",
    "report_to_json_line": "metrics",
    "write_reports_jsonl": "metrics",
    # config
    "RunConfig": "config",
    "ConfigError": "config",
    "parse_config": "config",
    "load_config": "config",
    "save_config": "config",
    # streams
    "substream": "streams",
    "spawn_key_for": "streams",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name):
    module_name = _EXPORTS.get(name)
    if module_name is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    module = importlib.import_module(f".{module_name}", __name__)
    value = getattr(module, name)
    globals()[name] = value
    return value


def __dir__():
    return __all__
