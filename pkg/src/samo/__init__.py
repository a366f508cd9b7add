"""Multi-task optimization with joint global-local sharpness-aware
perturbations, pluggable gradient weighting, and conflict/sharpness
diagnostics."""

from .core import (
    ConfigError,
    GradientSet,
    LayeredParams,
    MultiTaskProblem,
    NumericError,
    StructureError,
    axpy,
    check_gradients,
    mean_params,
    norm,
    restrict,
    scale,
    substream,
)
from .diagnostics import (
    CosineMatrix,
    MetricSpec,
    SpectrumReport,
    cosine_matrix,
    delta_m,
    hessian_spectrum,
    hvp,
)
from .optimizer import OptimizationAbort, OptimizerConfig, Trajectory, run, step_size
from .problems import (
    MlpMultiTaskProblem,
    QuadraticProblem,
    ToyProblem,
    make_mlp_problem,
    toy_grads,
    toy_losses,
    toy_pareto_grid,
)
from .sam import (
    SamConfig,
    SamoResult,
    global_normalize,
    joint_perturbation,
    layerwise_normalize,
    sam_perturbation,
    samo_gradients,
    spsa_estimate,
)
from .weighting import (
    CombineResult,
    LinearScalarization,
    Mgda,
    MgdaResult,
    PCGrad,
    WeightingMethod,
    get_method,
    ls_combine,
    mgda_combine,
    pcgrad_combine,
    register_method,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "GradientSet", "LayeredParams", "MultiTaskProblem",
    "NumericError", "StructureError", "axpy", "check_gradients", "mean_params",
    "norm", "restrict", "scale", "substream",
    "CosineMatrix", "MetricSpec", "SpectrumReport", "cosine_matrix", "delta_m",
    "hessian_spectrum", "hvp",
    "OptimizationAbort", "OptimizerConfig", "Trajectory", "run", "step_size",
    "MlpMultiTaskProblem", "QuadraticProblem", "ToyProblem", "make_mlp_problem",
    "toy_grads", "toy_losses", "toy_pareto_grid",
    "SamConfig", "SamoResult", "global_normalize", "joint_perturbation",
    "layerwise_normalize", "sam_perturbation", "samo_gradients", "spsa_estimate",
    "CombineResult", "LinearScalarization", "Mgda", "MgdaResult", "PCGrad",
    "WeightingMethod", "get_method", "ls_combine", "mgda_combine",
    "pcgrad_combine", "register_method",
]
