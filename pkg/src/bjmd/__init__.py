"""Bayesian joint matrix decomposition of multi-source data with per-source noise levels."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    FitReport,
    Hyperparams,
    ModelState,
    MultiViewData,
    SolverConfig,
    bjmd_log_joint,
    map_objective,
    reconstruct,
    validate,
)
from .datagen import SynthSpec, gen_dataset  # noqa: E402
from .evaluation import auc, cluster_metric, select_features  # noqa: E402
from .map_solver import fit_map  # noqa: E402
from .advi import fit_advi  # noqa: E402

__all__ = [
    "FitReport", "Hyperparams", "ModelState", "MultiViewData", "SolverConfig",
    "bjmd_log_joint", "map_objective", "reconstruct", "validate",
    "SynthSpec", "gen_dataset", "auc", "cluster_metric", "select_features",
    "fit_map", "fit_advi",
]
