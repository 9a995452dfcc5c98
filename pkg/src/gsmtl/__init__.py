"""Group-structured latent multi-task learning.

Per-task linear predictors are factored as ``W = L @ S`` with ``L`` a shared
``d x k`` basis and ``S`` the ``k x T`` task codes. Rows of ``S`` are
penalised with a latent group norm over (possibly overlapping) task groups.
"""
from .core import (
    BasisSpec, ConfigError, ConvergenceError, DataError, DimensionError, FitReport,
    GroupStructure, GSMTLError, HyperParams, LatentModel, MultiTaskDataset, ProblemKind,
    basis_expand, grad_L, grad_S, objective, predict,
)
from .groupnorm import (
    GroupBallSpec, GroupNormDecomposition, block_soft_threshold, group_norm,
    project_disjoint, project_intersection, prox_group_norm, soft_threshold,
)
from .solver import SolverConfig, fit, init_L, solve_L_step, solve_S_step

__version__ = "0.1.0"

__all__ = [
    "BasisSpec", "ConfigError", "ConvergenceError", "DataError", "DimensionError",
    "FitReport", "GroupStructure", "GSMTLError", "HyperParams", "LatentModel",
    "MultiTaskDataset", "ProblemKind", "basis_expand", "grad_L", "grad_S", "objective",
    "predict", "GroupBallSpec", "GroupNormDecomposition", "block_soft_threshold",
    "group_norm", "project_disjoint", "project_intersection", "prox_group_norm",
    "soft_threshold", "SolverConfig", "fit", "init_L", "solve_L_step", "solve_S_step",
]
