"""Overlapping grouped lasso: overlap norm, duplicated-design solver, and verification tools."""
from .kernels import BACKEND
from .model import (Decomposition, FitResult, GroupCollection, ProblemInstance,
                    SingularDesignError, generate_instance, make_contiguous_groups, ols_fit,
                    recovery_error, singleton_groups)
from .norm import (NormResult, check_direction_uniqueness, overlap_norm, overlap_norm_oracle,
                   structured_sparsity)
from .solver import (DuplicatedDesign, SolverConfig, adaptive_weights, duplicate_design, fit,
                     fit_adaptive, fit_path, kkt_check, lambda_grid, lambda_max)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Decomposition",
    "DuplicatedDesign",
    "FitResult",
    "GroupCollection",
    "NormResult",
    "ProblemInstance",
    "SingularDesignError",
    "SolverConfig",
    "adaptive_weights",
    "check_direction_uniqueness",
    "duplicate_design",
    "fit",
    "fit_adaptive",
    "fit_path",
    "generate_instance",
    "kkt_check",
    "lambda_grid",
    "lambda_max",
    "make_contiguous_groups",
    "ols_fit",
    "overlap_norm",
    "overlap_norm_oracle",
    "recovery_error",
    "singleton_groups",
    "structured_sparsity",
]
