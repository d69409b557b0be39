"""Distributionally robust domain adaptation for kernel regression."""

from drda.ambiguity_bounds import (
    AmbiguityParams, BoundCertificate, all_radii, generalization_bound,
    radius_empirical_target, radius_target_in_transferred_set, radius_weighted_source,
)
from drda.baselines import METHODS, fit_dro_source_only, fit_rls, fit_wdro, fit_wrls
from drda.density_ratio import QpSpec, WeightVector, kmm_fit, solve_box_qp
from drda.errors import ConvergenceWarning, InputError, SolverError
from drda.kernel_core import Dataset, KernelConfig, gram, mmd_sq_weighted
from drda.solver import (
    FitReport, RegressionModel, SolverConfig, alpha_gradient, drda_objective, fit_drda,
    predict, solve_alpha_step, solve_weight_step,
)

__all__ = [
    "AmbiguityParams", "BoundCertificate", "ConvergenceWarning", "Dataset", "FitReport",
    "InputError", "KernelConfig", "METHODS", "QpSpec", "RegressionModel", "SolverConfig",
    "SolverError", "WeightVector", "all_radii", "alpha_gradient", "drda_objective",
    "fit_dro_source_only", "fit_drda", "fit_rls", "fit_wdro", "fit_wrls",
    "generalization_bound", "gram", "kmm_fit", "mmd_sq_weighted", "predict",
    "radius_empirical_target", "radius_target_in_transferred_set", "radius_weighted_source",
    "solve_alpha_step", "solve_box_qp", "solve_weight_step",
]
