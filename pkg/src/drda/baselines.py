"""Comparison regressors: (weighted) regularised least squares and DRO fits.

RLS and W-RLS follow the unnormalised least-squares form
``||K alpha - y||_W^2 + lam * alpha'K alpha``; W-DRO and source-only DRO
reuse the robust objective of :mod:`drda.solver` with the weights frozen.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import LinAlgError, lu_factor, lu_solve

from drda.density_ratio import DEFAULT_B, DEFAULT_C, WeightVector, kmm_fit
from drda.errors import SolverError
from drda.kernel_core import Dataset, KernelConfig, gram
from drda.solver import (
    JITTER, DrdaProblem, RegressionModel, SolverConfig, solve_alpha_step_problem,
)

METHODS = ("rls", "wrls", "wdro", "dro", "drda")


def _weighted_ridge(K, w, y, lam):
    # (K W K + lam K) alpha = K W y is implied by (W K + lam I) alpha = W y,
    # which stays well conditioned for lam > 0
    n = K.shape[0]
    A = w[:, None] * K + (lam + JITTER) * np.eye(n)
    try:
        alpha = lu_solve(lu_factor(A, check_finite=False), w * y, check_finite=False)
    except (LinAlgError, ValueError) as exc:
        raise SolverError(f"weighted ridge system is singular: {exc}") from exc
    if not np.all(np.isfinite(alpha)):
        raise SolverError("weighted ridge system is singular")
    return alpha


def fit_rls(source: Dataset, cfg: KernelConfig, lam: float) -> RegressionModel:
    """Kernel ridge regression on the source sample."""
    y = source.require_labels()
    K = gram(source, source, cfg).entries
    alpha = _weighted_ridge(K, np.ones(len(source)), y, lam)
    return RegressionModel(source.features, alpha, cfg.bandwidth)


def fit_wrls_with_weights(source: Dataset, w, cfg: KernelConfig, lam: float) -> RegressionModel:
    y = source.require_labels()
    w = w.values if isinstance(w, WeightVector) else np.asarray(w, dtype=np.float64)
    K = gram(source, source, cfg).entries
    return RegressionModel(source.features, _weighted_ridge(K, w, y, lam), cfg.bandwidth)


def fit_wrls(source: Dataset, target: Dataset, cfg: KernelConfig, lam: float,
             B=DEFAULT_B, c=DEFAULT_C, weights=None):
    """KMM weights followed by weighted kernel ridge regression.

    Returns ``(model, weights)``; pass precomputed KMM ``weights`` to skip
    the QP.
    """
    if weights is None:
        weights = kmm_fit(source, target, cfg, B, c)
    return fit_wrls_with_weights(source, weights, cfg, lam), weights


def fit_wdro(source: Dataset, target: Dataset, cfg: KernelConfig,
             solver: SolverConfig = SolverConfig(), weights=None, full_output=False):
    """Two-stage robust fit: KMM weights, then the alpha step with them frozen.

    Returns ``(model, weights)``, plus the alpha-step result when
    ``full_output`` is set.
    """
    if weights is None:
        weights = kmm_fit(source, target, cfg, solver.B, solver.c,
                          tol=solver.qp_tol, max_iter=solver.qp_max_iter)
    prob = DrdaProblem(source, target, cfg, solver)
    res = solve_alpha_step_problem(prob, weights.values, np.zeros(len(source)))
    model = RegressionModel(source.features, res.alpha, cfg.bandwidth)
    return (model, weights, res) if full_output else (model, weights)


def fit_dro_source_only(source: Dataset, cfg: KernelConfig,
                        solver: SolverConfig = SolverConfig(), alpha0=None, full_output=False):
    """Robust fit with uniform weights and no target information.

    Returns the model, or ``(model, alpha_step_result)`` with ``full_output``.
    """
    if solver.epsilon_mode != "user-lambda":
        solver = solver.replace(epsilon_mode="user-lambda")
    prob = DrdaProblem(source, None, cfg, solver)
    start = np.zeros(len(source)) if alpha0 is None else np.asarray(alpha0, dtype=np.float64)
    res = solve_alpha_step_problem(prob, np.ones(len(source)), start)
    model = RegressionModel(source.features, res.alpha, cfg.bandwidth)
    return (model, res) if full_output else model
