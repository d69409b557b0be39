"""Joint estimation of source weights and a kernel regressor.

The fitted function is a kernel expansion h(x) = sum_i alpha_i k(x_i, x)
over the source points. For weights w and coefficients alpha the objective is

    (1/n_s) (K alpha - y)' W (K alpha - y)
    + beta * (w'K w / n_s^2 - 2 w'K_st 1 / (n_s n_t))
    + lam * tr((D_alpha K_half)^4) + lam_ridge * alpha'K alpha

with K_half the Gram matrix at bandwidth sigma/sqrt(2) and D_alpha =
diag(alpha). It is minimised by alternating a Newton-preconditioned descent
in alpha with the box/slab weight QP.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from drda.ambiguity_bounds import AmbiguityParams, radius_target_in_transferred_set
from drda.density_ratio import (
    DEFAULT_B, DEFAULT_C, DEFAULT_MAX_ITER, DEFAULT_TOL, QpSpec, WeightVector,
    kmm_fit, solve_box_qp,
)
from drda.errors import InputError, SolverError
from drda.kernel_core import Dataset, KernelConfig, gram

JITTER = 1e-10
DECREMENT_TOL = 1e-13
EPSILON_MODES = ("user-lambda", "theorem1")


@dataclass(frozen=True)
class SolverConfig:
    """Hyper-parameters of the joint fit.

    ``lam`` weights the robustness penalty (quartic trace term and, unless
    ``ridge_lam`` is set, the RKHS-norm term). With ``epsilon_mode`` set to
    ``"theorem1"`` the penalty weight is instead the transferred-set radius
    computed from B, the sample sizes and ``delta``. ``seed`` is recorded in
    reports only; the solver itself is deterministic.
    """

    beta: float = 10.0
    lam: float = 1.2
    B: float = DEFAULT_B
    c: float = DEFAULT_C
    epsilon_mode: str = "user-lambda"
    delta: float = 0.05
    ridge_lam: Optional[float] = None
    outer_max: int = 50
    outer_tol: float = 1e-6
    alpha_max_iter: int = 2000
    alpha_tol: float = 1e-7
    backtrack: float = 0.5
    armijo: float = 1e-4
    qp_tol: float = DEFAULT_TOL
    qp_max_iter: int = DEFAULT_MAX_ITER
    kmm_warm_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.beta < 0 or self.lam < 0:
            raise InputError("beta and lam must be non-negative")
        if self.ridge_lam is not None and self.ridge_lam < 0:
            raise InputError("ridge_lam must be non-negative")
        if self.outer_tol <= 0 or self.alpha_tol <= 0:
            raise InputError("tolerances must be positive")
        if self.epsilon_mode not in EPSILON_MODES:
            raise InputError(f"epsilon_mode must be one of {EPSILON_MODES}")
        if not 0 < self.backtrack < 1 or not 0 < self.armijo < 1:
            raise InputError("backtracking parameters must lie in (0, 1)")
        if not self.B > 0 or not self.c >= 0:
            raise InputError("B must be positive and c non-negative")
        if not 0 < self.delta < 1:
            raise InputError("delta must lie in (0, 1)")
        if not self.qp_tol > 0:
            raise InputError("qp_tol must be positive")
        for name in ("outer_max", "alpha_max_iter", "qp_max_iter"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise InputError(f"{name} must be a positive integer, got {v!r}")

    def replace(self, **changes) -> "SolverConfig":
        return SolverConfig(**{**asdict(self), **changes})


@dataclass(frozen=True)
class RegressionModel:
    support_points: np.ndarray
    alpha: np.ndarray
    bandwidth: float

    def __post_init__(self):
        x = np.array(self.support_points, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        a = np.array(self.alpha, dtype=np.float64).reshape(-1)
        if a.shape[0] != x.shape[0]:
            raise InputError(f"{a.shape[0]} coefficients for {x.shape[0]} support points")
        x.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "support_points", x)
        object.__setattr__(self, "alpha", a)
        KernelConfig(self.bandwidth)

    @property
    def dim(self) -> int:
        return self.support_points.shape[1]

    def predict(self, X) -> np.ndarray:
        """Vectorised prediction for the rows of ``X``."""
        X = X.features if isinstance(X, Dataset) else np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[1] != self.dim:
            raise InputError(f"dimension mismatch: {X.shape[1]} vs {self.dim}")
        return gram(X, self.support_points, KernelConfig(self.bandwidth)).entries @ self.alpha

    def rkhs_norm(self) -> float:
        k = gram(self.support_points, self.support_points, KernelConfig(self.bandwidth)).entries
        return math.sqrt(max(float(self.alpha @ k @ self.alpha), 0.0))

    def to_dict(self):
        return {
            "sigma": float(self.bandwidth),
            "support_points": self.support_points.tolist(),
            "alpha": self.alpha.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        missing = {"sigma", "support_points", "alpha"} - set(d)
        if missing:
            raise InputError(f"model JSON lacks {sorted(missing)}")
        return cls(np.array(d["support_points"], dtype=np.float64),
                   np.array(d["alpha"], dtype=np.float64), float(d["sigma"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text) -> "RegressionModel":
        return cls.from_dict(json.loads(text))


def predict(model: RegressionModel, x) -> float:
    """h(x) = sum_i alpha_i k(x_i, x) for a single feature vector."""
    v = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if v.ndim != 1 or v.shape[0] != model.dim:
        raise InputError(f"expected a feature vector of dimension {model.dim}")
    return float(model.predict(v[None, :])[0])


@dataclass(frozen=True)
class FitReport:
    objective_trace: tuple
    converged: bool
    final_mmd_sq: float
    final_weighted_risk: float
    outer_iterations: int = 0
    start: str = "uniform"
    penalty_weight: float = float("nan")
    candidates: dict = field(default_factory=dict)

    def is_monotone(self, slack=1e-9) -> bool:
        t = np.asarray(self.objective_trace)
        return bool(np.all(np.diff(t) <= slack))

    def to_dict(self):
        return {
            "objective_trace": list(self.objective_trace),
            "converged": self.converged,
            "final_mmd_sq": self.final_mmd_sq,
            "final_weighted_risk": self.final_weighted_risk,
            "outer_iterations": self.outer_iterations,
            "start": self.start,
            "penalty_weight": self.penalty_weight,
            "candidates": self.candidates,
        }


class DrdaProblem:
    """Kernel matrices and data of one fit, computed once and reused."""

    def __init__(self, source: Dataset, target: Optional[Dataset], cfg: KernelConfig,
                 solver: SolverConfig):
        self.y = source.require_labels()
        if target is not None:
            if len(target) == 0:
                raise InputError("target must be nonempty")
            if target.dim != source.dim:
                raise InputError(f"dimension mismatch: {source.dim} vs {target.dim}")
        self.source, self.target, self.cfg, self.solver = source, target, cfg, solver
        self.n_s = len(source)
        self.n_t = len(target) if target is not None else 0
        self.K = gram(source, source, cfg).entries
        self.K_half = gram(source, source, cfg.halved()).entries
        # square-root factors; the alpha-quartic and alpha'K alpha are
        # evaluated through them because the direct products cancel badly
        # once alpha is large along near-null directions of the Gram
        self.L = _psd_factor(self.K)
        self.L_half = _psd_factor(self.K_half)
        if target is not None:
            self.kst_rowsum = gram(source, target, cfg).entries.sum(axis=1)
            self.mmd_const = gram(target, target, cfg).entries.sum() / self.n_t ** 2
        else:
            self.kst_rowsum = np.zeros(self.n_s)
            self.mmd_const = 0.0
        if solver.epsilon_mode == "theorem1":
            if target is None:
                raise InputError("theorem1 penalty needs a target sample")
            self.penalty = radius_target_in_transferred_set(
                AmbiguityParams(B=solver.B, n_s=self.n_s, n_t=self.n_t, delta=solver.delta))
        else:
            self.penalty = solver.lam
        self.ridge = self.penalty if solver.ridge_lam is None else solver.ridge_lam

    # objective pieces -------------------------------------------------

    def residuals(self, alpha):
        return self.K @ alpha - self.y

    def weighted_risk(self, alpha, w):
        r = self.residuals(alpha)
        return float(w @ (r * r)) / self.n_s

    def mmd_part(self, w):
        """Squared MMD without the target-target constant."""
        if self.target is None:
            return 0.0
        return float(w @ self.K @ w) / self.n_s ** 2 - 2.0 * float(w @ self.kst_rowsum) / (self.n_s * self.n_t)

    def _inner(self, alpha):
        # P = L' diag(alpha) L, so tr((diag(alpha) K_half)^4) = ||P^2||_F^2
        return self.L_half.T @ (alpha[:, None] * self.L_half)

    def quartic(self, alpha):
        P = self._inner(alpha)
        P2 = P @ P
        return float(np.sum(P2 * P2))

    def rkhs_sq(self, alpha):
        v = self.L.T @ alpha
        return float(v @ v)

    def objective(self, alpha, w):
        val = self.weighted_risk(alpha, w)
        if self.solver.beta:
            val += self.solver.beta * self.mmd_part(w)
        if self.penalty:
            val += self.penalty * self.quartic(alpha)
        if self.ridge:
            val += self.ridge * self.rkhs_sq(alpha)
        return val

    def alpha_objective(self, alpha, w):
        """Objective terms that depend on alpha."""
        val = self.weighted_risk(alpha, w)
        if self.penalty:
            val += self.penalty * self.quartic(alpha)
        if self.ridge:
            val += self.ridge * self.rkhs_sq(alpha)
        return val

    def alpha_gradient(self, alpha, w):
        K = self.K
        g = (2.0 / self.n_s) * (K @ (w * self.residuals(alpha)))
        if self.penalty:
            P = self._inner(alpha)
            Lh = self.L_half
            # d/d alpha_i of ||P^2||_F^2 is 4 (L P^3 L')_ii
            g += self.penalty * 4.0 * np.sum((Lh @ (P @ P @ P)) * Lh, axis=1)
        if self.ridge:
            g += 2.0 * self.ridge * (K @ alpha)
        return g

    def alpha_hessian(self, alpha, w):
        K = self.K
        H = (2.0 / self.n_s) * (K * w) @ K
        if self.penalty:
            P = self._inner(alpha)
            Lh = self.L_half
            KDK = Lh @ P @ Lh.T
            KDKDK = Lh @ (P @ P) @ Lh.T
            H += self.penalty * 4.0 * (2.0 * self.K_half * KDKDK + KDK * KDK.T)
        if self.ridge:
            H += 2.0 * self.ridge * K
        return 0.5 * (H + H.T)

    def weight_qp(self, alpha) -> QpSpec:
        r = self.residuals(alpha)
        beta = self.solver.beta
        quad = (2.0 * beta / self.n_s ** 2) * self.K
        lin = (r * r) / self.n_s
        if beta and self.target is not None:
            lin = lin - (2.0 * beta / (self.n_s * self.n_t)) * self.kst_rowsum
        return QpSpec(quad, lin, self.solver.B, self.solver.c)

    def full_mmd_sq(self, w):
        return self.mmd_part(w) + self.mmd_const


def _psd_factor(M):
    """L with L L' equal to the PSD part of M; columns for zero eigenvalues dropped."""
    vals, vecs = np.linalg.eigh(M)
    keep = vals > 0
    return vecs[:, keep] * np.sqrt(vals[keep])


def _newton_direction(H, g):
    scale = max(float(np.mean(np.diag(H))), 1e-300)
    # shift at the rounding level of H; curvature below it is not resolvable
    tau = H.shape[0] * np.finfo(float).eps * scale
    eye = np.eye(H.shape[0])
    for _ in range(60):
        try:
            factor = cho_factor(H + tau * eye, check_finite=False)
            d = -cho_solve(factor, g, check_finite=False)
            if np.all(np.isfinite(d)) and g @ d < 0:
                return d
        except LinAlgError:
            pass
        tau = max(10.0 * tau, 1e-6 * scale)
    return -g


@dataclass(frozen=True)
class AlphaStepResult:
    alpha: np.ndarray
    iterations: int
    grad_norm: float
    converged: bool
    objective_trace: tuple


def solve_alpha_step_problem(prob: DrdaProblem, w, alpha0) -> AlphaStepResult:
    s = prob.solver
    alpha = np.array(alpha0, dtype=np.float64)
    f = prob.alpha_objective(alpha, w)
    if not math.isfinite(f):
        raise SolverError("objective is not finite at the warm start", iteration=0)
    trace = [f]
    g = prob.alpha_gradient(alpha, w)
    gnorm = float(np.linalg.norm(g))
    it = 0
    stationary = converged = False
    while it < s.alpha_max_iter:
        if not np.any(g):
            converged = True
            break
        d = _newton_direction(prob.alpha_hessian(alpha, w), g)
        slope = float(g @ d)
        # Newton decrement: the gradient norm in the inverse-Hessian metric;
        # half its square estimates the remaining objective decrease
        if math.sqrt(max(-slope, 0.0)) <= s.alpha_tol:
            converged = True
            break
        if -slope <= DECREMENT_TOL * max(abs(f), 1e-12):
            # predicted decrease is at rounding level: gradient noise floor
            stationary = True
            break
        t = 1.0
        accepted = False
        while t > 1e-20:
            cand = alpha + t * d
            f_new = prob.alpha_objective(cand, w)
            if math.isfinite(f_new) and f_new <= f + s.armijo * t * slope:
                accepted = True
                break
            t *= s.backtrack
        if not accepted:
            if not math.isfinite(f_new):
                raise SolverError("no finite step along the descent direction", iteration=it)
            stationary = True
            break
        it += 1
        decrease = f - f_new
        alpha, f = cand, f_new
        trace.append(f)
        g = prob.alpha_gradient(alpha, w)
        gnorm = float(np.linalg.norm(g))
        if decrease <= DECREMENT_TOL * max(abs(f), 1e-12):
            stationary = True
            break
    return AlphaStepResult(alpha, it, gnorm, stationary or converged, tuple(trace))


def solve_weight_step_problem(prob: DrdaProblem, alpha, w0=None) -> WeightVector:
    s = prob.solver
    return solve_box_qp(prob.weight_qp(alpha), tol=s.qp_tol, max_iter=s.qp_max_iter, init=w0)


# public per-operation entry points -----------------------------------------

def _values(w):
    return w.values if isinstance(w, WeightVector) else np.asarray(w, dtype=np.float64)


def drda_objective(alpha, w, source: Dataset, target: Dataset, cfg: KernelConfig,
                   solver: SolverConfig) -> float:
    prob = DrdaProblem(source, target, cfg, solver)
    return prob.objective(np.asarray(alpha, dtype=np.float64), _values(w))


def alpha_gradient(alpha, w, source: Dataset, cfg: KernelConfig,
                   solver: SolverConfig) -> np.ndarray:
    """Gradient of the objective in alpha at fixed weights."""
    if solver.epsilon_mode != "user-lambda":
        raise InputError("alpha_gradient without a target needs epsilon_mode='user-lambda'")
    prob = DrdaProblem(source, None, cfg, solver)
    return prob.alpha_gradient(np.asarray(alpha, dtype=np.float64), _values(w))


def solve_alpha_step(w, alpha0, source: Dataset, cfg: KernelConfig, solver: SolverConfig,
                     target: Optional[Dataset] = None) -> AlphaStepResult:
    prob = DrdaProblem(source, target, cfg, solver)
    return solve_alpha_step_problem(prob, _values(w), alpha0)


def solve_weight_step(alpha, source: Dataset, target: Dataset, cfg: KernelConfig,
                      solver: SolverConfig, w0=None) -> WeightVector:
    prob = DrdaProblem(source, target, cfg, solver)
    return solve_weight_step_problem(prob, np.asarray(alpha, dtype=np.float64),
                                     None if w0 is None else _values(w0))


def _alternate(prob: DrdaProblem, alpha, w, start):
    s = prob.solver
    trace = [prob.objective(alpha, w)]
    converged = False
    it = 0
    wv = None
    for it in range(1, s.outer_max + 1):
        try:
            alpha = solve_alpha_step_problem(prob, w, alpha).alpha
        except SolverError as exc:
            raise SolverError(f"alpha step failed in outer iteration {it}: {exc}",
                              iteration=it) from exc
        wv = solve_weight_step_problem(prob, alpha, w)
        w = wv.values
        cur = prob.objective(alpha, w)
        prev = trace[-1]
        trace.append(cur)
        if (prev - cur) <= s.outer_tol * max(abs(prev), 1e-12):
            converged = True
            break
    return alpha, w, trace, converged, it


def fit_drda(source: Dataset, target: Dataset, cfg: KernelConfig,
             solver: SolverConfig = SolverConfig(), kmm_weights=None):
    """Alternating minimisation of the joint objective.

    The alternation starts from alpha = 0, w = 1 (alpha step first). With
    ``solver.kmm_warm_start`` it is also run from the sequential solution
    (KMM weights, then the alpha step), and the lower final objective wins,
    so the result is never worse than the two-stage pipeline. Precomputed
    KMM weights for that start may be passed as ``kmm_weights``.

    Returns ``(model, weights, report)``.
    """
    prob = DrdaProblem(source, target, cfg, solver)
    n = prob.n_s
    runs = {"uniform": _alternate(prob, np.zeros(n), np.ones(n), "uniform")}
    if solver.kmm_warm_start:
        if kmm_weights is None:
            kmm_weights = kmm_fit(source, target, cfg, solver.B, solver.c,
                                  tol=solver.qp_tol, max_iter=solver.qp_max_iter)
        w_kmm = _values(kmm_weights)
        a_seq = solve_alpha_step_problem(prob, w_kmm, np.zeros(n)).alpha
        runs["kmm"] = _alternate(prob, a_seq, w_kmm, "kmm")
    start = min(runs, key=lambda k: runs[k][2][-1])
    alpha, w, trace, converged, it = runs[start]
    model = RegressionModel(source.features, alpha, cfg.bandwidth)
    weights = WeightVector(w, solver.B, solver.c, converged=converged, iterations=it,
                           objective=trace[-1])
    report = FitReport(
        objective_trace=tuple(float(v) for v in trace),
        converged=converged,
        final_mmd_sq=prob.full_mmd_sq(w),
        final_weighted_risk=prob.weighted_risk(alpha, w),
        outer_iterations=it,
        start=start,
        penalty_weight=prob.penalty,
        candidates={k: float(v[2][-1]) for k, v in runs.items()},
    )
    return model, weights, report
