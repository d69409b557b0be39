"""Density-ratio estimation by Kernel Mean Matching.

The weight problems here all share one canonical form::

    minimise   0.5 w'Qw + q'w
    subject to 0 <= w_i <= B,  |sum(w) - n| <= n c

which is solved by a monotone spectral projected-gradient method. The
projection onto the box/slab intersection is computed exactly (a single
scalar shift found on a piecewise-linear function), and convergence is
certified by the Frank-Wolfe gap, an upper bound on the objective error.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from drda.errors import ConvergenceWarning, InputError
from drda.kernel_core import Dataset, KernelConfig, gram

DEFAULT_B = 10.0
DEFAULT_C = 0.05
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 10_000

_ARMIJO = 1e-4
_STEP_MIN, _STEP_MAX = 1e-12, 1e12
_STALL_STEPS = 20


@dataclass(frozen=True)
class QpSpec:
    quad: np.ndarray
    lin: np.ndarray
    box_bound: float
    sum_slack: float
    center: Optional[float] = None

    def __post_init__(self):
        Q = np.asarray(self.quad, dtype=np.float64)
        q = np.asarray(self.lin, dtype=np.float64).reshape(-1)
        n = q.shape[0]
        if Q.shape != (n, n):
            raise InputError(f"quadratic term has shape {Q.shape}, expected ({n}, {n})")
        if not np.allclose(Q, Q.T, rtol=0, atol=1e-12 * max(1.0, np.abs(Q).max())):
            raise InputError("quadratic term must be symmetric")
        if self.box_bound <= 0:
            raise InputError("box bound B must be positive")
        if self.sum_slack < 0:
            raise InputError("sum slack c must be non-negative")
        center = float(n if self.center is None else self.center)
        object.__setattr__(self, "quad", 0.5 * (Q + Q.T))
        object.__setattr__(self, "lin", q)
        object.__setattr__(self, "center", center)
        lo, hi = self.sum_bounds
        if lo > n * self.box_bound:
            raise InputError(
                f"infeasible: sum must reach {lo} but box allows at most {n * self.box_bound}")

    @property
    def size(self) -> int:
        return self.lin.shape[0]

    @property
    def sum_bounds(self):
        lo = max(self.center * (1.0 - self.sum_slack), 0.0)
        hi = self.center * (1.0 + self.sum_slack)
        return lo, hi

    def objective(self, w) -> float:
        return float(0.5 * w @ self.quad @ w + self.lin @ w)

    def gradient(self, w):
        return self.quad @ w + self.lin


@dataclass(frozen=True)
class WeightVector:
    """Non-negative source weights with the solver diagnostics that produced them."""

    values: np.ndarray
    box_bound: float
    sum_slack: float
    converged: bool = True
    iterations: int = 0
    objective: float = float("nan")
    gap: float = float("nan")
    objective_trace: tuple = field(default=(), repr=False)
    status: str = "given"

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.shape[0]

    def is_feasible(self, atol=1e-9) -> bool:
        n = len(self)
        v = self.values
        return bool(np.all(v >= 0) and np.all(v <= self.box_bound)
                    and abs(v.sum() - n) <= n * self.sum_slack + atol * n)

    @classmethod
    def uniform(cls, n, box_bound=DEFAULT_B, sum_slack=DEFAULT_C):
        return cls(np.ones(n), box_bound, sum_slack)


def project_box_slab(v, box_bound, lo, hi):
    """Euclidean projection of ``v`` onto {0 <= w <= B, lo <= sum(w) <= hi}.

    The projection has the form clip(v - tau, 0, B); tau is zero when the
    clipped point already satisfies the sum constraint, otherwise it is the
    root of a decreasing piecewise-linear function of tau.
    """
    v = np.asarray(v, dtype=np.float64)
    w = np.clip(v, 0.0, box_bound)
    s = w.sum()
    if lo <= s <= hi:
        return w
    target = hi if s > hi else lo
    tau = _shift_for_sum(v, box_bound, target)
    w = np.clip(v - tau, 0.0, box_bound)
    # absorb rounding drift into the free coordinates
    drift = w.sum() - target
    free = (w > 0) & (w < box_bound)
    if drift != 0 and free.any():
        w[free] = np.clip(w[free] - drift / free.sum(), 0.0, box_bound)
    return w


def _shift_for_sum(v, box_bound, target):
    # s(tau) = sum clip(v - tau, 0, B) is continuous, non-increasing and
    # linear between consecutive breakpoints {v_i, v_i - B}
    knots = np.unique(np.concatenate([v, v - box_bound]))

    def s(t):
        return np.clip(v - t, 0.0, box_bound).sum()

    lo_i, hi_i = 0, len(knots) - 1
    if s(knots[lo_i]) <= target:
        return knots[lo_i]
    if s(knots[hi_i]) >= target:
        return knots[hi_i]
    # invariant: s(knots[lo_i]) > target > s(knots[hi_i])
    while hi_i - lo_i > 1:
        mid = (lo_i + hi_i) // 2
        if s(knots[mid]) > target:
            lo_i = mid
        else:
            hi_i = mid
    t0, t1 = knots[lo_i], knots[hi_i]
    s0, s1 = s(t0), s(t1)
    return t0 + (s0 - target) * (t1 - t0) / (s0 - s1)


def linear_minimiser(g, box_bound, lo, hi):
    """Vertex of the box/slab set minimising the linear function g'w."""
    n = g.shape[0]
    w = np.zeros(n)
    order = np.argsort(g, kind="stable")
    total = 0.0
    for i in order:
        if g[i] < 0:
            room = hi - total
        else:
            room = lo - total
        if room <= 0:
            break
        w[i] = min(box_bound, room)
        total += w[i]
    return w


def frank_wolfe_gap(spec: QpSpec, w, g=None) -> float:
    """max over feasible v of g'(w - v); bounds f(w) - f* from above."""
    if g is None:
        g = spec.gradient(w)
    lo, hi = spec.sum_bounds
    v = linear_minimiser(g, spec.box_bound, lo, hi)
    return float(g @ (w - v))


def _line_step(spec: QpSpec, w, g, d, lo, hi, slab_active=False):
    """Exact minimising step along ``d``, truncated at the first blocking constraint.

    Returns (t, blocking) where ``blocking`` is the coordinate index, the
    string "slab", or None when the unconstrained line minimum was reached.
    With ``slab_active`` the direction keeps the sum fixed and the sum
    constraint is not tested (its rounding-level drift would block every step).
    """
    slope = g @ d
    curv = d @ spec.quad @ d
    t = -slope / curv if curv > 0 else np.inf
    blocking = None
    B = spec.box_bound
    with np.errstate(divide="ignore", invalid="ignore"):
        lim = np.where(d < 0, -w / d, np.where(d > 0, (B - w) / d, np.inf))
    i = int(np.argmin(lim))
    if lim[i] < t:
        t, blocking = float(lim[i]), i
    ds, total = d.sum(), w.sum()
    if slab_active:
        pass
    elif ds > 0 and (hi - total) / ds < t:
        t, blocking = (hi - total) / ds, "slab"
    elif ds < 0 and (lo - total) / ds < t:
        t, blocking = (lo - total) / ds, "slab"
    return max(float(t), 0.0), blocking


def _active_set_refine(spec: QpSpec, w, budget):
    """Primal active-set iterations started from a feasible ``w``.

    The working set holds coordinates fixed at 0 or B and, optionally, the
    sum constraint as an equality. Each iteration either moves towards the
    minimiser of the QP on the working face (adding the first constraint it
    hits) or, at that minimiser, releases the constraint whose multiplier has
    the wrong sign. The objective is tracked through the exact quadratic
    change of each step. Returns (w, objectives, iterations, kkt_ok).
    """
    B = spec.box_bound
    lo, hi = spec.sum_bounds
    n = spec.size
    Q, q = spec.quad, spec.lin
    fixed = (w <= 0) | (w >= B)
    total = w.sum()
    slab = abs(total - lo) <= 1e-12 * max(1.0, lo) or abs(total - hi) <= 1e-12 * max(1.0, hi)
    f = spec.objective(w)
    trace = []
    it = 0
    while it < budget:
        it += 1
        g = Q @ w + q
        free = np.flatnonzero(~fixed)
        k = free.size
        d = np.zeros(n)
        nu = 0.0
        if k:
            if slab:
                A = np.zeros((k + 1, k + 1))
                A[:k, :k] = Q[np.ix_(free, free)]
                A[:k, k] = A[k, :k] = 1.0
                b = np.append(-g[free], 0.0)
            else:
                A, b = Q[np.ix_(free, free)], -g[free]
            sol = np.linalg.lstsq(A, b, rcond=None)[0]
            d[free] = sol[:k]
            if slab:
                d[free] -= d[free].mean()
                nu = float(sol[k])
        tol = 1e-12 * max(1.0, np.abs(g).max())
        reduced = g[free] - g[free].mean() if slab else g[free]
        off_face_min = k and (np.abs(reduced).max() > tol or (g @ d) < -1e-15 * max(1.0, abs(f)))
        if off_face_min and (g @ d) < 0:
            t, blocking = _line_step(spec, w, g, d, lo, hi, slab)
            # exact change of the quadratic along the step; evaluating f twice
            # would bury it under the rounding of f itself near the optimum
            change = t * (g @ d) + 0.5 * t * t * (d @ Q @ d)
            if change > 0:
                return w, trace, it, False
            w, f = np.clip(w + t * d, 0.0, B), f + change
            trace.append(f)
            if blocking == "slab":
                slab = True
            elif blocking is not None:
                fixed[blocking] = True
                w[blocking] = 0.0 if d[blocking] < 0 else B
            continue
        # at the face minimiser: check multiplier signs
        if slab and not k:
            # nu is free here; pick the value violating the fewest bounds
            at0, atB = fixed & (w <= 0), fixed & (w >= B)
            lo_nu = float(np.max(-g[at0])) if at0.any() else -np.inf
            hi_nu = float(np.min(-g[atB])) if atB.any() else np.inf
            nu = min(max(0.0, lo_nu), hi_nu) if lo_nu <= hi_nu else 0.5 * (lo_nu + hi_nu)
        r = g + nu
        viol = np.zeros(n)
        viol[fixed & (w <= 0)] = np.maximum(-r[fixed & (w <= 0)], 0.0)
        viol[fixed & (w >= B)] = np.maximum(r[fixed & (w >= B)], 0.0)
        slab_viol = 0.0
        if slab:
            at_lo = abs(w.sum() - lo) <= abs(w.sum() - hi)
            slab_viol = max(nu, 0.0) if at_lo else max(-nu, 0.0)
        i = int(np.argmax(viol))
        if max(viol[i], slab_viol) <= tol:
            return w, trace, it, True
        if slab_viol >= viol[i]:
            slab = False
        else:
            fixed[i] = False
    return w, trace, it, False


def _face_signature(w, B, lo, hi):
    total = w.sum()
    return ((w <= 0).tobytes(), (w >= B).tobytes(), total <= lo, total >= hi)


def solve_box_qp(spec: QpSpec, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                 init=None) -> WeightVector:
    """Minimise 0.5 w'Qw + q'w over the box/slab set.

    Starts from w = 1 (projected) unless ``init`` is given. Each accepted
    projected-gradient step satisfies an Armijo condition, so the recorded
    objective trace never increases. When the Frank-Wolfe gap is not yet
    below ``tol`` (usual on ill-conditioned Gram matrices), the remaining
    iteration budget goes to an active-set phase that ends at an exact KKT
    point of the final face.

    Status is ``"gap"`` if the Frank-Wolfe gap certifies ``tol``,
    ``"kkt"`` if the active-set phase verified the optimality conditions,
    and ``"stationary"`` if no step lowers the objective at working
    precision. Otherwise a ``ConvergenceWarning`` is issued and
    ``converged=False``.
    """
    if tol <= 0:
        raise InputError("tol must be positive")
    n = spec.size
    lo, hi = spec.sum_bounds
    B = spec.box_bound
    w = np.ones(n) if init is None else np.asarray(init, dtype=np.float64).copy()
    w = project_box_slab(w, B, lo, hi)
    f = spec.objective(w)
    g = spec.gradient(w)
    trace = [f]

    L = float(np.abs(spec.quad).sum(axis=1).max()) if n else 0.0
    step = 1.0 / L if L > 0 else 1.0
    gap = frank_wolfe_gap(spec, w, g)
    status = "gap" if gap <= tol else None
    it = 0
    stalls = same_face = 0
    face = _face_signature(w, B, lo, hi)
    # projected gradient; hands over to the active-set phase once progress
    # stalls or the set of active constraints stops changing
    pg_budget = max_iter // 2
    while status is None and it < pg_budget:
        it += 1
        t = step
        while True:
            w_new = project_box_slab(w - t * g, B, lo, hi)
            d = w_new - w
            f_new = spec.objective(w_new)
            if f_new <= f + _ARMIJO * (g @ d) or t < _STEP_MIN:
                break
            t *= 0.5
        if f_new > f or not np.any(d):
            break
        stalls = stalls + 1 if f - f_new <= 1e-12 * max(1.0, abs(f)) else 0
        new_face = _face_signature(w_new, B, lo, hi)
        same_face = same_face + 1 if new_face == face else 0
        face = new_face
        g_new = spec.gradient(w_new)
        s, y = d, g_new - g
        sy = s @ y
        step = float(np.clip(s @ s / sy, _STEP_MIN, _STEP_MAX)) if sy > 0 else _STEP_MAX
        w, f, g = w_new, f_new, g_new
        trace.append(f)
        gap = frank_wolfe_gap(spec, w, g)
        if gap <= tol:
            status = "gap"
        elif stalls >= _STALL_STEPS or same_face >= _STALL_STEPS:
            break

    if status is None and it < max_iter:
        w_ref, ref_trace, used, kkt = _active_set_refine(spec, w, max_iter - it)
        it += used
        if ref_trace:
            w, f = w_ref, ref_trace[-1]
            trace.extend(ref_trace)
            g = spec.gradient(w)
            gap = frank_wolfe_gap(spec, w, g)
        if gap <= tol:
            status = "gap"
        elif kkt:
            status = "kkt"
        elif it < max_iter:
            status = "stationary"

    converged = status is not None
    if not converged:
        warnings.warn(
            f"box QP stopped after {it} iterations with Frank-Wolfe gap {gap:.3e} > tol {tol:.1e}",
            ConvergenceWarning, stacklevel=2)
    return WeightVector(w, B, spec.sum_slack, converged=converged, iterations=it,
                        objective=f, gap=gap, objective_trace=tuple(trace),
                        status=status or "max_iter")


def kmm_qp(source: Dataset, target: Dataset, cfg: KernelConfig,
           B=DEFAULT_B, c=DEFAULT_C) -> QpSpec:
    """QP whose objective is the weighted squared MMD minus its constant term."""
    _check_pair(source, target)
    ns, nt = len(source), len(target)
    ks = gram(source, source, cfg).entries
    kst = gram(source, target, cfg).entries
    return QpSpec(2.0 / ns ** 2 * ks, -2.0 / (ns * nt) * kst.sum(axis=1), B, c)


def kmm_fit(source: Dataset, target: Dataset, cfg: KernelConfig,
            B=DEFAULT_B, c=DEFAULT_C, tol=DEFAULT_TOL,
            max_iter=DEFAULT_MAX_ITER) -> WeightVector:
    """Kernel Mean Matching weights for ``source`` against ``target``."""
    return solve_box_qp(kmm_qp(source, target, cfg, B, c), tol=tol, max_iter=max_iter)


def _check_pair(source, target):
    if len(source) == 0 or len(target) == 0:
        raise InputError("source and target must be nonempty")
    if source.dim != target.dim:
        raise InputError(f"dimension mismatch: {source.dim} vs {target.dim}")
