import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import spearmanr

from drda.density_ratio import (
    QpSpec, WeightVector, frank_wolfe_gap, kmm_fit, kmm_qp, project_box_slab, solve_box_qp,
)
from drda.errors import ConvergenceWarning, InputError
from drda.kernel_core import Dataset, KernelConfig, mmd_sq_weighted


def active_set_oracle(Q, q, B, lo, hi):
    """Enumerate every face of the box/slab polytope and keep the best KKT point."""
    n = len(q)
    best, best_w = np.inf, None
    for states in itertools.product((0, 1, 2), repeat=n):  # 0: at 0, 1: at B, 2: free
        fixed = np.array([s != 2 for s in states])
        w = np.where(np.array(states) == 1, B, 0.0).astype(float)
        free = np.flatnonzero(~fixed)
        for slab in (None, lo, hi):
            if free.size == 0:
                cand = w.copy()
            else:
                Qff = Q[np.ix_(free, free)]
                rhs = -(q[free] + Q[np.ix_(free, np.flatnonzero(fixed))] @ w[fixed])
                if slab is None:
                    A, b = Qff, rhs
                else:
                    k = free.size
                    A = np.zeros((k + 1, k + 1))
                    A[:k, :k], A[:k, k], A[k, :k] = Qff, 1.0, 1.0
                    b = np.append(rhs, slab - w[fixed].sum())
                sol = np.linalg.lstsq(A, b, rcond=None)[0]
                if np.linalg.norm(A @ sol - b) > 1e-9 * (1 + np.linalg.norm(b)):
                    continue
                cand = w.copy()
                cand[free] = sol[:free.size]
            if np.all(cand >= -1e-10) and np.all(cand <= B + 1e-10) \
                    and lo - 1e-10 <= cand.sum() <= hi + 1e-10:
                val = 0.5 * cand @ Q @ cand + q @ cand
                if val < best:
                    best, best_w = val, cand
    return best, best_w


def test_interior_minimum():
    spec = QpSpec(np.eye(3), -np.ones(3), box_bound=10.0, sum_slack=1.0)
    w = solve_box_qp(spec)
    np.testing.assert_allclose(w.values, np.ones(3), atol=1e-8)
    assert w.converged


def test_symmetric_problem_with_tight_sum():
    spec = QpSpec(np.eye(4), np.zeros(4), box_bound=3.0, sum_slack=0.0)
    w = solve_box_qp(spec)
    np.testing.assert_allclose(w.values, np.ones(4), atol=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_matches_active_set_enumeration(seed):
    r = np.random.default_rng(seed)
    A = r.normal(size=(5, 5))
    Q = A @ A.T + 0.05 * np.eye(5)
    q = r.normal(scale=3.0, size=5)
    spec = QpSpec(Q, q, box_bound=2.0, sum_slack=0.1)
    lo, hi = spec.sum_bounds
    best, _ = active_set_oracle(Q, q, 2.0, lo, hi)
    w = solve_box_qp(spec)
    assert w.objective == pytest.approx(best, abs=1e-5)
    assert w.objective >= best - 1e-9
    assert w.is_feasible()


def test_singular_quadratic_against_enumeration():
    r = np.random.default_rng(11)
    A = r.normal(size=(5, 2))
    Q = A @ A.T
    q = r.normal(size=5)
    spec = QpSpec(Q, q, box_bound=2.0, sum_slack=0.1)
    best, _ = active_set_oracle(Q, q, 2.0, *spec.sum_bounds)
    assert solve_box_qp(spec).objective == pytest.approx(best, abs=1e-5)


def test_objective_trace_non_increasing():
    r = np.random.default_rng(3)
    A = r.normal(size=(30, 30))
    spec = QpSpec(A @ A.T / 30, r.normal(size=30), box_bound=4.0, sum_slack=0.05)
    w = solve_box_qp(spec)
    assert np.all(np.diff(w.objective_trace) <= 0)
    assert w.gap <= 1e-8


def test_iteration_cap_warns():
    r = np.random.default_rng(4)
    A = r.normal(size=(40, 40))
    spec = QpSpec(A @ A.T, r.normal(size=40) * 10, box_bound=5.0, sum_slack=0.05)
    with pytest.warns(ConvergenceWarning):
        w = solve_box_qp(spec, tol=1e-14, max_iter=2)
    assert not w.converged and w.iterations == 2
    assert w.is_feasible()


def test_infeasible_box_rejected():
    with pytest.raises(InputError):
        QpSpec(np.eye(3), np.zeros(3), box_bound=0.5, sum_slack=0.1)
    with pytest.raises(InputError):
        QpSpec(np.array([[1.0, 2.0], [0.0, 1.0]]), np.zeros(2), box_bound=2.0, sum_slack=0.1)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 12), st.floats(1.0, 5.0), st.floats(0.0, 0.5), st.integers(0, 2**31))
def test_projection_is_feasible_and_optimal(n, B, c, seed):
    r = np.random.default_rng(seed)
    v = r.normal(scale=4.0, size=n)
    lo, hi = max(n * (1 - c), 0.0), n * (1 + c)
    p = project_box_slab(v, B, lo, hi)
    assert np.all(p >= 0) and np.all(p <= B)
    assert lo - 1e-9 <= p.sum() <= hi + 1e-9
    # variational inequality of the projection against random feasible points
    for _ in range(10):
        z = project_box_slab(r.uniform(0, B, size=n), B, lo, hi)
        assert (v - p) @ (z - p) <= 1e-8


def test_frank_wolfe_gap_bounds_error():
    r = np.random.default_rng(8)
    A = r.normal(size=(5, 5))
    Q, q = A @ A.T, r.normal(size=5)
    spec = QpSpec(Q, q, box_bound=2.0, sum_slack=0.1)
    best, _ = active_set_oracle(Q, q, 2.0, *spec.sum_bounds)
    w = np.ones(5)
    assert spec.objective(w) - best <= frank_wolfe_gap(spec, w) + 1e-12


def test_kmm_identical_samples_gives_unit_weights():
    x = np.array([[-1.0], [-0.2], [0.5], [1.4], [2.5]])
    w = kmm_fit(Dataset(x), Dataset(x), KernelConfig(1.0))
    np.testing.assert_allclose(w.values, np.ones(5), atol=1e-4)


def test_kmm_qp_objective_is_mmd_minus_constant(rng):
    xs, xt = rng.normal(size=(6, 2)), rng.normal(size=(4, 2))
    cfg = KernelConfig(1.1)
    spec = kmm_qp(Dataset(xs), Dataset(xt), cfg)
    w = rng.uniform(0, 2, 6)
    const = mmd_sq_weighted(Dataset(xs[:1]), [0.0], Dataset(xt), cfg)
    assert spec.objective(w) + const == pytest.approx(
        mmd_sq_weighted(Dataset(xs), w, Dataset(xt), cfg), rel=1e-12)


def test_kmm_weights_favour_target_side(rng):
    xs = rng.normal(1.0, 0.5, size=100)
    xt = rng.normal(-1.0, 0.6, size=100)
    w = kmm_fit(Dataset(xs), Dataset(xt), KernelConfig(1.0))
    assert spearmanr(w.values, xs).statistic < 0
    assert w.is_feasible()


def test_kmm_never_worse_than_uniform():
    cfg = KernelConfig(1.0)
    for seed in range(20):
        r = np.random.default_rng(seed)
        xs = r.normal(r.normal(), r.uniform(0.3, 2), size=(r.integers(3, 30), 2))
        xt = r.normal(r.normal(), r.uniform(0.3, 2), size=(r.integers(3, 30), 2))
        S, T = Dataset(xs), Dataset(xt)
        w = kmm_fit(S, T, cfg, B=5.0, c=0.1)
        assert w.is_feasible()
        assert mmd_sq_weighted(S, w.values, T, cfg) <= mmd_sq_weighted(S, np.ones(len(xs)), T, cfg) + 1e-10


def test_weight_vector_uniform():
    w = WeightVector.uniform(4)
    assert w.is_feasible() and len(w) == 4
