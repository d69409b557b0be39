import json

import numpy as np
import pytest
from scipy.optimize import linprog

from conftest import labeling_function
from oracles import ExtendedAlphaObjective, drda_objective_loops
from drda.baselines import fit_dro_source_only, fit_rls, fit_wdro
from drda.density_ratio import kmm_fit, project_box_slab
from drda.errors import InputError
from drda.kernel_core import Dataset, KernelConfig, gram, mmd_terms
from drda.solver import (
    DrdaProblem, RegressionModel, SolverConfig, alpha_gradient, drda_objective, fit_drda,
    predict, solve_alpha_step, solve_weight_step,
)


def toy(r, ns=6, nt=5, dim=1, shift=1.0):
    xs = r.normal(0.5 * shift, 0.6, size=(ns, dim))
    xt = r.normal(-0.5 * shift, 0.7, size=(nt, dim))
    y = labeling_function(xs[:, 0]) + 0.1 * r.normal(size=ns)
    return Dataset(xs, y), Dataset(xt)


def test_objective_at_zero_function(rng):
    S, T = toy(rng)
    cfg, sc = KernelConfig(1.0), SolverConfig(beta=3.0, lam=0.7)
    q, c, _ = mmd_terms(S, np.ones(len(S)), T, cfg)
    got = drda_objective(np.zeros(len(S)), np.ones(len(S)), S, T, cfg, sc)
    assert got == pytest.approx(np.mean(S.labels ** 2) + 3.0 * (q - 2 * c), rel=1e-12)


def test_objective_penalty_free_reduction(rng):
    S, T = toy(rng)
    cfg = KernelConfig(0.8)
    alpha = rng.normal(size=len(S))
    K = gram(S, S, cfg).entries
    r = K @ alpha - S.labels
    got = drda_objective(alpha, np.ones(len(S)), S, T, cfg, SolverConfig(beta=0, lam=0))
    assert got == pytest.approx(r @ r / len(S), rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_objective_matches_loop_oracle(seed):
    r = np.random.default_rng(seed)
    S, T = toy(r, ns=4, nt=3, dim=2)
    alpha, w = r.normal(size=4), r.uniform(0, 3, size=4)
    sc = SolverConfig(beta=r.uniform(0, 5), lam=r.uniform(0, 2))
    expected = drda_objective_loops(alpha, w, S.features, S.labels, T.features, 0.9, sc.beta, sc.lam)
    got = drda_objective(alpha, w, S, T, KernelConfig(0.9), sc)
    assert got == pytest.approx(float(expected), rel=1e-11)


def test_objective_requires_labels(rng):
    S, T = toy(rng)
    with pytest.raises(InputError):
        drda_objective(np.zeros(len(S)), np.ones(len(S)), S.unlabeled(), T, KernelConfig(1.0), SolverConfig())


def test_gradient_at_origin(rng):
    S, _ = toy(rng)
    cfg = KernelConfig(1.0)
    w = rng.uniform(0, 2, size=len(S))
    K = gram(S, S, cfg).entries
    g = alpha_gradient(np.zeros(len(S)), w, S, cfg, SolverConfig(lam=2.0))
    np.testing.assert_allclose(g, -2.0 / len(S) * K @ (w * S.labels), rtol=1e-12, atol=1e-15)


def test_gradient_without_penalty(rng):
    S, _ = toy(rng)
    cfg = KernelConfig(1.0)
    w, alpha = rng.uniform(0, 2, size=len(S)), rng.normal(size=len(S))
    K = gram(S, S, cfg).entries
    g = alpha_gradient(alpha, w, S, cfg, SolverConfig(lam=0.0))
    np.testing.assert_allclose(g, 2.0 / len(S) * K @ (w * (K @ alpha - S.labels)), rtol=1e-12)


@pytest.mark.parametrize("seed", range(8))
def test_gradient_matches_finite_differences(seed):
    r = np.random.default_rng(100 + seed)
    S, _ = toy(r, ns=5, dim=2)
    w, alpha = r.uniform(0, 3, size=5), r.normal(scale=2.0, size=5)
    lam = [0.0, 0.5, 2.0, 0.1][seed % 4]
    g = alpha_gradient(alpha, w, S, KernelConfig(1.1), SolverConfig(lam=lam))
    fd = ExtendedAlphaObjective(S.features, S.labels, w, 1.1, lam).central_difference(alpha)
    rel = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-12)
    assert rel.max() <= 1e-5


def test_hessian_matches_gradient_differences(rng):
    S, T = toy(rng, ns=5)
    prob = DrdaProblem(S, T, KernelConfig(1.0), SolverConfig(lam=0.8))
    alpha, w = rng.normal(size=5), rng.uniform(0, 2, size=5)
    H = prob.alpha_hessian(alpha, w)
    h = 1e-6
    fd = np.column_stack([
        (prob.alpha_gradient(alpha + h * e, w) - prob.alpha_gradient(alpha - h * e, w)) / (2 * h)
        for e in np.eye(5)])
    np.testing.assert_allclose(H, fd, rtol=1e-5, atol=1e-7)


def test_alpha_step_least_squares_reduction():
    x = np.array([-1.0, 0.0, 0.7, 1.5, 2.4])
    y = labeling_function(x)
    S = Dataset(x, y)
    cfg = KernelConfig(1.0)
    res = solve_alpha_step(np.ones(5), np.zeros(5), S, cfg, SolverConfig(lam=0.0))
    K = gram(S, S, cfg).entries
    expected = np.linalg.solve(K.T @ K, K.T @ y)
    np.testing.assert_allclose(res.alpha, expected, rtol=1e-6)
    assert res.converged


def test_alpha_step_fixed_point(rng):
    S, T = toy(rng)
    cfg, sc = KernelConfig(1.0), SolverConfig(lam=0.5)
    w = np.ones(len(S))
    first = solve_alpha_step(w, np.zeros(len(S)), S, cfg, sc)
    again = solve_alpha_step(w, first.alpha, S, cfg, sc)
    assert again.iterations == 0
    np.testing.assert_array_equal(again.alpha, first.alpha)


def test_alpha_step_ignores_beta(rng):
    S, T = toy(rng)
    cfg = KernelConfig(1.0)
    w = rng.uniform(0, 2, size=len(S))
    a = solve_alpha_step(w, np.zeros(len(S)), S, cfg, SolverConfig(beta=0.0), target=T).alpha
    b = solve_alpha_step(w, np.zeros(len(S)), S, cfg, SolverConfig(beta=50.0), target=T).alpha
    np.testing.assert_array_equal(a, b)


def test_alpha_step_monotone(rng):
    S, _ = toy(rng, ns=12)
    res = solve_alpha_step(rng.uniform(0, 3, 12), rng.normal(size=12), S, KernelConfig(1.0),
                           SolverConfig(lam=0.3))
    assert np.all(np.diff(res.objective_trace) <= 0)


def test_weight_step_linear_case_matches_lp(rng):
    S, T = toy(rng, ns=6)
    cfg = KernelConfig(1.0)
    sc = SolverConfig(beta=0.0, B=2.5, c=0.2)
    alpha = rng.normal(size=6)
    K = gram(S, S, cfg).entries
    cost = (K @ alpha - S.labels) ** 2 / 6
    w = solve_weight_step(alpha, S, T, cfg, sc)
    lp = linprog(cost, A_ub=np.vstack([np.ones(6), -np.ones(6)]), b_ub=[6 * 1.2, -6 * 0.8],
                 bounds=[(0, 2.5)] * 6, method="highs")
    assert cost @ w.values == pytest.approx(lp.fun, abs=1e-10)
    # the mass sits on the smallest residuals
    order = np.argsort(cost)
    assert np.all(np.diff(w.values[order]) <= 1e-12)


def test_weight_step_constant_residuals():
    x = np.linspace(-1, 1, 5)
    S = Dataset(x, np.ones(5))
    sc = SolverConfig(beta=0.0, c=0.0)
    w = solve_weight_step(np.zeros(5), S, Dataset([0.0]), KernelConfig(1.0), sc)
    np.testing.assert_allclose(w.values, np.ones(5), atol=1e-12)


def test_weight_step_zero_residuals_is_kmm(rng):
    xs = rng.normal(0.5, 0.6, size=(8, 1))
    xt = rng.normal(-0.3, 0.7, size=(7, 1))
    cfg = KernelConfig(1.0)
    alpha = rng.normal(size=8)
    S = Dataset(xs, gram(Dataset(xs), Dataset(xs), cfg).entries @ alpha)
    T = Dataset(xt)
    sc = SolverConfig(beta=4.0, B=3.0, c=0.1)
    w = solve_weight_step(alpha, S, T, cfg, sc)
    ref = kmm_fit(S, T, cfg, B=3.0, c=0.1)
    prob = DrdaProblem(S, T, cfg, sc)
    assert prob.mmd_part(w.values) == pytest.approx(prob.mmd_part(ref.values), abs=1e-9)
    np.testing.assert_allclose(w.values, ref.values, atol=1e-3)


def test_fit_reduces_to_source_only_without_shift():
    # spread-out points keep the Gram well conditioned, so the MMD pins w = 1
    x = np.linspace(-3, 3, 10)
    S = Dataset(x, labeling_function(x))
    T = S.unlabeled()
    cfg = KernelConfig(0.5)
    sc = SolverConfig(beta=1e5, lam=0.3)
    model, w, report = fit_drda(S, T, cfg, sc)
    ref = fit_dro_source_only(S, cfg, sc)
    np.testing.assert_allclose(w.values, np.ones(10), atol=2e-3)
    np.testing.assert_allclose(model.predict(S), ref.predict(S), atol=1e-3)


def test_fit_trace_and_feasibility(rng):
    S, T = toy(rng, ns=15, nt=12)
    model, w, report = fit_drda(S, T, KernelConfig(1.0), SolverConfig())
    assert report.is_monotone()
    assert w.is_feasible()
    assert report.final_mmd_sq >= -1e-10
    assert report.objective_trace[-1] == pytest.approx(
        drda_objective(model.alpha, w, S, T, KernelConfig(1.0), SolverConfig()), rel=1e-12)


def test_joint_not_worse_than_sequential(rng):
    cfg, sc = KernelConfig(1.0), SolverConfig()
    S, T = toy(rng, ns=8, nt=8)
    model, w, report = fit_drda(S, T, cfg, sc)
    seq_model, w_kmm = fit_wdro(S, T, cfg, sc)
    seq = drda_objective(seq_model.alpha, w_kmm, S, T, cfg, sc)
    assert report.objective_trace[-1] <= seq + 1e-12


def test_fit_is_deterministic(rng):
    S, T = toy(rng, ns=10, nt=9)
    a = fit_drda(S, T, KernelConfig(1.0), SolverConfig())
    b = fit_drda(S, T, KernelConfig(1.0), SolverConfig())
    np.testing.assert_array_equal(a[0].alpha, b[0].alpha)
    assert a[2].objective_trace == b[2].objective_trace


def test_theorem1_penalty_mode(rng):
    S, T = toy(rng, ns=10, nt=9)
    sc = SolverConfig(epsilon_mode="theorem1", B=2.0)
    prob = DrdaProblem(S, T, KernelConfig(1.0), sc)
    from drda.ambiguity_bounds import AmbiguityParams, radius_target_in_transferred_set
    assert prob.penalty == radius_target_in_transferred_set(AmbiguityParams(2.0, 10, 9))
    _, _, report = fit_drda(S, T, KernelConfig(1.0), sc)
    assert report.penalty_weight == prob.penalty and report.is_monotone()


def test_split_ridge_weight(rng):
    S, T = toy(rng)
    alpha = rng.normal(size=len(S))
    w = np.ones(len(S))
    cfg = KernelConfig(1.0)
    a = drda_objective(alpha, w, S, T, cfg, SolverConfig(lam=1.0, ridge_lam=0.0))
    b = drda_objective(alpha, w, S, T, cfg, SolverConfig(lam=1.0))
    K = gram(S, S, cfg).entries
    assert b - a == pytest.approx(alpha @ K @ alpha, rel=1e-10)


def test_subproblem_local_optimality(rng):
    S, T = toy(rng, ns=10, nt=10)
    cfg, sc = KernelConfig(1.0), SolverConfig()
    model, w, _ = fit_drda(S, T, cfg, sc)
    prob = DrdaProblem(S, T, cfg, sc)
    base = prob.objective(model.alpha, w.values)
    lo, hi = 10 * (1 - sc.c), 10 * (1 + sc.c)
    for _ in range(50):
        d = rng.normal(size=10)
        d *= 1e-3 / np.linalg.norm(d)
        assert prob.objective(model.alpha + d, w.values) >= base - 1e-6
        wp = project_box_slab(w.values + d, sc.B, lo, hi)
        assert prob.objective(model.alpha, wp) >= base - 1e-6


def test_predict_basics(rng):
    x = rng.normal(size=(4, 2))
    m0 = RegressionModel(x, np.zeros(4), 1.0)
    assert predict(m0, [0.3, 0.1]) == 0.0
    m1 = RegressionModel(x, np.eye(4)[0], 0.7)
    q = np.array([0.2, -0.4])
    assert predict(m1, q) == pytest.approx(np.exp(-np.sum((x[0] - q) ** 2) / (2 * 0.49)), rel=1e-14)
    with pytest.raises(InputError):
        predict(m1, [0.0, 0.0, 0.0])


def test_predictions_scale_with_labels(rng):
    x = rng.normal(size=12)
    y = labeling_function(x)
    cfg = KernelConfig(1.0)
    p1 = fit_rls(Dataset(x, y), cfg, 0.5).predict(x)
    p3 = fit_rls(Dataset(x, 3 * y), cfg, 0.5).predict(x)
    np.testing.assert_allclose(p3, 3 * p1, rtol=1e-10)


def test_model_json_round_trip(rng):
    m = RegressionModel(rng.normal(size=(5, 2)), rng.normal(size=5) * 1e3, np.pi / 3)
    back = RegressionModel.from_json(m.to_json())
    np.testing.assert_array_equal(back.alpha, m.alpha)
    np.testing.assert_array_equal(back.support_points, m.support_points)
    assert back.bandwidth == m.bandwidth
    assert set(json.loads(m.to_json())) == {"sigma", "support_points", "alpha"}
