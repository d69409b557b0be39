"""Synthetic covariate-shift benchmark: data generation, sweeps and summaries.

Randomness comes from numpy's counter-based Philox generator. Every stream is
keyed by ``SeedSequence(base_seed, spawn_key=(trial, stream, *extra))`` so a
trial's data does not depend on how many other trials run, in which order,
or on which worker. Perturbation noise is keyed by the noise level itself
(in units of 1e-9), so the draw for a given (trial, rho) is the same whatever
grid it appears in.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from drda.baselines import METHODS, fit_dro_source_only, fit_rls, fit_wdro, fit_wrls
from drda.density_ratio import kmm_fit
from drda.errors import InputError, SolverError
from drda.kernel_core import Dataset, KernelConfig
from drda.solver import SolverConfig, fit_drda

RNG_NAME = "numpy.random.Philox"
STREAMS = {"source": 0, "target": 1, "test": 2, "source_noise": 3, "test_noise": 4, "perturb": 5}
PERTURB_KINDS = ("features", "labels")
DEFAULT_RHO_GRID = tuple(round(0.1 * i, 10) for i in range(11))
Z_95 = 1.96
THREADS_ENV = "DRDA_THREADS"


@dataclass(frozen=True)
class SyntheticConfig:
    source_mean: float = 1.0
    source_std: float = 0.5
    target_mean: float = -1.0
    target_std: float = 0.6
    label_noise_std: float = 0.1
    sigma_for_g: float = 1.0
    n_s: int = 100
    n_t: int = 100
    n_test: int = 500
    trials: int = 50
    base_seed: int = 0

    def __post_init__(self):
        for name in ("source_std", "target_std", "sigma_for_g"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise InputError(f"{name} must be positive, got {v}")
        if not (math.isfinite(self.label_noise_std) and self.label_noise_std >= 0):
            raise InputError(f"label_noise_std must be non-negative, got {self.label_noise_std}")
        for name in ("n_s", "n_t", "n_test", "trials"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise InputError(f"{name} must be a positive integer, got {v!r}")
        if isinstance(self.base_seed, bool) or not isinstance(self.base_seed, (int, np.integer)) \
                or self.base_seed < 0:
            raise InputError(f"base_seed must be a non-negative integer, got {self.base_seed!r}")

    def replace(self, **changes) -> "SyntheticConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class SweepSpec:
    rho_grid: tuple = DEFAULT_RHO_GRID
    perturb: str = "features"
    methods: tuple = METHODS

    def __post_init__(self):
        grid = tuple(float(r) for r in self.rho_grid)
        if not grid:
            raise InputError("rho grid must be nonempty")
        if any(not math.isfinite(r) or r < 0 for r in grid):
            raise InputError(f"noise levels must be finite and non-negative, got {grid}")
        if self.perturb not in PERTURB_KINDS:
            raise InputError(f"perturb must be one of {PERTURB_KINDS}, got {self.perturb!r}")
        methods = tuple(self.methods)
        unknown = [m for m in methods if m not in METHODS]
        if not methods or unknown:
            raise InputError(f"methods must be a nonempty subset of {METHODS}, got {methods}")
        object.__setattr__(self, "rho_grid", grid)
        object.__setattr__(self, "methods", methods)


@dataclass(frozen=True)
class ResultRow:
    method: str
    x: float
    mean_loss: float
    ci_half_width: float
    trials: int
    failures: int = 0


@dataclass
class ResultTable:
    """Aggregated losses plus the per-trial values they were computed from.

    ``x_name`` is ``"rho"`` for noise sweeps and ``"sample_size"`` for size
    sweeps. Failed fits appear in ``per_trial`` with a NaN loss.
    """

    x_name: str
    rows: list
    per_trial: list
    meta: dict = field(default_factory=dict)

    def row(self, method, x) -> ResultRow:
        for r in self.rows:
            if r.method == method and r.x == x:
                return r
        raise KeyError((method, x))

    def series(self, method):
        pts = [(r.x, r.mean_loss) for r in self.rows if r.method == method]
        return [p[0] for p in pts], [p[1] for p in pts]

    def losses(self, method, x):
        return np.array([loss for m, v, _, loss in self.per_trial if m == method and v == x])

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["method", self.x_name, "mean_loss", "ci_half_width", "trials"])
            for r in self.rows:
                out.writerow([r.method, _fmt(r.x), _fmt(r.mean_loss), _fmt(r.ci_half_width), r.trials])

    def write_per_trial_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["method", self.x_name, "trial", "loss"])
            for m, x, t, loss in self.per_trial:
                out.writerow([m, _fmt(x), t, _fmt(loss)])

    def write_plot_data(self, out_dir, prefix):
        """One two-column (x, y) CSV per method; returns the written paths."""
        out_dir = Path(out_dir)
        paths = []
        for method in dict.fromkeys(r.method for r in self.rows):
            path = out_dir / f"{prefix}_{method}.csv"
            xs, ys = self.series(method)
            with open(path, "w", newline="", encoding="utf-8") as fh:
                out = csv.writer(fh, lineterminator="\n")
                out.writerow([self.x_name, "mean_loss"])
                out.writerows([_fmt(x), _fmt(y)] for x, y in zip(xs, ys))
            paths.append(path)
        return paths


def _fmt(v):
    # shortest round-tripping text, so CSVs are byte-stable and lossless
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def labeling_function(x, sigma=1.0):
    """g(x) = k(x, 1) - k(x, -1) for the Gaussian kernel of width sigma."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, 0]
    s2 = 2.0 * sigma * sigma
    return np.exp(-(x - 1.0) ** 2 / s2) - np.exp(-(x + 1.0) ** 2 / s2)


def rng_stream(sc: SyntheticConfig, trial: int, stream: str, *extra) -> np.random.Generator:
    key = (int(trial), STREAMS[stream]) + tuple(int(e) for e in extra)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(sc.base_seed, spawn_key=key)))


def rng_metadata(sc: SyntheticConfig) -> dict:
    return {
        "generator": RNG_NAME,
        "seeding": "SeedSequence(base_seed, spawn_key=(trial, stream, *extra))",
        "streams": dict(STREAMS),
        "perturb_extra": "round(rho * 1e9)",
        "base_seed": sc.base_seed,
        "numpy": np.__version__,
    }


def gen_synthetic(sc: SyntheticConfig, trial: int):
    """Source (labeled), target (unlabeled) and test (labeled) samples of one trial."""
    if trial < 0:
        raise InputError("trial must be non-negative")
    xs = rng_stream(sc, trial, "source").normal(sc.source_mean, sc.source_std, sc.n_s)
    xt = rng_stream(sc, trial, "target").normal(sc.target_mean, sc.target_std, sc.n_t)
    xe = rng_stream(sc, trial, "test").normal(sc.target_mean, sc.target_std, sc.n_test)
    ys = labeling_function(xs, sc.sigma_for_g)
    ye = labeling_function(xe, sc.sigma_for_g)
    if sc.label_noise_std > 0:
        ys = ys + rng_stream(sc, trial, "source_noise").normal(0.0, sc.label_noise_std, sc.n_s)
        ye = ye + rng_stream(sc, trial, "test_noise").normal(0.0, sc.label_noise_std, sc.n_test)
    return Dataset(xs, ys), Dataset(xt), Dataset(xe, ye)


def perturbation(sc: SyntheticConfig, trial: int, rho: float, shape):
    """Additive N(0, rho^2) noise for one (trial, rho) cell."""
    if rho == 0:
        return np.zeros(shape)
    z = rng_stream(sc, trial, "perturb", round(rho * 1e9)).standard_normal(shape)
    return rho * z


def fit_methods(source: Dataset, target: Dataset, cfg: KernelConfig,
                solver: SolverConfig, methods=METHODS):
    """Fit each requested method once; KMM weights are shared between them.

    Returns a dict mapping method to a model, or to the exception raised.
    """
    out = {}
    weights = None
    if any(m in ("wrls", "wdro", "drda") for m in methods):
        try:
            weights = kmm_fit(source, target, cfg, solver.B, solver.c,
                              tol=solver.qp_tol, max_iter=solver.qp_max_iter)
        except (SolverError, InputError, ValueError, ArithmeticError) as exc:
            weights = exc
    for m in methods:
        try:
            if isinstance(weights, Exception) and m in ("wrls", "wdro", "drda"):
                raise weights
            if m == "rls":
                out[m] = fit_rls(source, cfg, solver.lam)
            elif m == "wrls":
                out[m] = fit_wrls(source, target, cfg, solver.lam, solver.B, solver.c,
                                  weights=weights)[0]
            elif m == "wdro":
                out[m] = fit_wdro(source, target, cfg, solver, weights=weights)[0]
            elif m == "dro":
                out[m] = fit_dro_source_only(source, cfg, solver)
            elif m == "drda":
                out[m] = fit_drda(source, target, cfg, solver, kmm_weights=weights)[0]
            else:
                raise InputError(f"unknown method {m!r}")
        except (SolverError, InputError, ValueError, ArithmeticError) as exc:
            out[m] = exc
    return out


def _test_loss(model, features, labels):
    pred = model.predict(features)
    loss = float(np.mean((pred - labels) ** 2))
    if not math.isfinite(loss):
        raise SolverError("non-finite test loss")
    return loss


def _noise_trial(args):
    sc, spec, cfg, solver, trial = args
    source, target, test = gen_synthetic(sc, trial)
    models = fit_methods(source, target, cfg, solver, spec.methods)
    records = []
    for rho in spec.rho_grid:
        if spec.perturb == "features":
            x = test.features + perturbation(sc, trial, rho, test.features.shape)
            y = test.labels
        else:
            x = test.features
            y = test.labels + perturbation(sc, trial, rho, test.labels.shape)
        for m in spec.methods:
            model = models[m]
            try:
                if isinstance(model, Exception):
                    raise model
                loss = _test_loss(model, x, y)
            except (SolverError, InputError, ValueError, ArithmeticError):
                loss = float("nan")
            records.append((m, rho, trial, loss))
    return records


def _size_trial(args):
    sc, cfg, solver, methods, n, n_test, trial = args
    source, target, test = gen_synthetic(sc.replace(n_s=n, n_t=n, n_test=n_test), trial)
    models = fit_methods(source, target, cfg, solver, methods)
    records = []
    for m in methods:
        try:
            if isinstance(models[m], Exception):
                raise models[m]
            loss = _test_loss(models[m], test.features, test.labels)
        except (SolverError, InputError, ValueError, ArithmeticError):
            loss = float("nan")
        records.append((m, n, trial, loss))
    return records


def worker_count(requested=None, jobs=1) -> int:
    """Worker processes to use: ``requested``, else all CPUs, capped by DRDA_THREADS."""
    n = requested if requested is not None else (os.cpu_count() or 1)
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            cap = int(cap)
        except ValueError:
            raise InputError(f"{THREADS_ENV} must be a positive integer, got {cap!r}") from None
        if cap < 1:
            raise InputError(f"{THREADS_ENV} must be a positive integer, got {cap}")
        n = min(n, cap)
    return max(1, min(int(n), jobs))


def _run_trials(fn, jobs, workers):
    workers = worker_count(workers, len(jobs))
    if workers == 1:
        results = [fn(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            # map yields in submission order, so the reduce below is sequential
            # in trial index whatever the completion order
            results = list(pool.map(fn, jobs))
    return [rec for chunk in results for rec in chunk]


def summarize(records, methods, xs, x_name, meta=None) -> ResultTable:
    """Aggregate (method, x, trial, loss) records into mean and 95% half-width."""
    rows = []
    for m in methods:
        for x in xs:
            vals = np.array([loss for mm, xx, _, loss in records if mm == m and xx == x])
            ok = vals[np.isfinite(vals)]
            n = ok.size
            mean = float(ok.mean()) if n else float("nan")
            half = float(Z_95 * ok.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
            rows.append(ResultRow(m, x, mean, half, n, int(vals.size - n)))
    return ResultTable(x_name, rows, list(records), dict(meta or {}))


def run_noise_sweep(sc: SyntheticConfig, spec: SweepSpec = SweepSpec(),
                    cfg: KernelConfig = KernelConfig(), solver: SolverConfig = SolverConfig(),
                    workers=None) -> ResultTable:
    """Fit every method once per trial on clean data; test under each noise level."""
    jobs = [(sc, spec, cfg, solver, t) for t in range(sc.trials)]
    records = _run_trials(_noise_trial, jobs, workers)
    meta = {"kind": f"noise-{'x' if spec.perturb == 'features' else 'y'}",
            "rng": rng_metadata(sc), "synthetic": asdict(sc), "sweep": asdict(spec),
            "kernel": asdict(cfg), "solver": asdict(solver)}
    return summarize(records, spec.methods, spec.rho_grid, "rho", meta)


def run_size_sweep(sc: SyntheticConfig, sizes, cfg: KernelConfig = KernelConfig(),
                   solver: SolverConfig = SolverConfig(), methods=("drda",), n_test=5000,
                   workers=None) -> ResultTable:
    """Risk on a large clean test sample as n_s = n_t = n grows."""
    sizes = [int(n) for n in sizes]
    if not sizes or any(n < 1 for n in sizes):
        raise InputError(f"sizes must be positive integers, got {sizes}")
    if any(b < a for a, b in zip(sizes, sizes[1:])):
        raise InputError(f"sizes must be ascending, got {sizes}")
    methods = SweepSpec(methods=methods).methods
    distinct = list(dict.fromkeys(sizes))
    jobs = [(sc, cfg, solver, methods, n, n_test, t) for n in distinct for t in range(sc.trials)]
    records = _run_trials(_size_trial, jobs, workers)
    meta = {"kind": "size", "rng": rng_metadata(sc), "synthetic": asdict(sc),
            "sizes": sizes, "n_test": n_test, "methods": list(methods),
            "kernel": asdict(cfg), "solver": asdict(solver)}
    table = summarize(records, methods, distinct, "sample_size", meta)
    # a size listed more than once gets one (identical) row per listing
    table.rows = [r for m in methods for n in sizes for r in table.rows
                  if r.method == m and r.x == n]
    return table
