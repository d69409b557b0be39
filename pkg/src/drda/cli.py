"""Command-line front end: ``drda gen-data | fit | sweep | bounds``.

All settings live in one JSON run config (see :class:`RunConfig`); command
line flags override the corresponding config values. Every command echoes
the fully materialised config next to its outputs, and re-running with that
echo reproduces the outputs byte for byte.

Exit codes: 0 success, 2 invalid config or arguments, 3 file I/O, 4 malformed
data or model files, 5 solver failure, 1 anything else. Failures print a
single JSON object ``{"error", "message", "exit_code"}`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from drda.ambiguity_bounds import AmbiguityParams, all_radii, generalization_bound
from drda.baselines import METHODS, fit_dro_source_only, fit_rls, fit_wdro, fit_wrls
from drda.errors import InputError, SolverError
from drda.experiments import (
    SweepSpec, SyntheticConfig, gen_synthetic, rng_metadata, run_noise_sweep, run_size_sweep,
)
from drda.kernel_core import Dataset, KernelConfig
from drda.solver import RegressionModel, SolverConfig, fit_drda

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_IO, EXIT_DATA, EXIT_SOLVER = 0, 1, 2, 3, 4, 5
SWEEP_KINDS = ("noise-x", "noise-y", "size")
DEFAULT_SIZES = (25, 50, 100, 200, 400)


class CliError(Exception):
    def __init__(self, kind, message, code):
        super().__init__(message)
        self.kind, self.code = kind, code


@dataclass(frozen=True)
class SweepSettings:
    rho_grid: tuple = SweepSpec().rho_grid
    methods: tuple = METHODS
    sizes: tuple = DEFAULT_SIZES
    size_methods: tuple = ("drda",)
    size_n_test: int = 5000

    def __post_init__(self):
        SweepSpec(rho_grid=self.rho_grid, methods=self.methods)
        SweepSpec(methods=self.size_methods)
        object.__setattr__(self, "rho_grid", tuple(float(r) for r in self.rho_grid))
        for name in ("methods", "sizes", "size_methods"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.sizes or any(not _is_count(n) for n in self.sizes):
            raise InputError(f"sizes must be positive integers, got {self.sizes}")
        if list(self.sizes) != sorted(self.sizes):
            raise InputError(f"sizes must be ascending, got {self.sizes}")
        if not _is_count(self.size_n_test):
            raise InputError("size_n_test must be a positive integer")


@dataclass(frozen=True)
class BoundSettings:
    delta: float = 0.05
    B: Optional[float] = None
    eta_floor: float = 0.0

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise InputError("bounds.delta must lie in (0, 1)")
        if self.B is not None and not self.B > 0:
            raise InputError("bounds.B must be positive")
        if not (math.isfinite(self.eta_floor) and self.eta_floor >= 0):
            raise InputError("bounds.eta_floor must be non-negative")


@dataclass(frozen=True)
class RunConfig:
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    bounds: BoundSettings = field(default_factory=BoundSettings)
    trial: int = 0
    out: str = "drda-out"
    workers: Optional[int] = None

    SECTIONS = {"synthetic": SyntheticConfig, "solver": SolverConfig, "kernel": KernelConfig,
                "sweep": SweepSettings, "bounds": BoundSettings}

    def __post_init__(self):
        if isinstance(self.trial, bool) or not isinstance(self.trial, int) or self.trial < 0:
            raise InputError("trial must be a non-negative integer")
        if not isinstance(self.out, str) or not self.out:
            raise InputError("out must be a nonempty path string")
        if self.workers is not None and not _is_count(self.workers):
            raise InputError("workers must be a positive integer or null")

    @classmethod
    def from_dict(cls, d) -> "RunConfig":
        if not isinstance(d, dict):
            raise InputError("run config must be a JSON object")
        top = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - top)
        if unknown:
            raise InputError(f"unknown config key(s): {', '.join(unknown)}")
        kwargs = {}
        for key, value in d.items():
            if key in cls.SECTIONS:
                kwargs[key] = _build(cls.SECTIONS[key], value, key)
            else:
                kwargs[key] = value
        return _construct(cls, kwargs, "config")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = _jsonable(asdict(v)) if f.name in self.SECTIONS else v
        return out

    def with_overrides(self, out=None, seed=None) -> "RunConfig":
        d = self.to_dict()
        if out is not None:
            d["out"] = out
        if seed is not None:
            d["synthetic"]["base_seed"] = seed
            d["solver"]["seed"] = seed
        return RunConfig.from_dict(d)


def _is_count(v):
    return not isinstance(v, bool) and isinstance(v, (int, np.integer)) and v >= 1


def _build(cls, value, section):
    if not isinstance(value, dict):
        raise InputError(f"config section {section!r} must be a JSON object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(value) - names)
    if unknown:
        raise InputError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    return _construct(cls, value, section)


def _construct(cls, kwargs, section):
    try:
        return cls(**kwargs)
    except InputError as exc:
        raise InputError(f"invalid {section!r}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid value in {section!r}: {exc}") from exc


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


# ---------------------------------------------------------------- files

def _dump_json(path, obj):
    text = json.dumps(_jsonable(obj), indent=2, allow_nan=True) + "\n"
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise CliError("io", f"cannot write {path}: {exc}", EXIT_IO) from exc


def _feature_header(dim):
    return ["x"] if dim == 1 else [f"x{i + 1}" for i in range(dim)]


def _write_dataset(path, data: Dataset, labels=True):
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(_feature_header(data.dim) + (["y"] if labels else []))
            for i in range(len(data)):
                row = [repr(float(v)) for v in data.features[i]]
                if labels:
                    row.append(repr(float(data.labels[i])))
                out.writerow(row)
    except OSError as exc:
        raise CliError("io", f"cannot write {path}: {exc}", EXIT_IO) from exc


def read_dataset(path, labeled) -> Dataset:
    """Read a CSV written by ``gen-data`` (columns x..., and y when labeled)."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise CliError("io", f"cannot read {path}: {exc}", EXIT_IO) from exc
    if not rows:
        raise CliError("data", f"{path} is empty", EXIT_DATA)
    header, body = rows[0], rows[1:]
    has_y = bool(header) and header[-1] == "y"
    if labeled and not has_y:
        raise CliError("data", f"{path} has no y column", EXIT_DATA)
    dim = len(header) - (1 if has_y else 0)
    if dim < 1 or not body:
        raise CliError("data", f"{path} has no feature columns or no rows", EXIT_DATA)
    try:
        arr = np.array([[float(v) for v in r] for r in body], dtype=np.float64)
    except ValueError as exc:
        raise CliError("data", f"{path}: {exc}", EXIT_DATA) from exc
    if arr.ndim != 2 or arr.shape[1] != len(header) or not np.all(np.isfinite(arr)):
        raise CliError("data", f"{path}: ragged or non-finite rows", EXIT_DATA)
    return Dataset(arr[:, :dim], arr[:, dim] if has_y else None)


def read_model(path) -> RegressionModel:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError("io", f"cannot read {path}: {exc}", EXIT_IO) from exc
    try:
        return RegressionModel.from_json(text)
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError("data", f"{path} is not a model file: {exc}", EXIT_DATA) from exc


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError("io", f"cannot read {path}: {exc}", EXIT_IO) from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError("config", f"{path} is not valid JSON: {exc}", EXIT_CONFIG) from exc
    return RunConfig.from_dict(data)


def _out_dir(rc: RunConfig) -> Path:
    out = Path(rc.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError("io", f"cannot create {out}: {exc}", EXIT_IO) from exc
    return out


# ---------------------------------------------------------------- commands

def cmd_gen_data(rc: RunConfig) -> dict:
    out = _out_dir(rc)
    source, target, test = gen_synthetic(rc.synthetic, rc.trial)
    _write_dataset(out / "source.csv", source)
    _write_dataset(out / "target.csv", target, labels=False)
    _write_dataset(out / "test.csv", test)
    meta = {"trial": rc.trial, "rng": rng_metadata(rc.synthetic),
            "rows": {"source": len(source), "target": len(target), "test": len(test)},
            "config": rc.to_dict()}
    _dump_json(out / "meta.json", meta)
    return {"written": ["source.csv", "target.csv", "test.csv", "meta.json"]}


def cmd_fit(rc: RunConfig, method: str, data_dir) -> dict:
    if method not in METHODS:
        raise InputError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    data_dir = Path(data_dir)
    source = read_dataset(data_dir / "source.csv", labeled=True)
    target = None
    if method != "rls" and method != "dro":
        target = read_dataset(data_dir / "target.csv", labeled=False)
    cfg, s = rc.kernel, rc.solver
    report = {"method": method}
    if method == "rls":
        model = fit_rls(source, cfg, s.lam)
    elif method == "wrls":
        model, w = fit_wrls(source, target, cfg, s.lam, s.B, s.c)
        report["weights"] = w.values
        report["kmm"] = _qp_summary(w)
    elif method == "wdro":
        model, w, res = fit_wdro(source, target, cfg, s, full_output=True)
        report.update(weights=w.values, kmm=_qp_summary(w),
                      objective_trace=list(res.objective_trace), converged=res.converged)
    elif method == "dro":
        model, res = fit_dro_source_only(source, cfg, s, full_output=True)
        report.update(objective_trace=list(res.objective_trace), converged=res.converged)
    else:
        model, w, fr = fit_drda(source, target, cfg, s)
        report.update(fr.to_dict())
        report["weights"] = w.values
    pred = model.predict(source)
    report["train_mse"] = float(np.mean((pred - source.labels) ** 2))
    report["rkhs_norm"] = model.rkhs_norm()
    report["config"] = rc.to_dict()
    out = _out_dir(rc)
    _dump_json(out / "model.json", model.to_dict())
    _dump_json(out / "report.json", report)
    return {"written": ["model.json", "report.json"]}


def _qp_summary(w):
    return {"status": w.status, "converged": w.converged, "iterations": w.iterations,
            "objective": w.objective, "gap": w.gap}


def cmd_sweep(rc: RunConfig, kind: str) -> dict:
    if kind not in SWEEP_KINDS:
        raise InputError(f"unknown sweep kind {kind!r}; choose from {', '.join(SWEEP_KINDS)}")
    sw = rc.sweep
    if kind == "size":
        table = run_size_sweep(rc.synthetic, sw.sizes, rc.kernel, rc.solver,
                               methods=sw.size_methods, n_test=sw.size_n_test,
                               workers=rc.workers)
    else:
        spec = SweepSpec(rho_grid=sw.rho_grid, methods=sw.methods,
                         perturb="features" if kind == "noise-x" else "labels")
        table = run_noise_sweep(rc.synthetic, spec, rc.kernel, rc.solver, workers=rc.workers)
    out = _out_dir(rc)
    plot_dir = out / "plot-data"
    try:
        plot_dir.mkdir(exist_ok=True)
        table.write_csv(out / f"{kind}.csv")
        table.write_per_trial_csv(out / f"{kind}_per_trial.csv")
        plots = table.write_plot_data(plot_dir, kind)
    except OSError as exc:
        raise CliError("io", f"cannot write sweep output: {exc}", EXIT_IO) from exc
    failures = {f"{r.method}@{r.x}": r.failures for r in table.rows if r.failures}
    _dump_json(out / f"{kind}_meta.json", {**table.meta, "failures": failures,
                                           "config": rc.to_dict()})
    return {"written": [f"{kind}.csv", f"{kind}_per_trial.csv", f"{kind}_meta.json"]
            + [str(Path("plot-data") / p.name) for p in plots]}


def cmd_bounds(rc: RunConfig, data_dir, model_path, report_path=None) -> dict:
    data_dir = Path(data_dir)
    source = read_dataset(data_dir / "source.csv", labeled=True)
    target = read_dataset(data_dir / "target.csv", labeled=False)
    model = read_model(model_path)
    if model.support_points.shape[1] != source.dim:
        raise CliError("data", "model and data dimensions differ", EXIT_DATA)
    w = np.ones(len(source))
    if report_path is not None:
        try:
            rep = json.loads(Path(report_path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise CliError("io", f"cannot read {report_path}: {exc}", EXIT_IO) from exc
        except json.JSONDecodeError as exc:
            raise CliError("data", f"{report_path} is not JSON: {exc}", EXIT_DATA) from exc
        if "weights" in rep:
            w = np.asarray(rep["weights"], dtype=np.float64)
            if w.shape != (len(source),):
                raise CliError("data", "report weights do not match the source size", EXIT_DATA)
    B = rc.bounds.B if rc.bounds.B is not None else rc.solver.B
    risk = float(np.mean(w * (model.predict(source) - source.labels) ** 2))
    norm = model.rkhs_norm()
    eta = max(norm, rc.bounds.eta_floor)
    if eta <= 0:
        raise InputError("eta is zero: the model is identically zero and eta_floor is 0")
    p = AmbiguityParams(B=B, n_s=len(source), n_t=len(target), delta=rc.bounds.delta)
    cert = generalization_bound(risk, p, eta)
    result = {"certificate": cert.to_dict(), "radii": all_radii(p),
              "params": {"B": B, "n_s": p.n_s, "n_t": p.n_t, "delta": p.delta, "M": p.M},
              "model_rkhs_norm": norm, "eta_floor": rc.bounds.eta_floor,
              "weights": "report" if report_path is not None else "uniform",
              "config": rc.to_dict()}
    _dump_json(_out_dir(rc) / "certificate.json", result)
    return {"written": ["certificate.json"]}


# ---------------------------------------------------------------- entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run config JSON; flags override its values")
    common.add_argument("--out", help="output directory (overrides config 'out')")
    common.add_argument("--seed", type=int, help="base seed (overrides synthetic.base_seed and solver.seed)")
    p = _Parser(prog="drda", description="Distributionally robust domain adaptation toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="write one synthetic trial as CSV")
    fit = sub.add_parser("fit", parents=[common], help="fit one method on CSV data")
    fit.add_argument("--method", required=True, help="|".join(METHODS))
    fit.add_argument("--data", required=True, help="directory with source.csv and target.csv")
    sw = sub.add_parser("sweep", parents=[common], help="run a noise or sample-size sweep")
    sw.add_argument("--kind", required=True, help="|".join(SWEEP_KINDS))
    b = sub.add_parser("bounds", parents=[common], help="radii and target-risk certificate")
    b.add_argument("--data", required=True, help="directory with source.csv and target.csv")
    b.add_argument("--model", required=True, help="model.json from 'fit'")
    b.add_argument("--report", help="report.json whose weights enter the empirical risk")
    return p


def run(argv=None) -> dict:
    args = build_parser().parse_args(argv)
    if args.seed is not None and args.seed < 0:
        raise InputError("--seed must be non-negative")
    rc = load_config(args.config).with_overrides(out=args.out, seed=args.seed)
    if args.command == "gen-data":
        return cmd_gen_data(rc)
    if args.command == "fit":
        return cmd_fit(rc, args.method, args.data)
    if args.command == "sweep":
        return cmd_sweep(rc, args.kind)
    return cmd_bounds(rc, args.data, args.model, args.report)


def _fail(kind, message, code):
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        result = run(argv)
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    except InputError as exc:
        return _fail("config", str(exc), EXIT_CONFIG)
    except SolverError as exc:
        return _fail("solver", str(exc), EXIT_SOLVER)
    except Exception as exc:  # noqa: BLE001 - last-resort JSON error
        return _fail("internal", f"{type(exc).__name__}: {exc}", EXIT_INTERNAL)
    sys.stdout.write(json.dumps(result) + "\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
