"""Gaussian kernel, Gram matrices and weighted MMD estimates.

Everything downstream works with dense ``float64`` arrays; sample sizes in
this package stay in the hundreds so no low-rank tricks are used.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist, pdist

from drda.errors import InputError

# sup_x k(x, x) for the Gaussian kernel
GAUSSIAN_SUP_NORM = 1.0


def _frozen(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class KernelConfig:
    """Bandwidth ``sigma`` of the Gaussian kernel exp(-|x-y|^2 / (2 sigma^2))."""

    bandwidth: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.bandwidth) or self.bandwidth <= 0:
            raise InputError(f"bandwidth must be positive, got {self.bandwidth!r}")

    @property
    def product_bandwidth(self) -> float:
        """Bandwidth sigma / sqrt(2) of the space holding products h*g."""
        return self.bandwidth / np.sqrt(2.0)

    def halved(self) -> "KernelConfig":
        return KernelConfig(self.product_bandwidth)


@dataclass(frozen=True)
class Dataset:
    """Feature matrix of shape (n, N) with optional labels of shape (n,).

    One-dimensional feature input is read as n scalar samples.
    """

    features: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[1] < 1:
            raise InputError(f"features must be a 2-D array, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise InputError("features contain non-finite values")
        object.__setattr__(self, "features", _frozen(x))
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.float64).reshape(-1)
            if y.shape[0] != x.shape[0]:
                raise InputError(
                    f"{y.shape[0]} labels for {x.shape[0]} feature vectors")
            object.__setattr__(self, "labels", _frozen(y))

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None

    def unlabeled(self) -> "Dataset":
        return Dataset(self.features)

    def require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise InputError("a labeled dataset is required")
        return self.labels


@dataclass(frozen=True)
class GramMatrix:
    entries: np.ndarray
    bandwidth: float
    symmetric: bool = field(default=False)

    @property
    def row_count(self) -> int:
        return self.entries.shape[0]

    @property
    def col_count(self) -> int:
        return self.entries.shape[1]


def _as_vector(x):
    v = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if v.ndim != 1:
        raise InputError(f"expected a feature vector, got shape {v.shape}")
    return v


def eval_kernel(x, y, cfg: KernelConfig) -> float:
    """Gaussian kernel value between two feature vectors."""
    x, y = _as_vector(x), _as_vector(y)
    if x.shape != y.shape:
        raise InputError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    d2 = float(np.sum((x - y) ** 2))
    return float(np.exp(-d2 / (2.0 * cfg.bandwidth ** 2)))


def _features(d) -> np.ndarray:
    if isinstance(d, Dataset):
        return d.features
    return Dataset(d).features


def gram(a, b, cfg: KernelConfig) -> GramMatrix:
    """Kernel matrix between the rows of ``a`` and ``b``.

    Passing the same object twice takes the symmetric path: only the upper
    triangle is evaluated and mirrored, so the result is exactly symmetric.
    """
    xa = _features(a)
    if len(xa) == 0:
        raise InputError("empty dataset")
    scale = 2.0 * cfg.bandwidth ** 2
    if b is a:
        k = np.eye(len(xa))
        if len(xa) > 1:
            tri = np.exp(-pdist(xa, "sqeuclidean") / scale)
            iu = np.triu_indices(len(xa), k=1)
            k[iu] = tri
            k[(iu[1], iu[0])] = tri
        return GramMatrix(_frozen(k), cfg.bandwidth, symmetric=True)
    xb = _features(b)
    if len(xb) == 0:
        raise InputError("empty dataset")
    if xa.shape[1] != xb.shape[1]:
        raise InputError(f"dimension mismatch: {xa.shape[1]} vs {xb.shape[1]}")
    k = np.exp(-cdist(xa, xb, "sqeuclidean") / scale)
    return GramMatrix(_frozen(k), cfg.bandwidth)


def median_heuristic(*datasets) -> float:
    """Median pairwise Euclidean distance of the pooled samples."""
    x = np.vstack([_features(d) for d in datasets])
    if len(x) < 2:
        raise InputError("median heuristic needs at least two points")
    d = pdist(x)
    med = float(np.median(d))
    if med <= 0:
        positive = d[d > 0]
        med = float(np.median(positive)) if positive.size else 1.0
    return med


def mmd_terms(source, w, target, cfg: KernelConfig):
    """Return (quadratic, cross, constant) parts of the weighted squared MMD.

    The squared MMD equals ``quadratic - 2 * cross + constant`` with
    quadratic = w'K^s w / n_s^2, cross = w'K^{s,t}1 / (n_s n_t) and
    constant = 1'K^t 1 / n_t^2.
    """
    xs, xt = _features(source), _features(target)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.shape[0] != len(xs):
        raise InputError(f"{w.shape[0]} weights for {len(xs)} source points")
    ns, nt = len(xs), len(xt)
    ks = gram(xs, xs, cfg).entries
    kst = gram(xs, xt, cfg).entries
    kt = gram(xt, xt, cfg).entries
    quad = w @ ks @ w / ns ** 2
    cross = w @ kst.sum(axis=1) / (ns * nt)
    const = kt.sum() / nt ** 2
    return float(quad), float(cross), float(const)


def mmd_sq_weighted(source, w, target, cfg: KernelConfig) -> float:
    """Squared MMD between (1/n_s) sum w_i delta_{x_i} and the target sample.

    Includes the target-target constant, so the value is a genuine squared
    RKHS distance (up to rounding it is non-negative).
    """
    quad, cross, const = mmd_terms(source, w, target, cfg)
    return quad - 2.0 * cross + const


def mmd_sq_weighted_pair(xa, wa, xb, wb, cfg: KernelConfig, chunk=2048) -> float:
    """Squared MMD between two weighted empirical measures.

    Measures are sum_i wa_i delta_{xa_i} and sum_j wb_j delta_{xb_j}; weights
    are used as given, so normalisation is up to the caller. Gram blocks are
    formed ``chunk`` rows at a time to keep memory bounded for large samples.
    """
    xa, xb = _features(xa), _features(xb)
    wa = np.asarray(wa, dtype=np.float64).reshape(-1)
    wb = np.asarray(wb, dtype=np.float64).reshape(-1)
    return (weighted_kernel_sum(xa, wa, xa, wa, cfg, chunk)
            - 2.0 * weighted_kernel_sum(xa, wa, xb, wb, cfg, chunk)
            + weighted_kernel_sum(xb, wb, xb, wb, cfg, chunk))


def weighted_kernel_sum(xa, wa, xb, wb, cfg: KernelConfig, chunk=2048) -> float:
    """wa' K(xa, xb) wb, formed ``chunk`` rows of K at a time."""
    xa, xb = _features(xa), _features(xb)
    wa = np.asarray(wa, dtype=np.float64).reshape(-1)
    wb = np.asarray(wb, dtype=np.float64).reshape(-1)
    scale = 2.0 * cfg.bandwidth ** 2
    total = 0.0
    for start in range(0, len(xa), chunk):
        block = np.exp(-cdist(xa[start:start + chunk], xb, "sqeuclidean") / scale)
        total += float(wa[start:start + chunk] @ (block @ wb))
    return total


def rkhs_norm(alpha, k) -> float:
    """RKHS norm sqrt(alpha' K alpha) of a kernel expansion."""
    alpha = np.asarray(alpha, dtype=np.float64)
    k = k.entries if isinstance(k, GramMatrix) else np.asarray(k)
    return float(np.sqrt(max(alpha @ k @ alpha, 0.0)))
