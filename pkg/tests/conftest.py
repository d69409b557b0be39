import numpy as np
import pytest


def labeling_function(x, sigma=1.0):
    x = np.asarray(x, dtype=float).reshape(-1)
    return (np.exp(-(x - 1.0) ** 2 / (2 * sigma ** 2))
            - np.exp(-(x + 1.0) ** 2 / (2 * sigma ** 2)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def brute_force_mmd_sq(xs, w, xt, sigma):
    """Double-loop squared MMD with explicit kernel evaluations."""
    def k(a, b):
        return np.exp(-np.sum((np.asarray(a) - np.asarray(b)) ** 2) / (2 * sigma ** 2))

    ns, nt = len(xs), len(xt)
    ss = sum(w[i] * w[j] * k(xs[i], xs[j]) for i in range(ns) for j in range(ns))
    st = sum(w[i] * k(xs[i], xt[j]) for i in range(ns) for j in range(nt))
    tt = sum(k(xt[i], xt[j]) for i in range(nt) for j in range(nt))
    return ss / ns ** 2 - 2 * st / (ns * nt) + tt / nt ** 2
