"""Closed-form MMD ambiguity radii and the target-risk certificate."""

from __future__ import annotations

import math
from dataclasses import dataclass

from drda.errors import InputError
from drda.kernel_core import GAUSSIAN_SUP_NORM

DEFAULT_DELTA = 0.05


@dataclass(frozen=True)
class AmbiguityParams:
    """Inputs of the radius formulas.

    B bounds the weights, M bounds k(x, x), n_s and n_t are the sample
    sizes and the radii hold with probability at least 1 - delta.
    """

    B: float
    n_s: int
    n_t: int
    delta: float = DEFAULT_DELTA
    M: float = GAUSSIAN_SUP_NORM

    def __post_init__(self):
        if not self.B > 0:
            raise InputError(f"B must be positive, got {self.B}")
        if not self.M > 0:
            raise InputError(f"M must be positive, got {self.M}")
        if self.n_s < 1 or self.n_t < 1:
            raise InputError("sample sizes must be at least 1")
        if not 0 < self.delta < 1:
            raise InputError(f"delta must lie in (0, 1), got {self.delta}")

    @property
    def confidence_factor(self) -> float:
        return 1.0 + math.sqrt(2.0 * math.log(1.0 / self.delta))


@dataclass(frozen=True)
class BoundCertificate:
    empirical_source_risk: float
    radius: float
    eta: float
    B: float

    @property
    def bound_value(self) -> float:
        return self.B * self.empirical_source_risk + 4.0 * self.eta ** 2 * self.radius

    def to_dict(self):
        return {
            "empirical_source_risk": self.empirical_source_risk,
            "radius": self.radius,
            "eta": self.eta,
            "B": self.B,
            "bound_value": self.bound_value,
        }


def radius_weighted_source(p: AmbiguityParams) -> float:
    """MMD radius around the weighted source sample that covers its population."""
    return p.B * math.sqrt(p.M / p.n_s) * p.confidence_factor


def radius_empirical_target(p: AmbiguityParams) -> float:
    """MMD radius around the target sample that covers the target population."""
    return math.sqrt(p.M / p.n_t) * p.confidence_factor


def radius_empirical_cross(p: AmbiguityParams) -> float:
    """Deviation bound between the empirical target and weighted source means."""
    return math.sqrt(p.M) * math.sqrt(p.B ** 2 / p.n_s + 1.0 / p.n_t) * p.confidence_factor


def radius_target_in_transferred_set(p: AmbiguityParams) -> float:
    """Radius of the ball around the weighted source sample containing P_t.

    Sum of the cross-domain deviation and the target concentration radius
    (triangle inequality).
    """
    return (math.sqrt(p.M)
            * (math.sqrt(p.B ** 2 / p.n_s + 1.0 / p.n_t) + math.sqrt(1.0 / p.n_t))
            * p.confidence_factor)


def all_radii(p: AmbiguityParams) -> dict:
    return {
        "weighted_source": radius_weighted_source(p),
        "empirical_target": radius_empirical_target(p),
        "target_in_transferred_set": radius_target_in_transferred_set(p),
    }


def generalization_bound(empirical_source_risk: float, p: AmbiguityParams,
                         eta: float) -> BoundCertificate:
    """Upper bound on the target risk of any h with RKHS norm at most ``eta``.

    Valid for the Gaussian kernel only (M = 1), and only when the labelling
    function also has norm at most ``eta``.
    """
    if p.M != GAUSSIAN_SUP_NORM:
        raise InputError("the certificate assumes a Gaussian kernel (M = 1)")
    if empirical_source_risk < 0:
        raise InputError("empirical risk must be non-negative")
    if not eta > 0:
        raise InputError("eta must be positive")
    return BoundCertificate(float(empirical_source_risk),
                            radius_target_in_transferred_set(p), float(eta), p.B)
