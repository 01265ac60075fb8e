"""Safety geometry for spherical obstacles and the flexible CBF safety criterion.

``h`` is the clearance to the obstacle's safe set, ``H`` the surplus over the
enlarged safety radius ``r_safe = d_min + R_o + r_d``. The criterion

    H(x_{k+1}, o_hat_{k+1}) - (1 - gamma) * H(x_k, o_k) >= 0

lets ``H`` shrink by at most the fraction ``gamma`` per step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GAMMA_MIN = 1e-4


def bounding_radius(box_dims) -> float:
    """Radius of the sphere circumscribing an axis-aligned box."""
    dims = np.asarray(box_dims, dtype=float)
    if np.any(dims < 0):
        raise ValueError("box dimensions must be non-negative")
    return 0.5 * float(np.sqrt(np.sum(dims**2)))


def safe_radius(d_min: float, R_o: float, r_d: float) -> float:
    if min(d_min, R_o, r_d) < 0:
        raise ValueError("safety distances must be non-negative")
    return d_min + R_o + r_d


@dataclass(frozen=True)
class SafetySpec:
    d_min: float
    R_o: float
    r_d: float = 0.0

    def __post_init__(self):
        if min(self.d_min, self.R_o, self.r_d) < 0:
            raise ValueError("safety distances must be non-negative")

    @property
    def r_safe(self) -> float:
        return self.d_min + self.R_o + self.r_d

    def clearance(self, x, o) -> float:
        return clearance(x, o, self.d_min, self.R_o)

    def surplus(self, x, o) -> float:
        return surplus_distance(x, o, self.r_safe)

    def residual(self, x_k, x_k1, o_k, o_hat_k1, gamma: float) -> float:
        return cbfsc_residual(x_k, x_k1, o_k, o_hat_k1, self.r_safe, gamma)


@dataclass(frozen=True)
class BarrierEval:
    point_id: str
    h: float
    H: float
    gamma: float | None = None


def _dist(x, o) -> float:
    return float(np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(o, dtype=float)))


def clearance(x, o, d_min: float, R_o: float) -> float:
    return _dist(x, o) - d_min - R_o


def surplus_distance(x, o, r_safe: float) -> float:
    return _dist(x, o) - r_safe


def is_safe(x, o, d_min: float, R_o: float) -> bool:
    return clearance(x, o, d_min, R_o) >= 0


def cbfsc_residual(x_k, x_k1, o_k, o_hat_k1, r_safe: float, gamma: float) -> float:
    """Non-negative iff the flexible criterion holds for this step."""
    if not 0 < gamma <= 1:
        raise ValueError(f"decay rate must lie in (0, 1], got {gamma}")
    return surplus_distance(x_k1, o_hat_k1, r_safe) - (1.0 - gamma) * surplus_distance(x_k, o_k, r_safe)


def evaluate(point_id: str, x, o, spec: SafetySpec, gamma: float | None = None) -> BarrierEval:
    return BarrierEval(point_id, spec.clearance(x, o), spec.surplus(x, o), gamma)
