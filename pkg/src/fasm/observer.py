"""Generalized proportional-integral observer (GPIO) for obstacle motion.

Each spatial axis runs the same scalar observer, so states are stored as
``(m, 3)`` arrays: row 0 is the position estimate, row 1 the velocity,
rows 2.. the higher-order differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.linalg


class CertificateError(ValueError):
    """The requested spectral margin cannot certify the error system."""


@dataclass(frozen=True)
class ObstacleModel:
    A: np.ndarray
    C: np.ndarray

    @property
    def m(self) -> int:
        return self.A.shape[0]


def build_system(m: int, t_s: float) -> ObstacleModel:
    """Stacked-integrator model ``D_{k+1} = A D_k``, ``o_k = C D_k``."""
    if m < 2:
        raise ValueError(f"observer order must be >= 2, got {m}")
    if t_s <= 0:
        raise ValueError("sampling period must be positive")
    A = np.eye(m) + t_s * np.eye(m, k=1)
    C = np.zeros((1, m))
    C[0, 0] = 1.0
    return ObstacleModel(A, C)


def build_phi(alphas: Sequence[float], t_s: float) -> np.ndarray:
    """Estimation-error transition matrix of the observer."""
    alphas = np.asarray(alphas, dtype=float)
    m = alphas.size
    phi = np.eye(m) + t_s * np.eye(m, k=1)
    phi[:, 0] -= t_s * alphas
    return phi


def spectral_radius(M) -> float:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"spectral radius needs a square matrix, got {M.shape}")
    return float(np.max(np.abs(np.linalg.eigvals(M))))


@dataclass(frozen=True)
class ErrorCertificate:
    Phi: np.ndarray
    W: np.ndarray
    c1: float
    c2: float
    eta: float

    @property
    def phi0(self) -> float:
        return float(np.sqrt(self.c2 / self.c1))

    def phi(self, k: int) -> float:
        return self.eta**k * self.phi0


def lyapunov_certificate(Phi, eta: float) -> ErrorCertificate:
    """Solve ``(Phi/eta)^T W (Phi/eta) - W = -I`` and bundle the eigenvalue bounds.

    The solution satisfies ``Phi^T W Phi - eta^2 W <= 0`` strictly, which is
    all the contraction bound needs.
    """
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
    rho = spectral_radius(Phi)
    if not rho < eta < 1.0:
        raise CertificateError(f"need rho(Phi)={rho:.6g} < eta={eta:.6g} < 1")
    scaled = Phi / eta
    W = scipy.linalg.solve_discrete_lyapunov(scaled.T, np.eye(Phi.shape[0]))
    W = 0.5 * (W + W.T)
    lam = np.linalg.eigvalsh(W)
    return ErrorCertificate(Phi, W, float(lam[0]), float(lam[-1]), float(eta))


def error_bound(certificate: ErrorCertificate, k: int, delta: float) -> float:
    """Upper bound on ``||E_k||`` given ``||E_0|| <= delta``."""
    if k < 0:
        raise ValueError("step index must be non-negative")
    return certificate.phi(k) * delta


@dataclass(frozen=True)
class GpioConfig:
    alphas: tuple[float, ...] = (5.0, 10.0, 2.0)
    t_s: float = 0.04
    eta: float = 0.9999
    delta: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if self.m < 2:
            raise ValueError("observer order must be >= 2")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")

    @property
    def m(self) -> int:
        return len(self.alphas)

    @cached_property
    def Phi(self) -> np.ndarray:
        return build_phi(self.alphas, self.t_s)

    @cached_property
    def model(self) -> ObstacleModel:
        return build_system(self.m, self.t_s)

    @cached_property
    def certificate(self) -> ErrorCertificate:
        return lyapunov_certificate(self.Phi, self.eta)

    @property
    def tolerance_distance(self) -> float:
        """``delta * phi_0``: worst-case position error over the whole run."""
        return self.delta * self.certificate.phi0


@dataclass(frozen=True)
class GpioState:
    xi: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        xi = np.array(self.xi, dtype=float)
        if xi.ndim != 2 or xi.shape[1] != 3:
            raise ValueError(f"observer state must be (m, 3), got {xi.shape}")
        xi.setflags(write=False)
        object.__setattr__(self, "xi", xi)

    @property
    def position(self) -> np.ndarray:
        return self.xi[0]

    @property
    def velocity(self) -> np.ndarray:
        return self.xi[1]

    @classmethod
    def from_truth(cls, position, velocity, m: int, t: float = 0.0) -> "GpioState":
        xi = np.zeros((m, 3))
        xi[0], xi[1] = position, velocity
        return cls(xi, t)


def gpio_step(state: GpioState, o_meas, config: GpioConfig) -> GpioState:
    """One observer update driven by the measured obstacle position."""
    xi = state.xi
    if xi.shape[0] != config.m:
        raise ValueError(f"state order {xi.shape[0]} != config order {config.m}")
    innovation = np.asarray(o_meas, dtype=float) - xi[0]
    nxt = xi.copy()
    nxt[:-1] += config.t_s * xi[1:]
    nxt += config.t_s * np.outer(config.alphas, innovation)
    return GpioState(nxt, state.t + config.t_s)


def predict_obstacle(state: GpioState, i: int, model: ObstacleModel) -> tuple[np.ndarray, np.ndarray]:
    """``(position, D_hat)`` after propagating the estimate ``i`` steps."""
    if i < 0:
        raise ValueError("prediction step must be non-negative")
    D = np.linalg.matrix_power(model.A, i) @ state.xi
    return (model.C @ D)[0], D


def predict_positions(state: GpioState, steps: int, model: ObstacleModel) -> np.ndarray:
    """Predicted positions for ``i = 0..steps``, shape (steps + 1, 3)."""
    out = np.empty((steps + 1, 3))
    D = state.xi
    for i in range(steps + 1):
        out[i] = D[0]
        D = model.A @ D
    return out
