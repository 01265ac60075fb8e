"""Receding-horizon problem with flexible CBF constraints, and its solver.

Decision vector layout::

    z = [u_0 .. u_N (each n joint rates), gamma_e, gamma_1 .. gamma_ncrit]

The baseline mode drops the decay rates and imposes ``H >= 0`` on every
predicted state instead. Kinematics are frozen at the current joint angles,
so every predicted point is affine in the controls and the only nonconvexity
comes from the distance terms and the ``gamma * H`` products.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import OptimizeWarning, minimize, nnls

from .cbf import GAMMA_MIN, SafetySpec
from .kinematics import KinematicChain, critical_jacobians, critical_positions, ee_jacobian, ee_pose
from .observer import GpioState, ObstacleModel

log = logging.getLogger(__name__)

FEAS_TOL = 1e-6
OPT_TOL = 1e-6
ACTIVE_TOL = 1e-5
MAX_ITER = 200
NORM_EPS = 1e-9

OPTIMAL, MAX_ITER_STATUS, INFEASIBLE = "optimal", "max_iter", "infeasible"


@dataclass(frozen=True)
class Weights:
    Q: np.ndarray
    R: np.ndarray
    P_gamma: float
    P_j: np.ndarray

    def __post_init__(self):
        for name in ("Q", "R"):
            M = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if M.shape[0] != M.shape[1] or np.any(np.linalg.eigvalsh(0.5 * (M + M.T)) <= 0):
                raise ValueError(f"{name} must be symmetric positive definite")
            object.__setattr__(self, name, M)
        P_j = np.atleast_1d(np.asarray(self.P_j, dtype=float))
        if self.P_gamma <= 0 or np.any(P_j <= 0):
            raise ValueError("decay-rate penalties must be positive")
        object.__setattr__(self, "P_j", P_j)
        object.__setattr__(self, "P_gamma", float(self.P_gamma))

    @classmethod
    def scalar(cls, Q: float = 2000.0, R: float = 50.0, P_gamma: float = 150.0,
               P_j: float | Sequence[float] | None = None, n: int = 6, n_crit: int = 6) -> "Weights":
        P_j = P_gamma if P_j is None else P_j
        return cls(Q * np.eye(7), R * np.eye(n), P_gamma, np.broadcast_to(np.asarray(P_j, float), (n_crit,)).copy())

    def scaled(self, c: float) -> "Weights":
        return Weights(c * self.Q, c * self.R, c * self.P_gamma, c * self.P_j)

    @property
    def magnitude(self) -> float:
        return float(max(np.abs(self.Q).max(), np.abs(self.R).max(), self.P_gamma, self.P_j.max()))


def stage_cost(x_e, u, gamma_e, gamma_j, s, weights: Weights) -> float:
    e = np.asarray(x_e, float) - np.asarray(s, float)
    u = np.asarray(u, float)
    gamma_j = np.asarray(gamma_j, float).reshape(-1)
    cost = e @ weights.Q @ e + u @ weights.R @ u + weights.P_gamma * gamma_e**2
    if gamma_j.size:
        cost += float(np.sum(weights.P_j[: gamma_j.size] * gamma_j**2))
    return float(cost)


@dataclass(frozen=True)
class ObstacleView:
    """What the controller knows about one obstacle at step k.

    ``o_meas`` is the current measurement, ``state`` the observer state after
    absorbing it (an estimate of the obstacle's stacked state at k+1).
    """

    o_meas: np.ndarray
    state: GpioState
    model: ObstacleModel
    spec: SafetySpec

    def predicted(self, N: int) -> np.ndarray:
        """Obstacle centres used by stages 0..N+1, shape (N+2, 3)."""
        out = np.empty((N + 2, 3))
        out[0] = self.o_meas
        D = self.state.xi
        for i in range(1, N + 2):
            out[i] = D[0]
            D = self.model.A @ D
        return out


@dataclass(frozen=True)
class MpcProblem:
    N: int
    t_s: float
    x_e0: np.ndarray
    J_e: np.ndarray
    x_j0: np.ndarray
    J_j: np.ndarray
    s: np.ndarray
    obstacles: tuple[tuple[np.ndarray, SafetySpec], ...]
    weights: Weights
    u_max: np.ndarray
    theta_k: np.ndarray
    theta_min: np.ndarray
    theta_max: np.ndarray
    gamma_min: float = GAMMA_MIN
    gamma_init: float = 1e-3
    point_ids: tuple[str, ...] = ()
    pre_violated_theta: bool = False
    pre_unsafe: tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return self.J_e.shape[1]

    @property
    def n_crit(self) -> int:
        return self.x_j0.shape[0]

    @property
    def n_controls(self) -> int:
        return (self.N + 1) * self.n

    def n_vars(self, mode: str = "fasm") -> int:
        return self.n_controls + (1 + self.n_crit if mode == "fasm" else 0)

    @property
    def n_cbfsc(self) -> int:
        return (self.N + 1) * (1 + self.n_crit) * len(self.obstacles)

    @property
    def barrier_ids(self) -> tuple[str, ...]:
        return ("ee",) + tuple(self.point_ids)


def build_problem(chain: KinematicChain, theta, reference, obstacles: Sequence[ObstacleView],
                  weights: Weights, N: int, t_s: float, u_max=0.6,
                  joint_limits=None, gamma_min: float = GAMMA_MIN, gamma_init: float = 1e-3) -> MpcProblem:
    """Freeze kinematics at ``theta`` and assemble the horizon-N problem."""
    if N < 1:
        raise ValueError("horizon must be >= 1")
    theta = np.asarray(theta, dtype=float)
    n = chain.n
    limits = joint_limits if joint_limits is not None else chain.joint_limits
    if limits is None:
        limits = [(-np.inf, np.inf)] * n
    limits = np.asarray(limits, dtype=float)
    pose = ee_pose(chain, theta)
    x_j0 = critical_positions(chain, theta)
    n_crit = x_j0.shape[0]
    if weights.P_j.size != n_crit:
        weights = replace(weights, P_j=np.broadcast_to(weights.P_j[:1], (n_crit,)).copy()) if weights.P_j.size == 1 else weights
    if weights.P_j.size != n_crit or weights.R.shape != (n, n):
        raise ValueError("weights do not match the chain dimensions")
    preds = tuple((ob.predicted(N), ob.spec) for ob in obstacles)
    unsafe = []
    for o_pred, spec in preds:
        if spec.surplus(pose.p, o_pred[0]) < 0:
            unsafe.append("ee")
        unsafe.extend(pid for pid, x in zip(chain.point_ids, x_j0) if spec.surplus(x, o_pred[0]) < 0)
    pre_violated = bool(np.any(theta < limits[:, 0]) or np.any(theta > limits[:, 1]))
    if pre_violated:
        log.warning("joint angles %s start outside the self-collision box", np.round(theta, 4))
    return MpcProblem(
        N=N, t_s=t_s, x_e0=pose.as_vector(), J_e=ee_jacobian(chain, theta),
        x_j0=x_j0, J_j=critical_jacobians(chain, theta), s=np.asarray(reference, float).reshape(7),
        obstacles=preds, weights=weights, u_max=np.broadcast_to(np.asarray(u_max, float), (n,)).copy(),
        theta_k=theta, theta_min=limits[:, 0].copy(), theta_max=limits[:, 1].copy(),
        gamma_min=gamma_min, gamma_init=gamma_init, point_ids=tuple(chain.point_ids),
        pre_violated_theta=pre_violated, pre_unsafe=tuple(dict.fromkeys(unsafe)),
    )


@dataclass
class MpcSolution:
    u_seq: np.ndarray
    gamma_e: float | None
    gamma_j: np.ndarray
    cost: float
    status: str
    kkt_residual: float
    max_constraint_violation: float
    cbfsc: np.ndarray = field(repr=False)
    active: np.ndarray = field(repr=False)
    iterations: int = 0
    solve_ms: float = 0.0
    most_violated: str | None = None

    @property
    def u0(self) -> np.ndarray:
        return self.u_seq[0]

    @property
    def any_active(self) -> bool:
        return bool(np.any(self.active))

    def shifted(self) -> "MpcSolution":
        """Warm start for the next step: drop the applied control, repeat the last."""
        u = np.vstack([self.u_seq[1:], self.u_seq[-1:]])
        return replace(self, u_seq=u)


class _Formulation:
    """Scaled objective, constraints and derivatives for one problem and mode."""

    def __init__(self, prob: MpcProblem, mode: str):
        if mode not in ("fasm", "baseline"):
            raise ValueError(f"unknown mode {mode!r}")
        self.prob, self.mode = prob, mode
        N, n, nc = prob.N, prob.n, prob.n_crit
        self.nu = prob.n_controls
        self.nz = prob.n_vars(mode)
        self.scale = prob.weights.magnitude
        w = prob.weights

        # cumulative-sum operator: cum[i] = sum_{l<i} u_l, i = 0..N+1
        S = np.zeros((N + 2, N + 1))
        S[np.tril_indices(N + 2, -1, N + 1)] = 1.0
        self.S = S
        e0 = prob.x_e0 - prob.s
        H = np.zeros((self.nz, self.nz))
        g = np.zeros(self.nz)
        # state terms for i = 0..N
        for i in range(1, N + 1):
            M = prob.t_s * np.kron(S[i], prob.J_e)  # 7 x nu
            H[: self.nu, : self.nu] += 2.0 * M.T @ w.Q @ M
            g[: self.nu] += 2.0 * M.T @ w.Q @ e0
        H[: self.nu, : self.nu] += 2.0 * np.kron(np.eye(N + 1), w.R)
        if mode == "fasm":
            H[self.nu, self.nu] = 2.0 * (N + 1) * w.P_gamma
            H[self.nu + 1:, self.nu + 1:] = np.diag(2.0 * (N + 1) * w.P_j)
        self.c0 = (N + 1) * float(e0 @ w.Q @ e0)
        self.H, self.g = H / self.scale, g / self.scale
        self.c0_s = self.c0 / self.scale

        self.X0 = np.vstack([prob.x_e0[:3], prob.x_j0])  # (B, 3)
        self.JB = np.concatenate([prob.J_e[None, :3, :], prob.J_j], axis=0)  # (B, 3, n)
        self.B = 1 + nc
        lo = np.concatenate([np.tile(-prob.u_max, N + 1), [prob.gamma_min] * (self.nz - self.nu)])
        hi = np.concatenate([np.tile(prob.u_max, N + 1), [1.0] * (self.nz - self.nu)])
        self.lb, self.ub = lo, hi

        # joint boxes on theta_{i+1} = theta_k + t_s * sum_{l<=i} u_l, i = 0..N
        T = prob.t_s * np.kron(np.tril(np.ones((N + 1, N + 1))), np.eye(n))
        finite_hi = np.isfinite(np.tile(prob.theta_max, N + 1))
        finite_lo = np.isfinite(np.tile(prob.theta_min, N + 1))
        A_theta = np.vstack([-T[finite_hi], T[finite_lo]])
        b_theta = np.concatenate([
            (np.tile(prob.theta_max - prob.theta_k, N + 1))[finite_hi],
            (np.tile(prob.theta_k - prob.theta_min, N + 1))[finite_lo],
        ])
        self.A_theta = np.zeros((A_theta.shape[0], self.nz))
        self.A_theta[:, : self.nu] = A_theta
        self.b_theta = b_theta

    # objective -----------------------------------------------------------
    def f(self, z):
        return 0.5 * z @ self.H @ z + self.g @ z + self.c0_s

    def grad(self, z):
        return self.H @ z + self.g

    def cost(self, z) -> float:
        return float(self.f(z) * self.scale)

    # barrier geometry ------------------------------------------------------
    def _positions(self, z):
        N, n = self.prob.N, self.prob.n
        U = z[: self.nu].reshape(N + 1, n)
        cum = self.S @ U  # (N+2, n)
        return self.X0[:, None, :] + self.prob.t_s * np.einsum("in,bkn->bik", cum, self.JB)

    def barrier_values(self, z):
        """Surplus distances H[obstacle, barrier, stage 0..N+1] and unit normals."""
        P = self._positions(z)
        Hs, normals = [], []
        for o_pred, spec in self.prob.obstacles:
            diff = P - o_pred[None]
            dist = np.linalg.norm(diff, axis=2)
            Hs.append(dist - spec.r_safe)
            normals.append(diff / np.sqrt(dist**2 + NORM_EPS**2)[..., None])
        return np.array(Hs).reshape(-1, self.B, self.prob.N + 2), np.array(normals).reshape(-1, self.B, self.prob.N + 2, 3)

    def _gammas(self, z):
        if self.mode == "fasm":
            return z[self.nu:]
        return None

    def cbfsc(self, z):
        Hs, _ = self.barrier_values(z)
        if self.mode == "baseline":
            return Hs[:, :, 1:].reshape(-1)
        gam = self._gammas(z)[None, :, None]
        return (Hs[:, :, 1:] - (1.0 - gam) * Hs[:, :, :-1]).reshape(-1)

    def cbfsc_jac(self, z):
        N = self.prob.N
        Hs, nrm = self.barrier_values(z)
        # dH[ob, b, i, :] = t_s * nrm[ob,b,i] @ J_b  (per-control-step gradient)
        dH = self.prob.t_s * np.einsum("obik,bkn->obin", nrm, self.JB)
        n_ob = Hs.shape[0]
        mask = self.S  # (N+2, N+1): mask[i, l] = 1 if l < i
        # d H_i / d u_l = dH_i * mask[i, l]
        dHi = dH[:, :, :, None, :] * mask[None, None, :, :, None]  # (o, b, N+2, N+1, n)
        if self.mode == "baseline":
            J = dHi[:, :, 1:].reshape(n_ob * self.B * (N + 1), self.nu)
            return J
        gam = self._gammas(z)
        Ju = dHi[:, :, 1:] - (1.0 - gam)[None, :, None, None, None] * dHi[:, :, :-1]
        Ju = Ju.reshape(n_ob, self.B, N + 1, self.nu)
        Jg = np.zeros((n_ob, self.B, N + 1, self.B))
        for b in range(self.B):
            Jg[:, b, :, b] = Hs[:, b, :-1]
        return np.concatenate([Ju, Jg], axis=3).reshape(n_ob * self.B * (N + 1), self.nz)

    def constraints(self, z):
        return np.concatenate([self.cbfsc(z), self.b_theta + self.A_theta @ z])

    def constraints_jac(self, z):
        return np.vstack([self.cbfsc_jac(z), self.A_theta])

    def constraint_names(self) -> list[str]:
        names = []
        for o in range(len(self.prob.obstacles)):
            for b in self.prob.barrier_ids:
                names.extend(f"cbfsc[obs{o},{b},stage{i}]" for i in range(self.prob.N + 1))
        names.extend(f"theta_box[{i}]" for i in range(self.A_theta.shape[0]))
        return names

    # verification ----------------------------------------------------------
    def violation(self, z) -> float:
        c = self.constraints(z)
        v = max(0.0, float(-c.min())) if c.size else 0.0
        return max(v, float(np.max(self.lb - z, initial=0.0)), float(np.max(z - self.ub, initial=0.0)))

    def kkt_residual(self, z, act_tol: float = 1e-7) -> float:
        """Stationarity residual with multipliers fitted by NNLS over the active set."""
        grad = self.grad(z)
        c = self.constraints(z)
        cols = []
        act = np.flatnonzero(c <= act_tol)
        if act.size:
            cols.append(self.constraints_jac(z)[act].T)
        at_lo = np.flatnonzero(z - self.lb <= act_tol)
        at_hi = np.flatnonzero(self.ub - z <= act_tol)
        I = np.eye(self.nz)
        if at_lo.size:
            cols.append(I[:, at_lo])
        if at_hi.size:
            cols.append(-I[:, at_hi])
        if not cols:
            return float(np.max(np.abs(grad)))
        A = np.hstack(cols)
        lam, _ = nnls(A, grad, maxiter=50 * A.shape[1])
        return float(np.max(np.abs(grad - A @ lam)))

    def initial_point(self, warm: MpcSolution | None) -> np.ndarray:
        z = np.zeros(self.nz)
        if warm is not None and warm.u_seq.shape == (self.prob.N + 1, self.prob.n):
            z[: self.nu] = warm.u_seq.reshape(-1)
            if self.mode == "fasm" and warm.gamma_e is not None:
                z[self.nu] = warm.gamma_e
                z[self.nu + 1:] = warm.gamma_j
        elif self.mode == "fasm":
            z[self.nu:] = self.prob.gamma_init
        return np.clip(z, self.lb, self.ub)


def _run_slsqp(form: _Formulation, z0, maxiter):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OptimizeWarning)
        warnings.simplefilter("ignore", RuntimeWarning)
        return minimize(
            form.f, z0, jac=form.grad, method="SLSQP",
            bounds=list(zip(form.lb, form.ub)),
            constraints=[{"type": "ineq", "fun": form.constraints, "jac": form.constraints_jac}],
            options={"maxiter": maxiter, "ftol": 1e-14},
        )


def _solve(prob: MpcProblem, mode: str, warm: MpcSolution | None,
           feas_tol: float = FEAS_TOL, opt_tol: float = OPT_TOL, max_iter: int = MAX_ITER) -> MpcSolution:
    t0 = time.perf_counter()
    form = _Formulation(prob, mode)
    z_start = form.initial_point(warm)
    start_ok = form.violation(z_start) <= feas_tol
    start_f = form.f(z_start)

    best, best_key = z_start, (form.violation(z_start), start_f)
    z, used, restarts = z_start, 0, 0
    kkt = np.inf
    while used < max_iter and restarts < 4:
        res = _run_slsqp(form, z, max_iter - used)
        used += max(int(res.get("nit", 0)), 1)
        zc = np.clip(res.x, form.lb, form.ub)
        viol = form.violation(zc)
        key = (viol if viol > feas_tol else 0.0, form.f(zc))
        if key < best_key:
            best, best_key = zc, key
        if viol <= feas_tol:
            kkt = form.kkt_residual(zc)
            if kkt <= opt_tol:
                best = zc
                break
        z = zc
        restarts += 1

    z = best
    # never hand back something worse than a feasible warm start
    if start_ok and form.f(z_start) < form.f(z) and form.violation(z) <= feas_tol:
        z = z_start
    viol = form.violation(z)
    kkt = form.kkt_residual(z) if viol <= feas_tol else np.inf
    if viol > feas_tol:
        status = INFEASIBLE
    elif kkt <= opt_tol:
        status = OPTIMAL
    else:
        status = MAX_ITER_STATUS

    c_all = form.constraints(z)
    n_cb = prob.n_cbfsc
    names = form.constraint_names()
    worst = names[int(np.argmin(c_all))] if c_all.size and c_all.min() < -feas_tol else None
    U = z[: form.nu].reshape(prob.N + 1, prob.n)
    if mode == "fasm":
        ge, gj = float(z[form.nu]), z[form.nu + 1:].copy()
    else:
        ge, gj = None, np.zeros(0)
    sol = MpcSolution(
        u_seq=U, gamma_e=ge, gamma_j=gj, cost=form.cost(z), status=status, kkt_residual=float(kkt),
        max_constraint_violation=viol, cbfsc=c_all[:n_cb].copy(), active=c_all[:n_cb] <= ACTIVE_TOL,
        iterations=used, solve_ms=1e3 * (time.perf_counter() - t0), most_violated=worst,
    )
    if status != OPTIMAL:
        log.debug("%s solve ended %s (viol=%.3g, kkt=%.3g, worst=%s)", mode, status, viol, kkt, worst)
    return sol


def solve(problem: MpcProblem, warm_start: MpcSolution | None = None, **tols) -> MpcSolution:
    """Solve the flexible-CBF problem; decay rates are decision variables."""
    return _solve(problem, "fasm", warm_start, **tols)


def solve_baseline(problem: MpcProblem, warm_start: MpcSolution | None = None, **tols) -> MpcSolution:
    """Same horizon and weights, but plain ``H >= 0`` constraints and no decay rates."""
    return _solve(problem, "baseline", warm_start, **tols)


def evaluate_cost(problem: MpcProblem, u_seq, gamma_e=None, gamma_j=None, mode: str = "fasm") -> float:
    form = _Formulation(problem, mode)
    z = np.asarray(u_seq, float).reshape(-1)
    if mode == "fasm":
        z = np.concatenate([z, [gamma_e], np.asarray(gamma_j, float).reshape(-1)])
    return form.cost(z)


def constraint_values(problem: MpcProblem, u_seq, gamma_e=None, gamma_j=None, mode: str = "fasm") -> np.ndarray:
    """CBFSC (or baseline) constraint values, ordered obstacle, barrier, stage."""
    form = _Formulation(problem, mode)
    z = np.asarray(u_seq, float).reshape(-1)
    if mode == "fasm":
        z = np.concatenate([z, [gamma_e], np.asarray(gamma_j, float).reshape(-1)])
    return form.cbfsc(z)
