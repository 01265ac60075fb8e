"""Serial-manipulator geometry: DH forward kinematics and geometric Jacobians.

Positions are in metres, angles in radians. Quaternions are stored as
``(w, x, y, z)`` and canonicalized to ``w >= 0``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class DHJoint:
    """One revolute joint in standard Denavit-Hartenberg form."""

    a: float
    alpha: float
    d: float
    theta_offset: float = 0.0

    def transform(self, theta: float) -> np.ndarray:
        ct, st = np.cos(theta + self.theta_offset), np.sin(theta + self.theta_offset)
        ca, sa = np.cos(self.alpha), np.sin(self.alpha)
        return np.array([
            [ct, -st * ca, st * sa, self.a * ct],
            [st, ct * ca, -ct * sa, self.a * st],
            [0.0, sa, ca, self.d],
            [0.0, 0.0, 0.0, 1.0],
        ])


@dataclass(frozen=True)
class CriticalPoint:
    """A point rigidly attached to the distal frame of link ``link``."""

    link: int
    offset: tuple[float, float, float]
    id: str


@dataclass(frozen=True)
class KinematicChain:
    joints: tuple[DHJoint, ...]
    critical_points: tuple[CriticalPoint, ...] = ()
    joint_limits: tuple[tuple[float, float], ...] | None = None
    base_xyz: tuple[float, float, float] = (0.0, 0.0, 0.0)
    base_rpy: tuple[float, float, float] = (0.0, 0.0, 0.0)
    tool_xyz: tuple[float, float, float] = (0.0, 0.0, 0.0)
    tool_rpy: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        n = len(self.joints)
        if n < 1:
            raise ValueError("chain needs at least one joint")
        ids = set()
        for cp in self.critical_points:
            if not 0 <= cp.link < n:
                raise ValueError(f"critical point {cp.id!r}: link {cp.link} outside 0..{n - 1}")
            if cp.id in ids:
                raise ValueError(f"duplicate critical point id {cp.id!r}")
            ids.add(cp.id)
        if self.joint_limits is not None and len(self.joint_limits) != n:
            raise ValueError("joint_limits must have one [min, max] pair per joint")

    @property
    def n(self) -> int:
        return len(self.joints)

    @cached_property
    def base(self) -> np.ndarray:
        return homogeneous(self.base_xyz, self.base_rpy)

    @cached_property
    def tool(self) -> np.ndarray:
        return homogeneous(self.tool_xyz, self.tool_rpy)

    @property
    def point_ids(self) -> list[str]:
        return [cp.id for cp in self.critical_points]

    def point(self, point_id: str) -> CriticalPoint:
        for cp in self.critical_points:
            if cp.id == point_id:
                return cp
        raise KeyError(f"unknown critical point {point_id!r}")

    def with_critical_points(self, points: Sequence[CriticalPoint]) -> "KinematicChain":
        return replace(self, critical_points=tuple(points))

    @classmethod
    def from_dict(cls, data: dict) -> "KinematicChain":
        joints = tuple(DHJoint(*map(float, row)) for row in data["dh"])
        n = len(joints)
        if "critical_points" in data:
            points = tuple(
                CriticalPoint(int(p["link"]), tuple(float(v) for v in p.get("offset", (0, 0, 0))), str(p["id"]))
                for p in data["critical_points"]
            )
        else:
            points = default_critical_points(n)
        limits = data.get("joint_limits")
        if limits is not None:
            limits = tuple((float(lo), float(hi)) for lo, hi in limits)
        base, tool = data.get("base", {}), data.get("tool", {})
        return cls(
            joints, points, limits,
            base_xyz=_triple(base.get("xyz")), base_rpy=_triple(base.get("rpy")),
            tool_xyz=_triple(tool.get("xyz")), tool_rpy=_triple(tool.get("rpy")),
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "KinematicChain":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _triple(v) -> tuple[float, float, float]:
    return (0.0, 0.0, 0.0) if v is None else tuple(float(x) for x in v)


def rpy_matrix(rpy) -> np.ndarray:
    """Fixed-axis roll-pitch-yaw, ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""
    r, p, y = rpy
    cr, sr, cp, sp, cy, sy = np.cos(r), np.sin(r), np.cos(p), np.sin(p), np.cos(y), np.sin(y)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


def homogeneous(xyz, rpy) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = rpy_matrix(rpy)
    T[:3, 3] = xyz
    return T


def default_critical_points(n: int) -> tuple[CriticalPoint, ...]:
    """One point per link, at the origin of its distal joint frame."""
    return tuple(CriticalPoint(i, (0.0, 0.0, 0.0), f"link{i + 1}") for i in range(n))


@dataclass(frozen=True)
class JointState:
    theta: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))


@dataclass(frozen=True)
class Pose7:
    """End-effector position ``p`` and unit quaternion ``q = (w, x, y, z)``."""

    p: np.ndarray
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float).reshape(3))
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float).reshape(4))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.q])

    @classmethod
    def from_vector(cls, x: Sequence[float]) -> "Pose7":
        x = np.asarray(x, dtype=float)
        return cls(x[:3], x[3:7])

    def normalized(self) -> "Pose7":
        return Pose7(self.p, canonical_quaternion(self.q))


def canonical_quaternion(q: np.ndarray) -> np.ndarray:
    """Unit quaternion with non-negative scalar part."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    if q[0] < 0 or (q[0] == 0 and q[np.flatnonzero(q)[0]] < 0):
        q = -q
    return q


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to (w, x, y, z), branch chosen for numerical stability."""
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return canonical_quaternion(np.array(q))


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quaternion_rate_matrix(q: np.ndarray) -> np.ndarray:
    """4x3 map G with q_dot = G @ omega for a world-frame angular velocity."""
    w, x, y, z = q
    return 0.5 * np.array([
        [-x, -y, -z],
        [w, z, -y],
        [-z, w, x],
        [y, -x, w],
    ])


def _theta(chain: KinematicChain, theta) -> np.ndarray:
    if isinstance(theta, JointState):
        theta = theta.theta
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (chain.n,):
        raise ValueError(f"expected {chain.n} joint angles, got shape {theta.shape}")
    return theta


def link_frames(chain: KinematicChain, theta) -> list[np.ndarray]:
    """World transforms of frames 0..n (frame 0 is the base)."""
    theta = _theta(chain, theta)
    frames = [chain.base]
    for joint, th in zip(chain.joints, theta):
        frames.append(frames[-1] @ joint.transform(th))
    return frames


def _point_world(frames, link: int, offset) -> np.ndarray:
    T = frames[link + 1]
    return T[:3, :3] @ np.asarray(offset, dtype=float) + T[:3, 3]


def _translational_jacobian(frames, p: np.ndarray, upto: int) -> np.ndarray:
    n = len(frames) - 1
    J = np.zeros((3, n))
    for i in range(upto):
        z, origin = frames[i][:3, 2], frames[i][:3, 3]
        J[:, i] = np.cross(z, p - origin)
    return J


def forward_point(chain: KinematicChain, theta, point_id: str) -> np.ndarray:
    """World position of a critical point."""
    cp = chain.point(point_id)
    return _point_world(link_frames(chain, theta), cp.link, cp.offset)


def critical_positions(chain: KinematicChain, theta) -> np.ndarray:
    """All critical point positions, shape (n_crit, 3), in declaration order."""
    frames = link_frames(chain, theta)
    return np.array([_point_world(frames, cp.link, cp.offset) for cp in chain.critical_points]).reshape(-1, 3)


def ee_pose(chain: KinematicChain, theta) -> Pose7:
    T = link_frames(chain, theta)[-1] @ chain.tool
    return Pose7(T[:3, 3], rotation_to_quaternion(T[:3, :3]))


def point_jacobian(chain: KinematicChain, theta, point_id: str) -> np.ndarray:
    """3 x n translational geometric Jacobian of a critical point."""
    cp = chain.point(point_id)
    frames = link_frames(chain, theta)
    p = _point_world(frames, cp.link, cp.offset)
    return _translational_jacobian(frames, p, cp.link + 1)


def critical_jacobians(chain: KinematicChain, theta) -> np.ndarray:
    """Stack of point Jacobians, shape (n_crit, 3, n)."""
    frames = link_frames(chain, theta)
    out = np.zeros((len(chain.critical_points), 3, chain.n))
    for k, cp in enumerate(chain.critical_points):
        p = _point_world(frames, cp.link, cp.offset)
        out[k] = _translational_jacobian(frames, p, cp.link + 1)
    return out


def ee_jacobian(chain: KinematicChain, theta) -> np.ndarray:
    """7 x n Jacobian of (position, quaternion) with respect to joint rates."""
    frames = link_frames(chain, theta)
    T = frames[-1] @ chain.tool
    p = T[:3, 3]
    Jp = _translational_jacobian(frames, p, chain.n)
    Jw = np.column_stack([frames[i][:3, 2] for i in range(chain.n)])
    q = rotation_to_quaternion(T[:3, :3])
    return np.vstack([Jp, quaternion_rate_matrix(q) @ Jw])


def integrate_joints(theta, u, t_s: float) -> JointState:
    t0 = theta.t if isinstance(theta, JointState) else 0.0
    th = theta.theta if isinstance(theta, JointState) else np.asarray(theta, dtype=float)
    u = np.asarray(u, dtype=float)
    if u.shape != th.shape:
        raise ValueError(f"joint rate shape {u.shape} does not match joints {th.shape}")
    return JointState(th + t_s * u, t0 + t_s)


def predict_point(x, J, u, t_s: float) -> np.ndarray:
    """One step of the linear prediction model ``x + t_s J u``; no renormalization."""
    x = np.asarray(x, dtype=float)
    J = np.atleast_2d(np.asarray(J, dtype=float))
    u = np.asarray(u, dtype=float)
    if J.shape[1] != u.shape[0] or J.shape[0] != x.shape[0]:
        raise ValueError(f"Jacobian {J.shape} incompatible with x {x.shape} and u {u.shape}")
    return x + t_s * (J @ u)


def solve_ik(chain: KinematicChain, target: Pose7, theta0, *, tol: float = 1e-10,
             max_iter: int = 500, damping: float = 1e-3) -> np.ndarray:
    """Damped least-squares IK on position and orientation error.

    Returns the joint vector; raises ``RuntimeError`` when it fails to converge.
    """
    theta = _theta(chain, theta0).copy()
    R_goal = quaternion_to_rotation(target.q)
    for _ in range(max_iter):
        frames = link_frames(chain, theta)
        T = frames[-1] @ chain.tool
        p = T[:3, 3]
        dp = target.p - p
        Re = R_goal @ T[:3, :3].T
        dw = 0.5 * np.array([Re[2, 1] - Re[1, 2], Re[0, 2] - Re[2, 0], Re[1, 0] - Re[0, 1]])
        err = np.concatenate([dp, dw])
        if np.linalg.norm(err) < tol:
            return theta
        J = np.vstack([
            _translational_jacobian(frames, p, chain.n),
            np.column_stack([frames[i][:3, 2] for i in range(chain.n)]),
        ])
        step = J.T @ np.linalg.solve(J @ J.T + damping**2 * np.eye(6), err)
        theta = theta + step
    raise RuntimeError("inverse kinematics did not converge")
