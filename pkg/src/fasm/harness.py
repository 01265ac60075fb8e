"""Closed-loop simulation: obstacle truth, observer, MPC, joint integration, metrics."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import mpc
from .cbf import GAMMA_MIN, SafetySpec, bounding_radius
from .kinematics import (KinematicChain, Pose7, canonical_quaternion, critical_positions, ee_pose,
                         integrate_joints, solve_ik)
from .observer import GpioConfig, GpioState, gpio_step

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


def data_path(*parts: str) -> Path:
    return Path(__file__).parent.joinpath("data", *parts)


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ObstacleConfig:
    start: np.ndarray
    velocity: np.ndarray
    R_o: float
    noise_std: float = 0.0

    def truth(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        return self.start + self.velocity * t, self.velocity.copy()


@dataclass(frozen=True)
class Waypoint:
    pose: Pose7
    hold: float | None = None


@dataclass
class ScenarioConfig:
    name: str
    chain: KinematicChain
    theta0: np.ndarray
    waypoints: list[Waypoint]
    observer: GpioConfig
    observer_init: Any
    obstacles: list[ObstacleConfig]
    d_min: float
    r_d: float
    N: int
    weights: mpc.Weights
    u_max: float
    joint_limits: np.ndarray
    mode: str = "fasm"
    gamma_init: float = 1e-3
    gamma_min: float = GAMMA_MIN
    t_s: float = 0.04
    duration: float = 10.0
    seed: int = 0
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def steps(self) -> int:
        return max(1, int(round(self.duration / self.t_s)))

    def reference(self, t: float) -> np.ndarray:
        elapsed = 0.0
        for wp in self.waypoints:
            if wp.hold is None or t < elapsed + wp.hold - 1e-12:
                return wp.pose.as_vector()
            elapsed += wp.hold
        return self.waypoints[-1].pose.as_vector()

    def safety_spec(self, ob: ObstacleConfig) -> SafetySpec:
        return SafetySpec(self.d_min, ob.R_o, self.r_d)


def _vec(value, size, what) -> np.ndarray:
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.size != size or not np.all(np.isfinite(arr)):
        raise ConfigError(f"{what}: expected {size} finite numbers, got {value!r}")
    return arr


def _length(value, unit: str | None) -> float:
    scale = {None: 1.0, "m": 1.0, "cm": 0.01, "mm": 0.001}
    if unit not in scale:
        raise ConfigError(f"unknown length unit {unit!r}")
    return float(value) * scale[unit]


def _resolve(path: str, base_dir: Path | None) -> Path:
    p = Path(path)
    candidates = [p] if p.is_absolute() else [(base_dir or Path.cwd()) / p, data_path(p.name)]
    for c in candidates:
        if c.exists():
            return c
    raise ConfigError(f"referenced file {path!r} not found")


def set_dotted(data: dict, key: str, value) -> None:
    """Assign ``value`` at a dotted path such as ``controller.P_gamma``."""
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        if isinstance(node, list):
            node = node[int(part)]
        else:
            node = node.setdefault(part, {})
    last = parts[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_scenario(source, overrides: Sequence[str] | dict | None = None,
                  base_dir: Path | None = None) -> ScenarioConfig:
    """Build a :class:`ScenarioConfig` from a path, a JSON string or a dict."""
    if isinstance(source, dict):
        data = copy.deepcopy(source)
    else:
        path = Path(source)
        if not path.exists():
            candidate = data_path("scenarios", path.name)
            if not candidate.exists():
                raise ConfigError(f"scenario file {source!r} not found")
            path = candidate
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        base_dir = base_dir or path.parent
    items = overrides.items() if isinstance(overrides, dict) else map(parse_override, overrides or ())
    for key, value in items:
        set_dotted(data, key, value)
    try:
        return _from_dict(data, base_dir)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid scenario: {exc}") from exc


def _from_dict(data: dict, base_dir: Path | None) -> ScenarioConfig:
    t_s = float(data.get("t_s", 0.04))
    duration = float(data.get("duration", 10.0))
    if t_s <= 0 or duration <= 0:
        raise ConfigError("t_s and duration must be positive")
    chain_src = data.get("chain", "ur5.json")
    chain = KinematicChain.from_dict(chain_src) if isinstance(chain_src, dict) else \
        KinematicChain.from_json(_resolve(chain_src, base_dir))
    n = chain.n

    ctrl = data.get("controller", {})
    limits = ctrl.get("joint_limits", chain.joint_limits)
    if isinstance(limits, dict):
        limits = [limits[str(i)] if str(i) in limits else limits[i] for i in range(n)]
    joint_limits = np.array(limits if limits is not None else [(-np.inf, np.inf)] * n, dtype=float)
    if joint_limits.shape != (n, 2) or np.any(joint_limits[:, 0] > joint_limits[:, 1]):
        raise ConfigError("joint_limits must be n pairs of [min, max]")

    wps = data.get("reference", {}).get("waypoints") or []
    if not wps:
        raise ConfigError("reference.waypoints must be non-empty")
    waypoints = []
    for wp in wps:
        vec = _vec(wp["pose"] if isinstance(wp, dict) else wp, 7, "waypoint pose")
        hold = wp.get("hold") if isinstance(wp, dict) else None
        waypoints.append(Waypoint(Pose7(vec[:3], canonical_quaternion(vec[3:])), None if hold is None else float(hold)))

    init = data.get("initial", {})
    if "theta" in init:
        theta0 = _vec(init["theta"], n, "initial.theta")
    elif "pose" in init:
        vec = _vec(init["pose"], 7, "initial.pose")
        seed = _vec(init.get("seed_theta", np.zeros(n)), n, "initial.seed_theta")
        theta0 = solve_ik(chain, Pose7(vec[:3], canonical_quaternion(vec[3:])), seed)
    else:
        raise ConfigError("initial must give theta or pose")

    ob = data.get("observer", {})
    alphas = tuple(ob.get("alphas", (5.0, 10.0, 2.0)))
    m = int(ob.get("m", len(alphas)))
    if m != len(alphas):
        raise ConfigError(f"observer.m={m} but {len(alphas)} gains given")
    observer = GpioConfig(alphas=alphas, t_s=t_s, eta=float(ob.get("eta", 0.9999)), delta=float(ob.get("delta", 0.8)))
    try:
        observer.certificate
    except ValueError as exc:
        raise ConfigError(f"observer: {exc}") from exc
    observer_init = ob.get("init", "truth")
    if observer_init != "truth":
        arr = np.asarray(observer_init, dtype=float)
        if arr.size != 3 * m:
            raise ConfigError("observer.init must be 'truth' or m*3 numbers")

    safety = data.get("safety", {})
    unit = safety.get("unit")
    d_min = _length(safety.get("d_min", 0.001), unit)
    obs_blocks = safety.get("obstacles")
    if obs_blocks is None:
        obs_blocks = [safety["obstacle"]] if "obstacle" in safety else []
    noise_default = float(data.get("measurement", {}).get("noise_std", 0.0))
    obstacles = []
    for blk in obs_blocks:
        shape = blk.get("shape", "sphere")
        if shape == "sphere":
            R_o = _length(blk["radius"], unit)
        elif shape == "box":
            R_o = bounding_radius([_length(d, unit) for d in blk["dims"]])
        else:
            raise ConfigError(f"unknown obstacle shape {shape!r}")
        start = _vec(blk["start"], 3, "obstacle.start") * _length(1.0, unit)
        vel = _vec(blk.get("velocity", (0, 0, 0)), 3, "obstacle.velocity") * _length(1.0, unit)
        obstacles.append(ObstacleConfig(start, vel, R_o, float(blk.get("noise_std", noise_default))))
    mode_rd = safety.get("r_d_mode", "certificate")
    if mode_rd == "certificate":
        r_d = observer.tolerance_distance
    elif isinstance(mode_rd, dict) and "fixed" in mode_rd:
        r_d = _length(mode_rd["fixed"], unit)
    else:
        raise ConfigError(f"unknown r_d_mode {mode_rd!r}")
    if d_min < 0 or r_d < 0:
        raise ConfigError("safety distances must be non-negative")

    mode = ctrl.get("mode", "fasm")
    if mode not in ("fasm", "baseline"):
        raise ConfigError(f"controller.mode must be fasm or baseline, got {mode!r}")
    N = int(ctrl.get("N", 1))
    if N < 1:
        raise ConfigError("controller.N must be >= 1")
    P_gamma = float(ctrl.get("P_gamma", 150.0))
    Q, R = ctrl.get("Q", 2000.0), ctrl.get("R", 50.0)
    n_crit = len(chain.critical_points)
    try:
        weights = mpc.Weights(
            np.asarray(Q, float) if np.ndim(Q) == 2 else float(Q) * np.eye(7),
            np.asarray(R, float) if np.ndim(R) == 2 else float(R) * np.eye(n),
            P_gamma,
            np.broadcast_to(np.asarray(ctrl.get("P_j", P_gamma), float), (n_crit,)).copy(),
        )
    except ValueError as exc:
        raise ConfigError(f"controller weights: {exc}") from exc
    u_max = float(ctrl.get("u_max", 0.6))
    if u_max < 0:
        raise ConfigError("u_max must be non-negative")
    return ScenarioConfig(
        name=str(data.get("name", "scenario")), chain=chain, theta0=theta0, waypoints=waypoints,
        observer=observer, observer_init=observer_init, obstacles=obstacles, d_min=d_min, r_d=r_d,
        N=N, weights=weights, u_max=u_max, joint_limits=joint_limits, mode=mode,
        gamma_init=float(ctrl.get("gamma_init", 1e-3)), gamma_min=float(ctrl.get("gamma_min", GAMMA_MIN)),
        t_s=t_s, duration=duration, seed=int(data.get("seed", 0)), raw=data,
    )


# --------------------------------------------------------------------------
# closed loop


def obstacle_truth(t: float, obstacle: ObstacleConfig) -> tuple[np.ndarray, np.ndarray]:
    return obstacle.truth(t)


def _initial_observer(cfg: ScenarioConfig, ob: ObstacleConfig) -> GpioState:
    m = cfg.observer.m
    if cfg.observer_init == "truth":
        return GpioState.from_truth(ob.start, ob.velocity, m)
    return GpioState(np.asarray(cfg.observer_init, float).reshape(m, 3))


@dataclass
class StepRecord:
    k: int
    t: float
    theta: np.ndarray
    u: np.ndarray
    ee: np.ndarray
    crit: np.ndarray
    obs: np.ndarray
    obs_hat: np.ndarray
    vel_hat: np.ndarray
    h_e: float
    h_crit: np.ndarray
    H_e: float
    gamma_e: float
    gamma_j: np.ndarray
    cost: float
    status: str
    solve_ms: float
    active: bool
    reference: np.ndarray


@dataclass
class TrajectoryLog:
    scenario: str
    mode: str
    t_s: float
    records: list[StepRecord] = field(default_factory=list)
    point_ids: tuple[str, ...] = ()
    joint_limits: np.ndarray | None = None
    u_max: float = np.inf

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])


def run_scenario(cfg: ScenarioConfig, *, obstacle_free: bool = False) -> TrajectoryLog:
    """Simulate the closed loop for ``cfg.duration`` seconds.

    Solver failures never abort the run: an infeasible step commands zero
    joint rates and is recorded with its status.
    """
    rng = np.random.default_rng(cfg.seed)
    chain = cfg.chain
    obstacles = [] if obstacle_free else cfg.obstacles
    specs = [cfg.safety_spec(ob) for ob in obstacles]
    states = [_initial_observer(cfg, ob) for ob in obstacles]
    model = cfg.observer.model
    theta = cfg.theta0.copy()
    warm = None
    out = TrajectoryLog(cfg.name, cfg.mode, cfg.t_s, point_ids=tuple(chain.point_ids),
                        joint_limits=cfg.joint_limits, u_max=cfg.u_max)
    solver = mpc.solve if cfg.mode == "fasm" else mpc.solve_baseline
    for k in range(cfg.steps):
        t = k * cfg.t_s
        views, truths, priors = [], [], []
        for ob, spec, st in zip(obstacles, specs, states):
            o_true, _ = ob.truth(t)
            o_meas = o_true + (rng.normal(0.0, ob.noise_std, 3) if ob.noise_std > 0 else 0.0)
            post = gpio_step(st, o_meas, cfg.observer)
            views.append(mpc.ObstacleView(o_meas, post, model, spec))
            truths.append(o_true)
            priors.append(st)
        ref = cfg.reference(t)
        prob = mpc.build_problem(chain, theta, ref, views, cfg.weights, cfg.N, cfg.t_s, cfg.u_max,
                                 cfg.joint_limits, cfg.gamma_min, cfg.gamma_init)
        sol = solver(prob, warm)
        if sol.status == mpc.INFEASIBLE:
            log.info("%s: step %d infeasible (%s); holding still", cfg.name, k, sol.most_violated)
            u = np.zeros(chain.n)
            warm = None
        else:
            u = sol.u0.copy()
            warm = sol.shifted()
        # keep the applied step inside the joint box; differs from u only within solver tolerance
        lo = (cfg.joint_limits[:, 0] - theta) / cfg.t_s
        hi = (cfg.joint_limits[:, 1] - theta) / cfg.t_s
        u = np.clip(np.clip(u, lo, hi), -cfg.u_max, cfg.u_max)

        pose = ee_pose(chain, theta)
        crit = critical_positions(chain, theta)
        if obstacles:
            h_e = min(s.clearance(pose.p, o) for s, o in zip(specs, truths))
            H_e = min(s.surplus(pose.p, o) for s, o in zip(specs, truths))
            h_crit = np.array([min(s.clearance(x, o) for s, o in zip(specs, truths)) for x in crit])
            obs, obs_hat, vel_hat = truths[0], priors[0].position, priors[0].velocity
        else:
            h_e = H_e = np.inf
            h_crit = np.full(len(crit), np.inf)
            obs = obs_hat = vel_hat = np.full(3, np.nan)
        out.records.append(StepRecord(
            k=k, t=t, theta=theta.copy(), u=u, ee=pose.as_vector(), crit=crit,
            obs=np.asarray(obs, float), obs_hat=np.asarray(obs_hat, float), vel_hat=np.asarray(vel_hat, float),
            h_e=h_e, h_crit=h_crit, H_e=H_e,
            gamma_e=np.nan if sol.gamma_e is None else sol.gamma_e,
            gamma_j=sol.gamma_j.copy(), cost=sol.cost, status=sol.status, solve_ms=sol.solve_ms,
            active=sol.any_active if obstacles else False, reference=ref,
        ))
        theta = integrate_joints(theta, u, cfg.t_s).theta
        states = [v.state for v in views]
    return out


# --------------------------------------------------------------------------
# logs


def csv_header(n: int) -> list[str]:
    return (["k", "t"] + [f"theta_{i + 1}" for i in range(n)] + [f"u_{i + 1}" for i in range(n)]
            + ["ee_x", "ee_y", "ee_z", "ee_qw", "ee_qx", "ee_qy", "ee_qz",
               "obs_x", "obs_y", "obs_z", "obs_hat_x", "obs_hat_y", "obs_hat_z",
               "vhat_x", "vhat_y", "vhat_z", "h_e", "h_min_crit", "gamma_e", "gamma_j_min",
               "cost", "status", "solve_ms"])


def _fmt(x: float) -> str:
    return repr(float(x))


def write_csv(trajectory: TrajectoryLog, dest, *, timing: bool = False) -> None:
    """Write the per-step log. Wall-clock solve times are only written with ``timing=True``."""
    if isinstance(dest, (str, Path)):
        with open(dest, "w", newline="") as fh:
            return write_csv(trajectory, fh, timing=timing)
    n = trajectory.records[0].theta.size if trajectory.records else 0
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(csv_header(n))
    for r in trajectory.records:
        gj = float(np.min(r.gamma_j)) if r.gamma_j.size else float("nan")
        hc = float(np.min(r.h_crit)) if r.h_crit.size else float("nan")
        row = [str(r.k), _fmt(r.t)] + [_fmt(v) for v in r.theta] + [_fmt(v) for v in r.u]
        row += [_fmt(v) for v in r.ee] + [_fmt(v) for v in r.obs] + [_fmt(v) for v in r.obs_hat]
        row += [_fmt(v) for v in r.vel_hat] + [_fmt(r.h_e), _fmt(hc), _fmt(r.gamma_e), _fmt(gj), _fmt(r.cost)]
        row += [r.status, _fmt(r.solve_ms) if timing else "nan"]
        w.writerow(row)


def csv_text(trajectory: TrajectoryLog, **kw) -> str:
    buf = io.StringIO()
    write_csv(trajectory, buf, **kw)
    return buf.getvalue()


# --------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    min_clearance: float
    highest_altitude: float
    trigger_moment: float | None
    max_gamma: float
    final_position_error: float
    final_quaternion_error: float
    collision: bool
    all_optimal: bool
    n_infeasible: int
    n_max_iter: int
    max_abs_u: float
    theta_in_box: bool
    deviation_moment: float | None = None

    def as_dict(self) -> dict:
        return {k: (None if v is None else (bool(v) if isinstance(v, (bool, np.bool_)) else
                                            (int(v) if isinstance(v, (int, np.integer)) else float(v))))
                for k, v in self.__dict__.items()}


def quaternion_error(q, q_ref) -> float:
    """Largest componentwise difference after aligning quaternion signs."""
    q, q_ref = np.asarray(q, float), np.asarray(q_ref, float)
    if q @ q_ref < 0:
        q = -q
    return float(np.max(np.abs(q - q_ref)))


def compute_metrics(trajectory: TrajectoryLog, twin: TrajectoryLog | None = None,
                    deviation_tol: float = 1e-3) -> Metrics:
    """Summaries over a run.

    ``trigger_moment`` is the first time any CBF constraint is active at the
    returned solution. With a ``twin`` (the same run without obstacles), the
    first time the end-effector strays more than ``deviation_tol`` from it is
    reported as ``deviation_moment``.
    """
    recs = trajectory.records
    if not recs:
        raise ValueError("empty trajectory")
    clearances = [min(r.h_e, float(np.min(r.h_crit, initial=np.inf))) for r in recs]
    min_clear = float(np.min(clearances))
    trigger = next((r.t for r in recs if r.active), None)
    gammas = np.array([r.gamma_e for r in recs], float)
    max_gamma = float(np.nanmax(gammas)) if np.any(np.isfinite(gammas)) else float("nan")
    last = recs[-1]
    pos_err = float(np.linalg.norm(last.ee[:3] - last.reference[:3]))
    q_err = quaternion_error(last.ee[3:], last.reference[3:])
    statuses = [r.status for r in recs]
    U = np.array([r.u for r in recs])
    TH = np.array([r.theta for r in recs])
    lim = trajectory.joint_limits
    in_box = True if lim is None else bool(np.all(TH >= lim[:, 0]) and np.all(TH <= lim[:, 1]))
    deviation = None
    if twin is not None:
        for r, tr in zip(recs, twin.records):
            if np.linalg.norm(r.ee[:3] - tr.ee[:3]) > deviation_tol:
                deviation = r.t
                break
    return Metrics(
        min_clearance=min_clear, highest_altitude=float(max(r.ee[2] for r in recs)), trigger_moment=trigger,
        max_gamma=max_gamma, final_position_error=pos_err, final_quaternion_error=q_err,
        collision=bool(min_clear < 0), all_optimal=all(s == mpc.OPTIMAL for s in statuses),
        n_infeasible=statuses.count(mpc.INFEASIBLE), n_max_iter=statuses.count(mpc.MAX_ITER_STATUS),
        max_abs_u=float(np.max(np.abs(U))), theta_in_box=in_box, deviation_moment=deviation,
    )


# --------------------------------------------------------------------------
# comparisons


@dataclass
class RunResult:
    config: ScenarioConfig
    log: TrajectoryLog
    metrics: Metrics


def run_many(configs: Sequence[ScenarioConfig], workers: int = 1, with_twin: bool = False) -> list[RunResult]:
    def one(cfg):
        traj = run_scenario(cfg)
        twin = run_scenario(cfg, obstacle_free=True) if with_twin else None
        return RunResult(cfg, traj, compute_metrics(traj, twin))

    if workers <= 1:
        return [one(c) for c in configs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, configs))


def compare_runs(configs: Sequence[ScenarioConfig], workers: int = 1, with_twin: bool = False) -> list[RunResult]:
    """Run configurations on a shared timing grid and return aligned results."""
    if len(configs) < 2:
        raise ConfigError("compare needs at least two configurations")
    t_s, steps = configs[0].t_s, configs[0].steps
    for c in configs[1:]:
        if not np.isclose(c.t_s, t_s) or c.steps != steps:
            raise ConfigError(f"{c.name}: timing grid differs from {configs[0].name}")
    return run_many(configs, workers, with_twin)


def comparison_table(results: Sequence[RunResult]) -> str:
    cols = ["min_clearance", "highest_altitude", "trigger_moment", "deviation_moment", "max_gamma",
            "final_position_error", "final_quaternion_error", "collision", "all_optimal"]
    lines = ["\t".join(["run", "mode", "N"] + cols)]
    for r in results:
        d = r.metrics.as_dict()
        vals = []
        for c in cols:
            v = d[c]
            vals.append("-" if v is None else (str(v) if isinstance(v, bool) else f"{v:.6g}"))
        lines.append("\t".join([r.config.name, r.config.mode, str(r.config.N)] + vals))
    return "\n".join(lines)
