"""Figures rendered next to the CSV logs.

Uses the Agg backend through ``Figure`` objects directly, so nothing here
touches pyplot's global state and worker threads can render in parallel.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .harness import RunResult, TrajectoryLog, quaternion_error

STYLE = {"linewidth": 1.2}


def _new(nrows: int = 1, height: float = 2.4) -> tuple[Figure, np.ndarray]:
    fig = Figure(figsize=(6.4, height * nrows), layout="constrained")
    FigureCanvasAgg(fig)
    axes = fig.subplots(nrows, 1, sharex=True, squeeze=False)[:, 0]
    for ax in axes:
        ax.grid(True, alpha=0.3)
    return fig, axes


def tracking_errors(log: TrajectoryLog) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    t = log.column("t")
    pos = np.array([np.linalg.norm(r.ee[:3] - r.reference[:3]) for r in log.records])
    quat = np.array([quaternion_error(r.ee[3:], r.reference[3:]) for r in log.records])
    return t, pos, quat


def trajectory_figure(log: TrajectoryLog) -> Figure:
    """Tracking error, clearance, decay rate and end-effector height over time."""
    fig, (a_err, a_h, a_g, a_z) = _new(4, 1.8)
    t, pos, quat = tracking_errors(log)
    a_err.plot(t, pos, label="position [m]", **STYLE)
    a_err.plot(t, quat, label="quaternion", **STYLE)
    a_err.set_yscale("log")
    a_err.legend(loc="upper right", fontsize=8)
    a_err.set_ylabel("error")

    h_e = log.column("h_e")
    h_c = np.array([np.min(r.h_crit, initial=np.inf) for r in log.records])
    if np.all(np.isfinite(h_e)):
        a_h.plot(t, h_e, label="end-effector", **STYLE)
        a_h.plot(t, h_c, label="critical points", **STYLE)
        a_h.axhline(0.0, color="k", linewidth=0.8)
        a_h.legend(loc="upper right", fontsize=8)
    a_h.set_ylabel("clearance h [m]")

    a_g.plot(t, log.column("gamma_e"), **STYLE)
    a_g.set_ylabel(r"$\gamma_e$")

    a_z.plot(t, [r.ee[2] for r in log.records], **STYLE)
    a_z.set_ylabel("ee z [m]")
    a_z.set_xlabel("t [s]")
    fig.suptitle(f"{log.scenario} ({log.mode})", fontsize=10)
    return fig


def path_figure(log: TrajectoryLog) -> Figure:
    """Top view (x, y) of the end-effector and the obstacle centre."""
    fig = Figure(figsize=(4.8, 4.8), layout="constrained")
    FigureCanvasAgg(fig)
    ax = fig.add_subplot()
    ee = np.array([r.ee[:3] for r in log.records])
    ax.plot(ee[:, 0], ee[:, 1], label="end-effector", **STYLE)
    obs = np.array([r.obs for r in log.records])
    if np.all(np.isfinite(obs)):
        ax.plot(obs[:, 0], obs[:, 1], "--", label="obstacle", **STYLE)
    ax.plot(*ee[0, :2], "o", color="C0")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    return fig


def comparison_figure(results: Sequence[RunResult], labels: Sequence[str] | None = None) -> Figure:
    fig, (a_h, a_z) = _new(2)
    for i, res in enumerate(results):
        lab = labels[i] if labels else f"{res.config.name} {res.config.mode} N={res.config.N}"
        t = res.log.column("t")
        h = [min(r.h_e, float(np.min(r.h_crit, initial=np.inf))) for r in res.log.records]
        a_h.plot(t, h, label=lab, **STYLE)
        a_z.plot(t, [r.ee[2] for r in res.log.records], label=lab, **STYLE)
    a_h.axhline(0.0, color="k", linewidth=0.8)
    a_h.set_ylabel("min clearance [m]")
    a_z.set_ylabel("ee z [m]")
    a_z.set_xlabel("t [s]")
    a_h.legend(fontsize=8)
    return fig


def save(fig: Figure, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=120)
    return path


def render_run(log: TrajectoryLog, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    return [save(trajectory_figure(log), out_dir / "trajectory.png"),
            save(path_figure(log), out_dir / "path.png")]
