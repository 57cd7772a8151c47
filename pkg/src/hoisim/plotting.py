"""Report figures written next to ``report.json``."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STAGE_COLORS = {"stage1": "tab:blue", "stage2": "tab:orange", "stage3": "tab:green"}


def plot_losses(losses: dict, path) -> Path:
    """Per-stage loss curves on one log axis, iterations concatenated."""
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    start = 0
    for stage in ("stage1", "stage2", "stage3"):
        y = np.asarray(losses.get(stage, []), dtype=float)
        if y.size:
            x = start + np.arange(y.size)
            ax.plot(x, np.maximum(y, 1e-16), color=STAGE_COLORS[stage], lw=1.2, label=stage)
            start += y.size
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_velocity_profile(speeds: np.ndarray, selection, path, names=()) -> Path:
    """Joint speed over time; the selected joint is drawn on top and the
    selected frame marked."""
    speeds = np.asarray(speeds)
    j_star, t_star = selection
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    t = np.arange(speeds.shape[1])
    for j in range(speeds.shape[0]):
        if j != j_star:
            ax.plot(t, speeds[j], color="0.75", lw=0.8)
    label = names[j_star] if j_star < len(names) else f"joint {j_star}"
    ax.plot(t, speeds[j_star], color="tab:red", lw=1.8, label=label)
    ax.axvline(t_star, color="k", ls="--", lw=0.8)
    ax.set_xlabel("frame")
    ax.set_ylabel("displacement per frame (m)")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_com(free_com: np.ndarray, com: np.ndarray, contact_frame, path) -> Path:
    """Object COM coordinates against frame, free motion dashed."""
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    t = np.arange(len(com))
    for k, axis in enumerate("xyz"):
        ax.plot(t, free_com[:, k], ls="--", lw=0.8, color=f"C{k}")
        ax.plot(t, com[:, k], lw=1.4, color=f"C{k}", label=axis)
    if contact_frame is not None:
        ax.axvline(contact_frame, color="k", lw=0.8)
    ax.set_xlabel("frame")
    ax.set_ylabel("COM (m)")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def report_figures(report, out_dir, names=()) -> list[Path]:
    out = Path(out_dir)
    paths = [plot_losses(report.losses, out / "loss_curves.png")]
    if report.profile is not None and report.selection is not None:
        paths.append(plot_velocity_profile(report.profile.speeds, report.selection, out / "velocity_profile.png",
                                           names))
    if report.trajectory is not None and report.free_trajectory is not None:
        frame = report.event.frame if report.event is not None else None
        paths.append(plot_com(report.free_trajectory.com, report.trajectory.com, frame, out / "object_com.png"))
    return paths
