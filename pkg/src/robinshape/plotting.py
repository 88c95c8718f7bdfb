"""SVG figures for reconstruction runs and Hessian reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import Polyline  # noqa: E402

# fixed ids and no timestamp, so reruns give identical files
plt.rcParams["svg.hashsalt"] = "robinshape"
_META = {"Date": None}

_STYLE = {
    "outer": dict(color="0.3", lw=1.0),
    "exact": dict(color="k", lw=1.5, ls="--"),
    "initial": dict(color="tab:blue", lw=1.0, ls=":"),
    "final": dict(color="tab:red", lw=1.5),
}


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def plot_overlay(curves: Sequence[tuple[str, Polyline]], path) -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    for label, P in curves:
        pts = np.vstack([P.points, P.points[:1]])
        ax.plot(pts[:, 0], pts[:, 1], label=label, **_STYLE.get(label, {}))
    ax.set_aspect("equal")
    ax.legend(loc="upper right", fontsize=8)
    _save(fig, Path(path))


def plot_history(history, out: Path) -> list[str]:
    """Log-scale charts of normalized cost, |V|_H1 and Hausdorff distance."""
    it = np.array([r.iteration for r in history])
    series = {
        "cost": ("normalized cost", np.array([r.cost_total for r in history]) / max(history[0].cost_total, 1e-300)),
        "vnorm": ("Sobolev gradient norm", np.array([r.vnorm for r in history])),
        "hausdorff": ("Hausdorff distance", np.array([r.hausdorff for r in history])),
    }
    written = []
    for key, (label, y) in series.items():
        ok = np.isfinite(y) & (y > 0)
        if not ok.any():
            continue
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.semilogy(it[ok], y[ok], lw=1.2)
        ax.set_xlabel("iteration")
        ax.set_ylabel(label)
        ax.grid(True, which="both", lw=0.3)
        name = f"history_{key}.svg"
        _save(fig, Path(out) / name)
        written.append(name)
    return written


def plot_hessian_report(report, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    x = np.arange(len(report.k))
    ax.bar(x - 0.2, report.q_exact, 0.4, label="u' solve")
    ax.bar(x + 0.2, report.q_fd, 0.4, label="second difference")
    ax.set_xticks(x, [str(k) for k in report.k])
    ax.set_xlabel("k")
    ax.set_ylabel("q")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    _save(fig, Path(path))
