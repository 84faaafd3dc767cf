"""SVG figures: sensitivity sweep, mesh growth, state projections and lumped trajectories.

Figures are rendered off-screen and written with a fixed SVG hash salt and no
date metadata so identical inputs give identical files.
"""

from __future__ import annotations

import io
import math
from collections.abc import Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import DimensionFit  # noqa: E402
from .markov import SweepEntry  # noqa: E402
from .utils import atomic_write_bytes  # noqa: E402

plt.rcParams["svg.hashsalt"] = "metamesh"
plt.rcParams["svg.fonttype"] = "none"


def save_svg(fig: plt.Figure, path: Path, config_digest: str) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Description": f"config_digest={config_digest}"})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def sweep_figure(entries: Sequence[SweepEntry], path: Path, config_digest: str) -> None:
    """log10(M) per disturbance of interest; infinite M drawn as capped markers."""
    fig, ax = plt.subplots(figsize=(7, 4))
    finite = [(e.index, math.log10(e.M)) for e in entries if math.isfinite(e.M) and e.M > 0]
    infinite = [e.index for e in entries if math.isinf(e.M)]
    cap = (max((y for _, y in finite), default=0.0)) + 1.0
    if finite:
        xs, ys = zip(*finite)
        ax.bar(xs, ys, color="tab:blue", label="log10 M")
    if infinite:
        ax.scatter(infinite, [cap] * len(infinite), marker="^", s=80, color="tab:red", zorder=3,
                   label=f"M = inf (capped at {cap:g})")
        for x in infinite:
            ax.annotate("inf", (x, cap), textcoords="offset points", xytext=(0, 6), ha="center")
    failed = [e.index for e in entries if math.isnan(e.M)]
    if failed:
        ax.scatter(failed, [0.0] * len(failed), marker="x", color="black", label="solve failed")
    ax.set_xlabel("disturbance of interest")
    ax.set_ylabel("log10 MFPT (gait cycles)")
    ax.set_xticks([e.index for e in entries])
    ax.set_ylim(bottom=0.0, top=cap + 0.5)
    if entries:
        ax.legend(loc="upper left")
    save_svg(fig, path, config_digest)


def dims_figure(fit: DimensionFit, path: Path, config_digest: str) -> None:
    """Mesh size against threshold on log-log axes with the fitted line."""
    d = np.array([s[0] for s in fit.samples])
    n = np.array([s[1] for s in fit.samples], dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog(d, n, "o", color="tab:blue", label="mesh size")
    grid = np.geomspace(d.min(), d.max(), 50)
    intercept = float(np.mean(np.log(n) - fit.slope * np.log(d)))
    ax.loglog(grid, np.exp(intercept) * grid**fit.slope, "-", color="tab:orange",
              label=f"slope {fit.slope:.3f} (n = {fit.n_hat:.2f}, r2 = {fit.r_squared:.3f})")
    ax.set_xlabel("d_tr")
    ax.set_ylabel("N")
    ax.legend()
    save_svg(fig, path, config_digest)


def projection_figure(
    points: np.ndarray,
    sizes: np.ndarray,
    dangerous: np.ndarray,
    labels: Sequence[str],
    path: Path,
    config_digest: str,
) -> None:
    """2-d or 3-d scatter; dangerous states drawn in red on top."""
    k = points.shape[1]
    if k not in (2, 3):
        raise ValueError(f"Projection figures need 2 or 3 coordinates, got {k}")
    fig = plt.figure(figsize=(6, 5))
    ax = fig.add_subplot(projection="3d" if k == 3 else None)
    safe = ~dangerous
    ax.scatter(*points[safe].T, s=sizes[safe], color="tab:blue", alpha=0.6, label="states")
    if dangerous.any():
        ax.scatter(*points[dangerous].T, s=sizes[dangerous], color="tab:red", label="dangerous")
    ax.set_xlabel(labels[0])
    ax.set_ylabel(labels[1])
    if k == 3:
        ax.set_zlabel(labels[2])
    ax.legend(loc="upper right")
    save_svg(fig, path, config_digest)


def trajectory_figure(
    points: np.ndarray,
    sizes: np.ndarray,
    transitions: np.ndarray,
    labels: Sequence[str],
    path: Path,
    config_digest: str,
) -> None:
    """Lumped states on two coordinates with a line per observed transition.

    `points` row i is lumped state i + 1; `transitions` rows are (from, to, count).
    Line width grows with the count; self-transitions and moves into the
    failure state draw no line.
    """
    if points.shape[1] != 2:
        raise ValueError(f"Trajectory figures need 2 coordinates, got {points.shape[1]}")
    fig, ax = plt.subplots(figsize=(6, 5))
    moves = [(int(a), int(b), int(c)) for a, b, c in np.asarray(transitions).reshape(-1, 3)
             if a != b and a > 0 and b > 0]
    top = max((c for _, _, c in moves), default=1)
    for a, b, c in moves:
        xs, ys = points[[a - 1, b - 1]].T
        ax.plot(xs, ys, "-", color="tab:gray", alpha=0.5, linewidth=0.5 + 2.5 * c / top, zorder=1)
    ax.scatter(*points.T, s=sizes, color="tab:blue", alpha=0.8, zorder=2, label="lumped states")
    ax.set_xlabel(labels[0])
    ax.set_ylabel(labels[1])
    ax.legend(loc="upper right")
    save_svg(fig, path, config_digest)
