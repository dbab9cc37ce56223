"""Matplotlib figure writers for the CLI report paths.

Figures are rendered to files next to the delimited outputs; the CSV/JSON
files remain the canonical artifacts.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_sigma_curve(levels, sigmas, level_star, path) -> None:
    """Minimum singular value vs candidate noise level, argmin highlighted."""
    levels = np.asarray(levels, dtype=float)
    sigmas = np.asarray(sigmas, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    finite = np.isfinite(sigmas)
    ax.plot(100 * levels[finite], sigmas[finite], "o-", ms=3, lw=1)
    ax.axvline(100 * level_star, color="tab:red", lw=1, ls="--",
               label=f"argmin at {100 * level_star:.0f}%")
    ax.set_xlabel("candidate noise level [%]")
    ax.set_ylabel(r"$\sigma_{\min}$ of compensated moment matrix")
    if np.all(sigmas[finite] > 0):
        ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_level_set_2d(level, path, points=None, title="") -> None:
    """Fitted zero-set polylines, optionally over the data cloud."""
    fig, ax = plt.subplots(figsize=(5, 5))
    if points is not None and len(points):
        pts = np.asarray(points)
        ax.plot(pts[:, 0], pts[:, 1], ".", ms=1.5, color="0.6", label="data")
    for i, line in enumerate(level.polylines):
        ax.plot(line[:, 0], line[:, 1], "-", lw=1.5, color="tab:blue",
                label="fit" if i == 0 else None)
    ax.set_aspect("equal")
    ax.set_xlabel("x1")
    ax.set_ylabel("x2")
    if title:
        ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_mesh_3d(level, path, points=None, title="") -> None:
    """Fitted zero-set mesh for 3-D shapes (coarse preview render)."""
    fig = plt.figure(figsize=(6, 6))
    ax = fig.add_subplot(projection="3d")
    if level.vertices is not None and len(level.vertices):
        ax.plot_trisurf(level.vertices[:, 0], level.vertices[:, 1], level.vertices[:, 2],
                        triangles=level.faces, color="tab:blue", alpha=0.6, lw=0.05)
    if points is not None and len(points):
        pts = np.asarray(points)
        stride = max(1, len(pts) // 2000)
        ax.scatter(pts[::stride, 0], pts[::stride, 1], pts[::stride, 2],
                   s=1, color="0.4", alpha=0.4)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_cloud(points, path, title="") -> None:
    """Scatter of a generated cloud (2-D or 3-D)."""
    pts = np.asarray(points)
    if pts.shape[1] == 3:
        fig = plt.figure(figsize=(6, 6))
        ax = fig.add_subplot(projection="3d")
        stride = max(1, len(pts) // 5000)
        ax.scatter(pts[::stride, 0], pts[::stride, 1], pts[::stride, 2], s=1)
    else:
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.plot(pts[:, 0], pts[:, 1], ".", ms=2)
        ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
