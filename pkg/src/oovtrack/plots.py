"""Report figures (rendered off-screen to PNG)."""
from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_STYLE = {"model": ("tab:blue", "learned model"), "dead_reckoning": ("tab:red", "dead reckoning")}


def error_curves(curves, path):
    """Position error vs time since the hand left the FOV, one panel per method.

    ``curves`` maps ``(method, fov)`` to curve rows from ``summarize``.
    Lines are means; the shaded band spans the 5th to 95th percentile.
    """
    methods = sorted({m for m, _ in curves})
    fig, axes = plt.subplots(1, len(methods), figsize=(5.5 * len(methods), 4), squeeze=False)
    for ax, method in zip(axes[0], methods):
        fovs = sorted(f for m, f in curves if m == method)
        cmap = plt.get_cmap("viridis", max(len(fovs), 2))
        for i, fov in enumerate(fovs):
            rows = curves[(method, fov)]
            t = [0.5 * (r["t_start_s"] + r["t_end_s"]) for r in rows]
            ax.plot(t, [r["mean_cm"] for r in rows], color=cmap(i), label=f"{fov:g} deg")
            ax.fill_between(t, [r["p5_cm"] for r in rows], [r["p95_cm"] for r in rows],
                            color=cmap(i), alpha=0.12, linewidth=0)
        ax.set_title(_STYLE.get(method, (None, method))[1])
        ax.set_xlabel("time outside FOV [s]")
        ax.set_ylabel("position error [cm]")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def fov_trend(rows, path):
    """Mean and median position error per simulated FOV for each method."""
    by_method = defaultdict(list)
    for r in rows:
        by_method[r["method"]].append(r)
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for method, rs in sorted(by_method.items()):
        rs = sorted(rs, key=lambda r: r["fov"])
        color, label = _STYLE.get(method, (None, method))
        fov = [r["fov"] for r in rs]
        ax.plot(fov, [r["mean_pos_cm"] for r in rs], "o-", color=color, label=f"{label} (mean)")
        ax.plot(fov, [r["median_pos_cm"] for r in rs], "s--", color=color, label=f"{label} (median)")
    ax.set_xlabel("horizontal tracking FOV [deg]")
    ax.set_ylabel("position error [cm]")
    ax.set_yscale("log")
    ax.grid(alpha=0.3, which="both")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
