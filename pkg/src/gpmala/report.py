"""Figure rendering for emitted experiment artifacts.

Renders the convergence boxplots (reconstruction error and integrated
variance against N, one box group per strategy) and, when a pooled-samples
CSV is supplied, a density reconstruction figure with marginals.  Files
are written next to the delimited output; nothing is shown interactively.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .cli import read_history
from .kde import evaluate_batch, fit_kde

_COLORS = {"var-based": "tab:blue", "space-filling": "tab:red"}


def _grouped(rows):
    out = {}
    for r in rows:
        out.setdefault(r["strategy"], {}).setdefault(r["N"], []).append(r)
    return out


def _boxplot_by_n(ax, per_n: dict, key: str, color: str, offset: float, label: str):
    ns = sorted(per_n)
    data = [[r[key] for r in per_n[n]] for n in ns]
    pos = [n + offset for n in ns]
    bp = ax.boxplot(data, positions=pos, widths=1.6, patch_artist=True,
                    manage_ticks=False, showfliers=False)
    for box in bp["boxes"]:
        box.set(facecolor=color, alpha=0.45)
    for med in bp["medians"]:
        med.set(color=color)
    ax.plot([], [], color=color, label=label)


def figure_convergence(rows, out_dir: Path, epsilon_ref: float | None = None):
    """W1 and integrated-variance boxplots against N, per strategy."""
    groups = _grouped(rows)
    paths = []
    for key, fname, ylabel, logy in (
            ("W1", "w1_vs_n.png", "Wasserstein-1 error", False),
            ("integrated_variance", "variance_vs_n.png",
             "integrated variance", True)):
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for i, (strat, per_n) in enumerate(sorted(groups.items())):
            color = _COLORS.get(strat, f"C{i}")
            _boxplot_by_n(ax, per_n, key, color, offset=(i - 0.5) * 1.8, label=strat)
        if key == "W1" and epsilon_ref is not None:
            ax.axhline(epsilon_ref, color="k", ls="--", lw=1,
                       label="reference error")
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel("number N of noisy evaluations")
        ax.set_ylabel(ylabel)
        ax.legend()
        fig.tight_layout()
        path = out_dir / fname
        fig.savefig(path, dpi=150)
        plt.close(fig)
        paths.append(path)
    return paths


def figure_density(samples: np.ndarray, out_dir: Path, grid_size: int = 120):
    """Joint KDE contour plus the two marginals of pooled 2D samples."""
    if samples.shape[1] != 2:
        raise ValueError("density figure expects 2D samples")
    model = fit_kde(samples)
    lo = samples.min(axis=0) - 0.5
    hi = samples.max(axis=0) + 0.5
    g1 = np.linspace(lo[0], hi[0], grid_size)
    g2 = np.linspace(lo[1], hi[1], grid_size)
    xx, yy = np.meshgrid(g1, g2)
    dens = evaluate_batch(model, np.column_stack([xx.ravel(), yy.ravel()]))
    dens = dens.reshape(grid_size, grid_size)

    fig, axes = plt.subplots(1, 3, figsize=(13, 4))
    axes[0].contourf(xx, yy, dens, levels=20, cmap="viridis")
    axes[0].set_xlabel("x1")
    axes[0].set_ylabel("x2")
    for k, ax in enumerate(axes[1:]):
        grid = g1 if k == 0 else g2
        m1 = fit_kde(samples[:, [k]])
        ax.plot(grid, evaluate_batch(m1, grid[:, None]), color="tab:blue")
        ax.set_xlabel(f"x{k+1}")
        ax.set_ylabel("marginal density")
    fig.tight_layout()
    path = out_dir / "density.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_report(history_paths, samples_path, out_dir) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for p in history_paths:
        rows.extend(read_history(p))
    eps = None
    for p in history_paths:
        summary = Path(p).with_name("summary.json")
        if summary.exists():
            eps = json.loads(summary.read_text()).get("epsilon_ref")
            break
    paths = figure_convergence(rows, out, epsilon_ref=eps)
    if samples_path is not None:
        samples = np.loadtxt(samples_path, delimiter=",", skiprows=1, ndmin=2)
        paths.append(figure_density(samples, out))
    return [str(p) for p in paths]
