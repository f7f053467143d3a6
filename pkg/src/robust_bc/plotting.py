"""Figures rendered next to report files (PNG, headless backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _finish(fig, ax, path, xlabel, ylabel, title):
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_sweep(report, path, x: str = "epsilon"):
    """Mean normalized return with standard-error bars against ``x``."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for algo in dict.fromkeys(r["algorithm"] for r in report.rows):
        pts = sorted((e[x], e["normalized_return_mean"], e["normalized_return_se"])
                     for e in report.aggregates() if e["algorithm"] == algo)
        xs, ms, ses = (np.array(v) for v in zip(*pts))
        ax.errorbar(xs, ms, yerr=ses, marker="o", capsize=3, label=algo)
    ax.axhline(1.0, color="k", ls="--", lw=1, label="expert")
    if x == "N":
        ax.set_xscale("log")
    return _finish(fig, ax, path, x, "return / expert return", f"{report.env}: return vs {x}")


def plot_curve(report, path):
    from .experiments import curve_points

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for algo in dict.fromkeys(r["algorithm"] for r in report.rows):
        epochs, means, ses = curve_points(report, algo)
        ax.plot(epochs, means, label=algo)
        ax.fill_between(epochs, means - ses, means + ses, alpha=0.25)
    ax.axhline(1.0, color="k", ls="--", lw=1, label="expert")
    return _finish(fig, ax, path, "epoch", "return / expert return", f"{report.env}: return vs epoch")


def plot_tv(report, path):
    ns, m = report.means()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.loglog(ns, m, "o", label="mean tv_sq")
    ax.loglog(ns, np.exp(report.intercept) * ns**report.slope, "-",
              label=f"fit, slope {report.slope:.2f}")
    return _finish(fig, ax, path, "N", "E tv_sq", f"{report.env}: TV rate")


def plot_report(report, out_dir) -> list:
    out = Path(out_dir)
    stem = out / f"{report.env}_{report.kind}.png"
    if report.kind == "curve":
        return [plot_curve(report, stem)]
    if report.kind == "samples":
        return [plot_sweep(report, stem, "N")]
    if report.kind == "epsilon":
        return [plot_sweep(report, stem, "epsilon")]
    return []
