"""Figure rendering for the report paths.  All figures are written to files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from .model import EventDesign

__all__ = [
    "event_study_figure",
    "effect_distribution_figure",
    "ovb_figure",
    "mc_event_study_figure",
    "mc_risk_figure",
]

_COLORS = {
    "twfe": "tab:blue",
    "twfe_ar1": "tab:cyan",
    "raw": "tab:gray",
    "parametric": "tab:orange",
    "kernel": "tab:green",
    "mixture": "tab:red",
    "oracle": "tab:purple",
    "truth": "black",
}


def _color(name: str):
    return _COLORS.get(name, "tab:brown")


def _save(fig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=130, bbox_inches="tight")
    plt.close(fig)


def event_study_figure(frame: pd.DataFrame, path, title: str | None = None) -> None:
    """Coefficient paths with 95% bands, one line per estimator column value."""
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    for name, grp in frame.groupby("estimator", sort=False):
        grp = grp.sort_values("horizon")
        se = grp["std_error"].to_numpy()
        est = grp["coefficient"].to_numpy()
        h = grp["horizon"].to_numpy()
        ax.errorbar(
            h, est, yerr=1.96 * se, label=name, color=_color(name),
            marker="o", markersize=3, capsize=2, linewidth=1.2,
        )
    ax.axhline(0.0, color="0.6", linewidth=0.8)
    ax.axvline(-0.5, color="0.6", linewidth=0.8, linestyle="--")
    ax.set_xlabel("event time")
    ax.set_ylabel("effect")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    _save(fig, path)


def effect_distribution_figure(frame: pd.DataFrame, design: EventDesign, path) -> None:
    """Histograms of each effect coordinate, raw vs shrunk, overlaid."""
    cols = ["alpha"] + [f"delta_init_{m}" for m in range(design.p)]
    fig, axes = plt.subplots(1, len(cols), figsize=(3.4 * len(cols), 3.2), squeeze=False)
    for k, col in enumerate(cols):
        ax = axes[0, k]
        for name, grp in frame.groupby("estimator", sort=False):
            ax.hist(
                grp[col], bins=40, density=True, histtype="step",
                label=name, color=_color(name),
            )
        ax.set_xlabel(col)
        if k == 0:
            ax.set_ylabel("density")
            ax.legend(frameon=False, fontsize=7)
    _save(fig, path)


def ovb_figure(table: pd.DataFrame, path) -> None:
    """True vs naive event-study path for the static-regression demo."""
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    h = table["horizon"].to_numpy()
    ax.plot(h, table["true_delta"], marker="o", color="black", label="true effect")
    ax.plot(h, table["naive_estimate"], marker="s", color="tab:blue", label="static regression")
    ax.plot(
        h, table["true_delta"] + table["analytic_bias"],
        linestyle="--", color="tab:red", label="true + analytic bias",
    )
    ax.set_xlabel("event time")
    ax.set_ylabel("coefficient")
    ax.legend(frameon=False, fontsize=8)
    _save(fig, path)


def mc_event_study_figure(frame: pd.DataFrame, path) -> None:
    """Mean coefficient paths per design, one panel per design."""
    designs = list(dict.fromkeys(frame["design"]))
    ncol = min(4, len(designs))
    nrow = (len(designs) + ncol - 1) // ncol
    fig, axes = plt.subplots(
        nrow, ncol, figsize=(3.6 * ncol, 2.9 * nrow), squeeze=False, sharex=True
    )
    for i, design in enumerate(designs):
        ax = axes[i // ncol, i % ncol]
        sub = frame[frame["design"] == design]
        for name, grp in sub.groupby("estimator", sort=False):
            grp = grp.sort_values("horizon")
            ax.plot(
                grp["horizon"], grp["mean_coefficient"], label=name,
                color=_color(name), marker=".", linewidth=1.0,
            )
        ax.set_title(design, fontsize=8)
    for j in range(len(designs), nrow * ncol):
        axes[j // ncol, j % ncol].axis("off")
    handles, labels = axes[0, 0].get_legend_handles_labels()
    fig.legend(handles, labels, loc="lower center", ncol=len(labels), frameon=False, fontsize=8)
    fig.tight_layout(rect=(0, 0.06, 1, 1))
    _save(fig, path)


def mc_risk_figure(frame: pd.DataFrame, path) -> None:
    """Grouped bars of mean compound risk per estimator and design."""
    designs = list(dict.fromkeys(frame["design"]))
    estimators = list(dict.fromkeys(frame["estimator"]))
    width = 0.8 / max(1, len(estimators))
    x = np.arange(len(designs))
    fig, ax = plt.subplots(figsize=(max(5.0, 1.3 * len(designs)), 3.8))
    for k, est in enumerate(estimators):
        vals = [
            frame[(frame["design"] == d) & (frame["estimator"] == est)]["mean_risk"].mean()
            for d in designs
        ]
        ax.bar(x + (k - len(estimators) / 2 + 0.5) * width, vals, width,
               label=est, color=_color(est))
    ax.set_xticks(x)
    ax.set_xticklabels(designs, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("mean compound risk")
    ax.legend(frameon=False, fontsize=8)
    _save(fig, path)
