"""Result curves over report sets and intensity histograms."""

import logging
from pathlib import Path
from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from fod_forge.errors import ParameterError  # noqa: E402
from fod_forge.evalmetrics import MetricsReport  # noqa: E402
from fod_forge.volseg import Histogram  # noqa: E402

logger = logging.getLogger(__name__)

METRICS = {
    "mean_accuracy": "Average class accuracy",
    "detection_rate": "Object based detection rate (%)",
    "false_positive_rate": "Object based false positive detection rate (%)",
    "mean_jaccard": "Jaccard index",
}


def curve_table(reports: Sequence[MetricsReport], x_key: str = "objects") -> pd.DataFrame:
    """Mean and sample standard deviation of every metric per x value"""
    if not reports:
        raise ParameterError("plot_results needs at least one report")
    rows = []
    for index, report in enumerate(reports):
        x = report.tags.get(x_key, float(index))
        for metric in METRICS:
            rows.append({"x": float(x), "metric": metric, "value": float(getattr(report, metric))})
    frame = pd.DataFrame(rows)
    table = (
        frame.groupby(["metric", "x"], sort=True)["value"]
        .agg(mean="mean", std=lambda v: v.std(ddof=1), n="count")
        .reset_index()
    )
    table["std"] = table["std"].fillna(0.0)
    return table


def plot_results(
    reports: Sequence[MetricsReport],
    out_dir: Path,
    x_key: str = "objects",
    x_label: Optional[str] = None,
) -> pd.DataFrame:
    """curves.csv and curves.png: one panel per metric, mean line with a standard-deviation band"""
    table = curve_table(reports, x_key)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_dir / "curves.csv", index=False)

    fig, axes = plt.subplots(1, len(METRICS), figsize=(4 * len(METRICS), 3.5))
    for ax, (metric, label) in zip(np.atleast_1d(axes), METRICS.items()):
        curve = table[table["metric"] == metric].sort_values("x")
        x = curve["x"].to_numpy()
        mean = curve["mean"].to_numpy()
        std = curve["std"].to_numpy()
        ax.plot(x, mean, marker="o")
        ax.fill_between(x, mean - std, mean + std, alpha=0.3)
        ax.set_xlabel(x_label or x_key)
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_dir / "curves.png", dpi=120)
    plt.close(fig)
    logger.info("Wrote curves for %d reports to %s", len(reports), out_dir)
    return table


def plot_histograms(
    hist: Histogram,
    out_path: Path,
    thresholds: Optional[Dict[str, float]] = None,
    title: str = "",
    x_label: str = "attenuation (1/cm)",
) -> Path:
    """Histogram figure, split into foreign-object and other series when available.

    The bin counts are written to a CSV next to the PNG.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    centers = 0.5 * (hist.bin_edges[:-1] + hist.bin_edges[1:])
    widths = np.diff(hist.bin_edges)

    columns = {"bin_left": hist.bin_edges[:-1], "bin_right": hist.bin_edges[1:], "count": hist.counts}
    fig, ax = plt.subplots(figsize=(6, 4))
    if hist.foreign_counts is not None:
        columns["foreign"] = hist.foreign_counts
        columns["other"] = hist.other_counts
        ax.bar(centers, hist.other_counts, width=widths, alpha=0.6, label="other")
        ax.bar(centers, hist.foreign_counts, width=widths, alpha=0.6, label="foreign object")
    else:
        ax.bar(centers, hist.counts, width=widths, alpha=0.8, label="all")
    for name, value in (thresholds or {}).items():
        if value is not None:
            ax.axvline(value, linestyle="--", linewidth=1, label=f"{name} = {value:.4f}")
    ax.set_yscale("log")
    ax.set_xlabel(x_label)
    ax.set_ylabel("count")
    if title:
        ax.set_title(title)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    pd.DataFrame(columns).to_csv(out_path.with_suffix(".csv"), index=False)
    return out_path
