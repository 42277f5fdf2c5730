#!/usr/bin/env python3
"""
Summary plots for evaluation runs: mean BEV densities side by side and a bar
chart per metric across regions.
"""

from pathlib import Path
from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from metrics import MetricReport, bev_histogram  # noqa: E402
from rangeview import PointCloud  # noqa: E402


def mean_bev(clouds: Sequence[PointCloud], bins: int, extent: float) -> np.ndarray:
    grids = [bev_histogram(c, bins, extent).grid for c in clouds]
    return np.mean(grids, axis=0) if grids else np.zeros((bins, bins))


def plot_summary(reference: Sequence[PointCloud], generated: Sequence[PointCloud],
                 reports: Dict[str, MetricReport], path: Path, bins: int = 100, extent: float = 40.0) -> Path:
    fig, axes = plt.subplots(1, 3, figsize=(15, 4.5))
    for ax, clouds, title in ((axes[0], reference, "reference"), (axes[1], generated, "generated")):
        density = mean_bev(clouds, bins, extent)
        # histogram2d puts x on the first axis
        ax.imshow(np.log1p(density.T * bins * bins), origin="lower", cmap="magma",
                  extent=(-extent, extent, -extent, extent))
        ax.set_title(f"BEV density ({title}, n={len(clouds)})")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")

    ax = axes[2]
    names = sorted({name for r in reports.values() for name in r.values})
    width = 0.8 / max(len(reports), 1)
    for i, (region, report) in enumerate(reports.items()):
        values = [report.values.get(name, np.nan) for name in names]
        ax.bar(np.arange(len(names)) + i * width, values, width, label=region)
    ax.set_xticks(np.arange(len(names)) + width * (len(reports) - 1) / 2)
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_yscale("symlog")
    ax.legend()
    ax.set_title("Metrics by region")

    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
