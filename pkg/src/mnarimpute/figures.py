"""Boxplot rendering for campaign reports."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

METRIC_LABELS = {
    "prediction_error": "prediction error (missing cells)",
    "total_error": "total error (full matrix)",
}


def render_error_boxplots(rows, out_dir, stem: str = "boxplot") -> list[str]:
    """One boxplot per metric from long-format rows.

    `rows` is an iterable of mappings with keys method, prediction_error and
    total_error.  Returns the list of files written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = list(rows)
    methods = []
    for r in rows:
        if r["method"] not in methods:
            methods.append(r["method"])
    written = []
    for metric, label in METRIC_LABELS.items():
        data = []
        for m in methods:
            vals = [
                float(r[metric])
                for r in rows
                if r["method"] == m and not math.isnan(float(r[metric]))
            ]
            data.append(vals)
        fig, ax = plt.subplots(figsize=(1.6 + 1.1 * len(methods), 4.2))
        ax.boxplot(data, tick_labels=methods, showmeans=False)
        ax.set_ylabel(label)
        ax.grid(True, axis="y", alpha=0.3)
        for tick in ax.get_xticklabels():
            tick.set_rotation(30)
            tick.set_ha("right")
        fig.tight_layout()
        path = out_dir / f"{stem}_{metric}.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(str(path))
    return written
