"""Report rendering: delimited tables and matplotlib figures.

Every report writer emits machine-readable output (JSON and/or CSV) next to
a PNG figure derived from the same data. Matplotlib is imported lazily with
the Agg backend so library users who never render pay nothing, and figure
metadata is pinned so outputs are byte-reproducible under a fixed seed.
"""

from __future__ import annotations

import csv
from pathlib import Path

from .io import save_json

_PNG_METADATA = {"Software": "siamfv"}
_DPI = 110


def _plt():
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path):
    fig.savefig(path, dpi=_DPI, metadata=_PNG_METADATA)
    _plt().close(fig)


def write_csv(rows, fieldnames, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def save_loss_curve(metrics, path) -> None:
    """Render the per-epoch training record (loss, and mAP when present)."""
    plt = _plt()
    epochs = [m["epoch"] for m in metrics if m["mean_loss"] is not None]
    losses = [m["mean_loss"] for m in metrics if m["mean_loss"] is not None]
    map_points = [(m["epoch"], m["map_eval"]) for m in metrics if "map_eval" in m]
    ncols = 2 if map_points else 1
    fig, axes = plt.subplots(1, ncols, figsize=(4.2 * ncols, 3.2))
    axes = [axes] if ncols == 1 else list(axes)
    axes[0].plot(epochs, losses, marker="o", color="tab:blue")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("mean contrastive loss")
    axes[0].grid(True, alpha=0.3)
    if map_points:
        xs, ys = zip(*map_points)
        axes[1].plot(xs, ys, marker="s", color="tab:orange")
        axes[1].set_xlabel("epoch")
        axes[1].set_ylabel("held-out mAP")
        axes[1].grid(True, alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def write_eval_report(report: dict, json_path) -> dict:
    """Write an evaluation report as JSON, with CSV and a figure alongside.

    Returns the sibling paths written.
    """
    json_path = Path(json_path)
    csv_path = json_path.with_suffix(".csv")
    png_path = json_path.with_suffix(".png")
    save_json(report, json_path)
    write_csv(report["per_query"], ["id", "ap", "num_relevant"], csv_path)

    plt = _plt()
    per_query = sorted(report["per_query"], key=lambda r: r["ap"], reverse=True)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.09 * len(per_query) + 2.0), 3.2))
    ax.bar(range(len(per_query)), [r["ap"] for r in per_query],
           color="tab:blue", width=0.9)
    ax.axhline(report["map"], color="tab:red", linestyle="--",
               label=f"mAP = {report['map']:.4f}")
    ax.set_xlabel("query (sorted by AP)")
    ax.set_ylabel("average precision")
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="upper right")
    fig.tight_layout()
    _save(fig, png_path)
    return {"json": str(json_path), "csv": str(csv_path), "png": str(png_path)}


def write_comparison_report(report: dict, out_dir) -> dict:
    """Write the aggregator-comparison table (JSON, CSV, grouped-bar figure).

    Expects report["rows"] of {"method", "dim", "map"} covering each method
    at each reduced dimension.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "comparison.json"
    csv_path = out_dir / "comparison.csv"
    png_path = out_dir / "comparison.png"
    save_json(report, json_path)
    write_csv(report["rows"], ["method", "dim", "map"], csv_path)

    plt = _plt()
    methods = sorted({row["method"] for row in report["rows"]})
    dims = sorted({row["dim"] for row in report["rows"]})
    values = {
        (row["method"], row["dim"]): row["map"] for row in report["rows"]
    }
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    width = 0.8 / len(methods)
    colors = ["tab:blue", "tab:orange", "tab:green", "tab:red"]
    for mi, method in enumerate(methods):
        xs = [di + mi * width for di in range(len(dims))]
        ys = [values.get((method, dim)) or 0.0 for dim in dims]
        ax.bar(xs, ys, width=width, label=method, color=colors[mi % len(colors)])
    ax.set_xticks([di + 0.4 - width / 2 for di in range(len(dims))])
    ax.set_xticklabels([str(d) for d in dims])
    ax.set_xlabel("reduced dimension")
    ax.set_ylabel("mAP")
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="lower right")
    fig.tight_layout()
    _save(fig, png_path)
    return {"json": str(json_path), "csv": str(csv_path), "png": str(png_path)}
