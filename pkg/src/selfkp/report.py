"""Report rendering: JSON + CSV exports of metric reports and matplotlib
figures (written to files; no interactive backend required).

CSV rows follow the column order HE@1, HE@3, HE@5, Rep., MLE, NN mAP,
M.S. so that several models can be compared side by side.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evaluation import MetricReport

CSV_COLUMNS = ["model", "he@1", "he@3", "he@5", "repeatability", "mle",
               "nn_map", "matching_score"]
CSV_HEADER = ["model", "HE@1", "HE@3", "HE@5", "Rep.", "MLE", "NN mAP", "M.S."]


def report_to_dict(report: MetricReport, name="model"):
    return {"model": name, "aggregate": report.means, "counts": report.counts,
            "pairs": report.per_pair}


def write_json(report: MetricReport, path, name="model"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(report_to_dict(report, name), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _row(entry):
    agg = entry["aggregate"]
    row = [entry["model"]]
    for key in CSV_COLUMNS[1:]:
        v = agg.get(key)
        row.append("" if v is None else f"{v:.6f}")
    return row


def write_csv(entries, path):
    """entries: report dicts (from report_to_dict or a saved JSON file),
    one CSV row per model."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for entry in entries:
            w.writerow(_row(entry))
    return path


def load_report(path):
    with open(path) as fh:
        return json.load(fh)


def render_pair_figure(report: MetricReport, path, name="model"):
    """Per-pair metric distributions as one histogram panel per metric."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metrics = ["repeatability", "mle", "nn_map", "matching_score"]
    fig, axes = plt.subplots(2, 2, figsize=(8, 6))
    for ax, key in zip(axes.ravel(), metrics):
        vals = [r[key] for r in report.per_pair if r[key] is not None]
        if vals:
            ax.hist(vals, bins=min(10, max(3, len(vals))), color="#4878a8")
        ax.set_title(key)
        ax.set_ylabel("pairs")
    fig.suptitle(name)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def render_training_curves(metrics_jsonl, path):
    """Loss and validation-metric curves from a training log."""
    records = []
    with open(metrics_jsonl) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    its = [r["iteration"] for r in records]
    for key in ("loss", "total", "l_d1", "l_d2", "l_desc", "l_s1", "l_s2"):
        vals = [r.get(key) for r in records]
        if any(v is not None for v in vals):
            ax1.plot(its, [v if v is not None else np.nan for v in vals], label=key)
    ax1.set_xlabel("iteration")
    ax1.set_title("losses")
    ax1.legend(fontsize=7)
    for key in ("repeatability", "matching_score", "nn_map"):
        vals = [r.get(key) for r in records]
        if any(v is not None for v in vals):
            ax2.plot(its, [v if v is not None else np.nan for v in vals], label=key)
    ax2.set_xlabel("iteration")
    ax2.set_ylim(0, 1)
    ax2.set_title("validation metrics")
    ax2.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def render_comparison(entries, path):
    """Grouped bar chart of the aggregate metrics of several models."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = CSV_COLUMNS[1:]
    x = np.arange(len(keys))
    width = 0.8 / max(len(entries), 1)
    fig, ax = plt.subplots(figsize=(9, 4))
    for i, entry in enumerate(entries):
        vals = [entry["aggregate"].get(k) or 0.0 for k in keys]
        ax.bar(x + i * width, vals, width, label=entry["model"])
    ax.set_xticks(x + width * (len(entries) - 1) / 2)
    ax.set_xticklabels(CSV_HEADER[1:])
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
