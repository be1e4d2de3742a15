"""Delimited report files and the figures rendered alongside them.

Every evaluation or ablation table is written twice - JSON-lines for
machines, CSV with a fixed documented header for spreadsheets - and each
report path also renders PNG figures (sample scatters, metric-vs-NFE
curves, loss curves, ablation bars) next to the delimited output.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import EVAL_CSV_COLUMNS, EvalReport


def write_jsonl(path, rows) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c, "") for c in columns})


def write_eval_reports(out_dir, reports: list, stem: str = "eval") -> dict:
    """CSV + JSONL for a list of EvalReports; returns the file paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [r.row() for r in reports]
    full = [
        {**r.row(), "mode_coverage": list(map(float, r.mode_coverage))} for r in reports
    ]
    csv_path = out_dir / f"{stem}.csv"
    jsonl_path = out_dir / f"{stem}.jsonl"
    write_csv(csv_path, EVAL_CSV_COLUMNS, rows)
    write_jsonl(jsonl_path, full)
    return {"csv": csv_path, "jsonl": jsonl_path}


def _save(fig, path):
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)


def plot_loss_curves(histories: dict, path) -> None:
    """histories: stage name -> list of {step, loss} records."""
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for name, hist in histories.items():
        steps = [h["step"] for h in hist]
        losses = [h["loss"] for h in hist]
        ax.plot(steps, losses, label=name, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_metric_vs_nfe(reports: list, metric: str, path) -> None:
    by_model: dict[str, list[EvalReport]] = {}
    for r in reports:
        by_model.setdefault(r.model_id, []).append(r)
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for model_id, rs in sorted(by_model.items()):
        rs = sorted(rs, key=lambda r: r.nfe)
        ax.plot([r.nfe for r in rs], [getattr(r, metric) for r in rs], "o-", label=model_id, lw=1.2)
    ax.set_xlabel("NFE")
    ax.set_ylabel(metric)
    ax.set_xscale("log")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_samples_2d(sample_sets: dict, path, ref=None) -> None:
    """Scatter 2-D sample sets side by side; optional reference greyed out."""
    names = list(sample_sets)
    fig, axes = plt.subplots(1, len(names), figsize=(3.2 * len(names), 3.2), squeeze=False)
    for ax, name in zip(axes[0], names):
        pts = np.asarray(sample_sets[name]).reshape(-1, 2)
        if ref is not None:
            rp = np.asarray(ref).reshape(-1, 2)
            ax.scatter(rp[:, 0], rp[:, 1], s=2, c="0.8", label="reference")
        ax.scatter(pts[:, 0], pts[:, 1], s=2, alpha=0.6)
        ax.set_title(name, fontsize=9)
        ax.set_aspect("equal")
    fig.tight_layout()
    _save(fig, path)


def plot_ablation_bars(rows: list, value_key: str, path, group_key: str = "variant") -> None:
    """Grouped bars of one metric for NFE 1 vs the multi-step setting."""
    variants = sorted({r[group_key] for r in rows}, key=str)
    nfes = sorted({r["nfe"] for r in rows})
    width = 0.8 / max(len(nfes), 1)
    fig, ax = plt.subplots(figsize=(6, 3.4))
    xs = np.arange(len(variants))
    for j, nfe in enumerate(nfes):
        vals = []
        for v in variants:
            match = [r[value_key] for r in rows if r[group_key] == v and r["nfe"] == nfe]
            vals.append(match[0] if match else np.nan)
        ax.bar(xs + j * width, vals, width=width, label=f"NFE {nfe}")
    ax.set_xticks(xs + width * (len(nfes) - 1) / 2)
    ax.set_xticklabels([str(v) for v in variants], fontsize=8)
    ax.set_ylabel(value_key)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    _save(fig, path)
