"""Figures and comparison tables for training runs."""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

log = logging.getLogger(__name__)

MODE_LABELS = {"frozen": "cResNet-39", "joint": "Joint Training", "codec": "Codec"}
_PNG_META = {"Software": None}


def _read_metrics(csv_path) -> dict[str, list[float]]:
    cols: dict[str, list[float]] = {}
    with open(csv_path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            for k, v in row.items():
                cols.setdefault(k, []).append(float(v) if v != "" else float("nan"))
    return cols


def plot_losses(csv_path, out_path, title: str = "Training and validation loss") -> Path:
    cols = _read_metrics(csv_path)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(cols["epoch"], cols["train_loss"], marker="o", label="train")
    if any(v == v for v in cols["val_loss"]):
        ax.plot(cols["epoch"], cols["val_loss"], marker="s", label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return Path(out_path)


def plot_accuracy(csv_path, out_path, title: str = "Validation top-1 accuracy") -> Path:
    cols = _read_metrics(csv_path)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(cols["epoch"], cols["val_top1"], marker="o", label="top-1")
    ax.plot(cols["epoch"], cols["val_top5"], marker="s", linestyle="--", label="top-5")
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return Path(out_path)


def collect_runs(run_dirs) -> list[dict]:
    runs = []
    for d in run_dirs:
        p = Path(d) / "summary.json"
        if not p.exists():
            log.warning("skipping %s: no summary.json", d)
            continue
        runs.append(json.loads(p.read_text()))
    return runs


def comparison_table(runs: list[dict]) -> tuple[list[str], list[list[str]]]:
    """Rows = quality, column groups = mode, cells = best val top-1 / top-5.

    Multiple runs with the same (quality, mode) are averaged.
    """
    modes = [m for m in ("frozen", "joint", "codec") if any(r["mode"] == m for r in runs)]
    qualities = sorted({r["quality_index"] for r in runs})
    header = ["quality"]
    for m in modes:
        header += [f"{MODE_LABELS[m]} val top-1", f"{MODE_LABELS[m]} val top-5"]
    rows = []
    for q in qualities:
        row = [str(q)]
        for m in modes:
            hits = [r for r in runs if r["quality_index"] == q and r["mode"] == m]
            for key in ("best_top1", "best_top5"):
                vals = [r[key] for r in hits if r.get(key) is not None]
                row.append(f"{sum(vals) / len(vals):.2f}" if vals else "")
        rows.append(row)
    return header, rows


def write_report(run_dirs, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = collect_runs(run_dirs)
    if not runs:
        raise FileNotFoundError("no run directory contained a summary.json")
    header, rows = comparison_table(runs)
    csv_path = out_dir / "report.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    md = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    md += ["| " + " | ".join(r) + " |" for r in rows]
    md_path = out_dir / "report.md"
    md_path.write_text("\n".join(md) + "\n", encoding="utf-8")
    fig_path = out_dir / "report.png"
    _plot_comparison(header, rows, fig_path)
    return {"csv": csv_path, "markdown": md_path, "figure": fig_path}


def _plot_comparison(header, rows, out_path):
    groups = [h[: -len(" val top-1")] for h in header[1::2]]
    qualities = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    width = 0.8 / max(1, len(groups))
    for gi, g in enumerate(groups):
        vals = [float(r[1 + 2 * gi]) if r[1 + 2 * gi] else 0.0 for r in rows]
        ax.bar([i + gi * width for i in range(len(rows))], vals, width, label=g)
    ax.set_xticks([i + width * (len(groups) - 1) / 2 for i in range(len(rows))])
    ax.set_xticklabels([f"q{q}" for q in qualities])
    ax.set_ylabel("val top-1 (%)")
    ax.set_ylim(0, 100)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
