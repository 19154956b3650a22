"""Run reports: metrics as CSV plus PNG figures of training curves and attention maps."""

from __future__ import annotations

import csv
import dataclasses
import re
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .export import read_pgm  # noqa: E402
from .train import EpochMetrics, LOSS_KEYS, read_metrics  # noqa: E402

CSV_FIELDS = [f.name for f in dataclasses.fields(EpochMetrics) if f.name != "seconds"]
_MAP_NAME = re.compile(r"block(\d+)_(student|teacher)\.pgm$")


def write_csv(rows: list[EpochMetrics], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in rows:
            d = r.row()
            w.writerow(["" if d[k] is None else d[k] for k in CSV_FIELDS])
    return path


def plot_losses(rows: list[EpochMetrics], path) -> Path:
    epochs = [r.epoch for r in rows]
    fig, (ax, ax_lr) = plt.subplots(1, 2, figsize=(9, 3.4))
    for key in LOSS_KEYS:
        vals = [getattr(r, key) for r in rows]
        if any(v > 0 for v in vals):
            ax.plot(epochs, vals, label=key, lw=1.4)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.legend(fontsize=8, frameon=False)
    ax_lr.step(epochs, [r.lr for r in rows], where="mid", color="k", lw=1.2)
    ax_lr.set_yscale("log")
    ax_lr.set_xlabel("epoch")
    ax_lr.set_ylabel("learning rate")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_accuracy(rows: list[EpochMetrics], path) -> Path:
    epochs = [r.epoch for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.4))
    series = [("student_train_acc", "C0", "--"), ("student_test_acc", "C0", "-"),
              ("teacher_train_acc", "C3", "--"), ("teacher_test_acc", "C3", "-")]
    for key, color, style in series:
        vals = [getattr(r, key) for r in rows]
        if all(v is not None for v in vals):
            ax.plot(epochs, vals, color=color, ls=style, lw=1.4, label=key.replace("_acc", ""))
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("epoch")
    ax.set_ylabel("top-1 accuracy")
    ax.legend(fontsize=8, frameon=False, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_attention(map_dir, path) -> Path:
    """Grid of exported maps: one column per block, student row above teacher row."""
    found = {}
    for p in sorted(Path(map_dir).glob("block*_*.pgm")):
        m = _MAP_NAME.search(p.name)
        if m:
            found[(m.group(2), int(m.group(1)))] = read_pgm(p)
    if not found:
        raise FileNotFoundError(f"no blockN_student/teacher .pgm files in {map_dir}")
    blocks = sorted({b for _, b in found})
    roles = [r for r in ("student", "teacher") if any(k[0] == r for k in found)]
    fig, axes = plt.subplots(len(roles), len(blocks), figsize=(2.2 * len(blocks), 2.3 * len(roles)),
                             squeeze=False)
    for i, role in enumerate(roles):
        for j, b in enumerate(blocks):
            ax = axes[i][j]
            if (role, b) in found:
                ax.imshow(found[(role, b)], cmap="jet", vmin=0, vmax=255, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(f"block {b}", fontsize=9)
            if j == 0:
                ax.set_ylabel(role, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def build_report(run_dir, out_dir=None, maps_dir=None) -> list[Path]:
    """Render ``metrics.csv``, ``losses.png``, ``accuracy.png`` (and ``attention.png``)."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = read_metrics(run_dir / "metrics.jsonl")
    if not rows:
        raise ValueError(f"{run_dir / 'metrics.jsonl'} has no rows")
    written = [write_csv(rows, out_dir / "metrics.csv"),
               plot_losses(rows, out_dir / "losses.png"),
               plot_accuracy(rows, out_dir / "accuracy.png")]
    if maps_dir is not None:
        written.append(plot_attention(maps_dir, out_dir / "attention.png"))
    return written
