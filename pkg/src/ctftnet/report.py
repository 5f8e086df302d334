"""Delimited metric reports and their companion figures.

Every report path emits a CSV (per-clip rows plus one aggregate row) and a
PNG rendering of the same numbers; training logs get a loss-curve PNG.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

import numpy as np  # noqa: E402

__all__ = ["write_metrics_csv", "render_metrics_png", "render_loss_curve"]

_FIELDS = ("lsd", "stoi", "si_sdr")


def _absent(value) -> bool:
    """Metrics skipped at evaluation time (e.g. STOI off) arrive as NaN."""
    return value is None or (isinstance(value, float) and np.isnan(value))


def _fmt(value) -> str:
    if _absent(value):
        return ""
    return f"{value:.6f}"


def write_metrics_csv(path, enhanced, unprocessed=None) -> Path:
    """Per-clip rows + one 'aggregate' row.  With `unprocessed` given, the
    two columns sit side by side the way Table-style summaries read."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = ["clip_id"]
    sources = [("enhanced", enhanced)]
    if unprocessed is not None:
        sources.insert(0, ("unprocessed", unprocessed))
        by_id = {c.clip_id: c for c in unprocessed.clips}
        if set(by_id) != {c.clip_id for c in enhanced.clips}:
            raise ValueError("clip ids differ between the two reports")
    for label, _ in sources:
        columns += [f"{field}_{label}" for field in _FIELDS]

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for i, clip in enumerate(enhanced.clips):
            row = [clip.clip_id]
            for label, report in sources:
                other = (clip if label == "enhanced"
                         else by_id[clip.clip_id])
                row += [_fmt(getattr(other, field)) for field in _FIELDS]
            writer.writerow(row)
        row = ["aggregate"]
        for label, report in sources:
            row += [_fmt(getattr(report, field)) for field in _FIELDS]
        writer.writerow(row)
    return path


def render_metrics_png(path, enhanced, unprocessed=None) -> Path:
    """Bar chart per clip for each metric, aggregate drawn as a line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = [c.clip_id for c in enhanced.clips]
    x = np.arange(len(names))
    fig, axes = plt.subplots(len(_FIELDS), 1, figsize=(
        max(6.0, 0.5 * len(names) + 3.0), 8.0), sharex=True)
    for ax, field in zip(axes, _FIELDS):
        enh = [getattr(c, field) for c in enhanced.clips]
        if any(_absent(v) for v in enh):
            ax.set_visible(False)
            continue
        width = 0.38 if unprocessed is not None else 0.7
        if unprocessed is not None:
            unp = [getattr(c, field) for c in unprocessed.clips]
            ax.bar(x - width / 2, unp, width, label="unprocessed",
                   color="#b0b0b0")
            ax.bar(x + width / 2, enh, width, label="enhanced",
                   color="#3465a4")
            ax.axhline(getattr(unprocessed, field), color="#707070",
                       linestyle=":", linewidth=1)
        else:
            ax.bar(x, enh, width, color="#3465a4", label="enhanced")
        ax.axhline(getattr(enhanced, field), color="#204a87",
                   linestyle="--", linewidth=1,
                   label=f"aggregate {getattr(enhanced, field):.3f}")
        ax.set_ylabel(field)
        ax.legend(loc="upper right", fontsize=8)
    axes[-1].set_xticks(x)
    axes[-1].set_xticklabels(names, rotation=60, ha="right", fontsize=7)
    fig.suptitle("per-clip metrics")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def render_loss_curve(log_path, png_path) -> Path:
    """Loss components vs step from a JSON-Lines training log."""
    entries = []
    for line in Path(log_path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            entries.append(json.loads(line))
    if not entries:
        raise ValueError(f"{log_path}: empty training log")
    steps = [e["step"] for e in entries]
    fig, (ax, ax_lr) = plt.subplots(
        2, 1, figsize=(8, 6), sharex=True,
        gridspec_kw={"height_ratios": (3, 1)})
    ax.plot(steps, [e["loss"] for e in entries], label="total",
            color="#204a87", linewidth=1.5)
    for key in sorted(entries[0]):
        if key.startswith("loss_"):
            ax.plot(steps, [e[key] for e in entries],
                    label=key[len("loss_"):], linewidth=0.9, alpha=0.8)
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax_lr.plot(steps, [e["lr"] for e in entries], color="#a40000")
    ax_lr.set_ylabel("lr")
    ax_lr.set_xlabel("step")
    fig.tight_layout()
    png_path = Path(png_path)
    png_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(png_path, dpi=110)
    plt.close(fig)
    return png_path
