"""Optional figure rendering for CLI reports. CSV/JSON stay the contract;
these PNGs are written next to them when ``--figures`` is passed."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STRATEGY_LABELS = {
    "modality_mirror": "ModalityMirror",
    "multifl": "MultiFL",
    "unifl": "UniFL",
    "harmony": "Harmony",
}

plt.rcParams.update(
    {
        "font.size": 9,
        "axes.labelsize": 9,
        "legend.fontsize": 8,
        "xtick.labelsize": 8,
        "ytick.labelsize": 8,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "savefig.dpi": 150,
    }
)


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_missing_rate_sweep(summary_rows: Sequence[dict], path, metric: str = "audio_top1") -> Path:
    """Seed-averaged final accuracy against missing rate, one line per strategy."""
    fig, ax = plt.subplots(figsize=(4.0, 3.0))
    for strategy in sorted({r["strategy"] for r in summary_rows}):
        rows = sorted((r for r in summary_rows if r["strategy"] == strategy), key=lambda r: r["missing_rate"])
        x = [r["missing_rate"] for r in rows]
        y = [r[f"mean_{metric}"] for r in rows]
        err = [r[f"var_{metric}"] ** 0.5 for r in rows]
        ax.errorbar(x, y, yerr=err, marker="o", ms=3, capsize=2, label=STRATEGY_LABELS.get(strategy, strategy))
    ax.set_xlabel("video modality missing rate")
    ax.set_ylabel(metric.replace("_", " "))
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_f1_diff(diff_rows: Sequence[dict], path, title: str = "") -> Path:
    """Horizontal bars of per-label F1 changes, largest magnitude on top."""
    rows = list(diff_rows)[::-1]
    fig, ax = plt.subplots(figsize=(4.0, 0.3 * max(len(rows), 3) + 0.8))
    colors = ["tab:green" if r["delta"] > 0 else "tab:red" for r in rows]
    ax.barh([r["name"] for r in rows], [r["delta"] for r in rows], color=colors)
    ax.axvline(0.0, color="black", lw=0.6)
    ax.set_xlabel("F1 difference")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_history(history, path) -> Path:
    """Audio (and multimodal, when present) accuracy per round across stages."""
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    x = list(range(len(history)))
    ax.plot(x, [m.audio_top1 for m in history], label="audio top-1")
    mm = [(i, m.multimodal_top1) for i, m in enumerate(history) if m.multimodal_top1 is not None]
    if mm:
        ax.plot(*zip(*mm), label="multimodal top-1", ls="--")
    stage2 = next((i for i, m in enumerate(history) if m.stage == 2), None)
    if stage2 is not None:
        ax.axvline(stage2 - 0.5, color="grey", lw=0.6, ls=":")
    ax.set_xlabel("round (stage 1 then stage 2)")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    return _save(fig, path)
