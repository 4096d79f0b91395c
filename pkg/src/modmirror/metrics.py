"""Evaluation metrics and their CSV/JSON serializations."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, fields
from typing import Optional, Sequence

import numpy as np

from .nnkit import InvalidInput


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    stage: int
    audio_top1: float
    audio_topk: float
    multimodal_top1: Optional[float] = None
    train_loss: float = math.nan


ROUND_COLUMNS = tuple(f.name for f in fields(RoundMetrics))


def topk_accuracy(logits, labels, k: int) -> float:
    """Fraction of rows whose true label ranks within the top ``k`` logits.

    Ties are broken toward the lower class index.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise InvalidInput("topk_accuracy needs a nonempty (n, classes) logit matrix")
    if y.shape != (z.shape[0],):
        raise InvalidInput("one label per row required")
    if not 1 <= k <= z.shape[1]:
        raise InvalidInput(f"k must lie in [1, {z.shape[1]}], got {k}")
    true = z[np.arange(len(y)), y][:, None]
    cls = np.arange(z.shape[1])[None, :]
    rank = np.sum((z > true) | ((z == true) & (cls < y[:, None])), axis=1)
    return float(np.mean(rank < k))


def predict(logits) -> np.ndarray:
    # argmax already returns the lowest index on ties
    return np.asarray(logits).argmax(axis=1)


@dataclass(frozen=True)
class ClassReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.f1)

    def rows(self, class_names: Sequence[str] | None = None) -> list[dict]:
        names = class_names or [f"class_{c}" for c in range(self.num_classes)]
        return [
            {
                "class": c,
                "name": names[c],
                "precision": float(self.precision[c]),
                "recall": float(self.recall[c]),
                "f1": float(self.f1[c]),
                "support": int(self.support[c]),
            }
            for c in range(self.num_classes)
        ]


def class_f1(predictions, labels, num_classes: int) -> ClassReport:
    """One-vs-rest precision/recall/F1; any 0/0 ratio is reported as 0."""
    pred = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if pred.shape != y.shape:
        raise InvalidInput("predictions and labels differ in length")
    for arr in (pred, y):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise InvalidInput("class index out of range")
    tp = np.bincount(y[pred == y], minlength=num_classes).astype(np.float64)
    n_pred = np.bincount(pred, minlength=num_classes).astype(np.float64)
    support = np.bincount(y, minlength=num_classes)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(n_pred > 0, tp / n_pred, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    return ClassReport(precision, recall, f1, support)


def f1_diff_report(report_a: ClassReport, report_b: ClassReport, top_n: int) -> list[tuple[int, float]]:
    """Per-class ``f1(a) - f1(b)``, largest absolute change first."""
    if report_a.num_classes != report_b.num_classes:
        raise InvalidInput("reports cover different class counts")
    delta = report_a.f1 - report_b.f1
    order = sorted(range(len(delta)), key=lambda c: (-abs(delta[c]), c))
    return [(c, float(delta[c])) for c in order[: max(top_n, 0)]]


def top_positive(diff: list[tuple[int, float]], n: int) -> list[int]:
    """Classes with the ``n`` largest strictly positive deltas."""
    pos = sorted((d for d in diff if d[1] > 0), key=lambda d: (-d[1], d[0]))
    return [c for c, _ in pos[:n]]


# ---------------------------------------------------------------------------
# serialization


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rounds_csv(history: Sequence[RoundMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROUND_COLUMNS)
    for m in history:
        w.writerow([_fmt(getattr(m, c)) for c in ROUND_COLUMNS])
    return buf.getvalue()


def read_rounds_csv(text: str) -> list[RoundMetrics]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        out.append(
            RoundMetrics(
                round=int(row["round"]),
                stage=int(row["stage"]),
                audio_top1=float(row["audio_top1"]),
                audio_topk=float(row["audio_topk"]),
                multimodal_top1=float(row["multimodal_top1"]) if row["multimodal_top1"] else None,
                train_loss=float(row["train_loss"]),
            )
        )
    return out


def class_report_csv(report: ClassReport, class_names=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["class", "name", "precision", "recall", "f1", "support"]
    w.writerow(cols)
    for row in report.rows(class_names):
        w.writerow([_fmt(row[c]) for c in cols])
    return buf.getvalue()


def read_class_report_csv(text: str) -> ClassReport:
    rows = list(csv.DictReader(io.StringIO(text)))
    rows.sort(key=lambda r: int(r["class"]))
    return ClassReport(
        np.array([float(r["precision"]) for r in rows]),
        np.array([float(r["recall"]) for r in rows]),
        np.array([float(r["f1"]) for r in rows]),
        np.array([int(r["support"]) for r in rows]),
    )


def class_report_json(report: ClassReport, class_names=None) -> str:
    return json.dumps(report.rows(class_names), indent=2) + "\n"


def diff_rows(report_a: ClassReport, report_b: ClassReport, top_n: int, class_names=None) -> list[dict]:
    names = class_names or [f"class_{c}" for c in range(report_a.num_classes)]
    return [
        {
            "rank": i + 1,
            "class": c,
            "name": names[c],
            "f1_a": float(report_a.f1[c]),
            "f1_b": float(report_b.f1[c]),
            "delta": d,
        }
        for i, (c, d) in enumerate(f1_diff_report(report_a, report_b, top_n))
    ]


def diff_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    cols = ["rank", "class", "name", "f1_a", "f1_b", "delta"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in cols])
    return buf.getvalue()
