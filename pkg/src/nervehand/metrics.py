"""Per-finger classification metrics: confusion counts, TPR/TNR/accuracy, AUC."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

FINGERS = ("thumb", "index", "middle", "ring", "little")


class UndefinedMetric(ValueError):
    """Raised when a metric has no defined value for the given labels."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _as_2d(a) -> np.ndarray:
    a = np.asarray(a).astype(bool)
    return a[:, None] if a.ndim == 1 else a


def confusion(pred_states, labels) -> list[ConfusionCounts]:
    """Counts per column (finger); 1-D inputs are treated as a single finger."""
    p, y = _as_2d(pred_states), _as_2d(labels)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {y.shape}")
    tp = np.sum(p & y, axis=0)
    tn = np.sum(~p & ~y, axis=0)
    fp = np.sum(p & ~y, axis=0)
    fn = np.sum(~p & y, axis=0)
    return [ConfusionCounts(int(a), int(b), int(c), int(d)) for a, b, c, d in zip(tp, tn, fp, fn)]


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def tpr(c: ConfusionCounts) -> Optional[float]:
    return _ratio(c.tp, c.tp + c.fn)


def tnr(c: ConfusionCounts) -> Optional[float]:
    return _ratio(c.tn, c.tn + c.fp)


def accuracy(c: ConfusionCounts) -> Optional[float]:
    return _ratio(c.tp + c.tn, c.total)


def rates(c: ConfusionCounts) -> tuple:
    """(tpr, tnr, accuracy); ``None`` marks an undefined ratio (zero denominator)."""
    return tpr(c), tnr(c), accuracy(c)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs at least one positive and one negative label")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class FingerMetrics:
    finger: str
    counts: ConfusionCounts
    tpr: Optional[float]
    tnr: Optional[float]
    accuracy: Optional[float]
    auc: Optional[float]


def evaluate(probs, labels, threshold: float = 0.5) -> list[FingerMetrics]:
    """Per-finger metrics from probabilities (n, 5) and binary labels (n, 5)."""
    probs = np.asarray(probs, dtype=float)
    labels = _as_2d(labels)
    states = probs > threshold
    out = []
    for f, c in enumerate(confusion(states, labels)):
        try:
            a = auc(probs[:, f], labels[:, f])
        except UndefinedMetric:
            a = None
        name = FINGERS[f] if probs.shape[1] == len(FINGERS) else f"f{f + 1}"
        out.append(FingerMetrics(name, c, *rates(c), a))
    return out


REPORT_COLUMNS = ("finger", "TPR", "TNR", "Accuracy", "AUC")


def _fmt(v: Optional[float]) -> str:
    return "undefined" if v is None else f"{v:.4f}"


def report(metrics: Sequence[FingerMetrics], fmt: str = "csv") -> str:
    rows = [(m.finger, _fmt(m.tpr), _fmt(m.tnr), _fmt(m.accuracy), _fmt(m.auc)) for m in metrics]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        w.writerows(rows)
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}")
    widths = [max(len(str(r[i])) for r in [REPORT_COLUMNS, *rows]) for i in range(len(REPORT_COLUMNS))]
    line = lambda r: "  ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip()
    return "\n".join([line(REPORT_COLUMNS), line(["-" * w for w in widths]), *map(line, rows)]) + "\n"


def parse_report(text: str) -> list[dict]:
    """Reads a CSV report back; undefined cells become ``None``."""
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        out.append({k: (row[k] if k == "finger" else None if row[k] == "undefined" else float(row[k]))
                    for k in REPORT_COLUMNS})
    return out
