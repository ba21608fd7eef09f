"""ROC-AUC, expected calibration error, and the evaluation report."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import MetricError


def _as_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise MetricError("scores and labels differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise MetricError("labels must be binary")
    return s, y.astype(np.int64)


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    _, inv, counts = np.unique(x, return_inverse=True, return_counts=True)
    return (np.cumsum(counts) - (counts - 1) / 2.0)[inv]


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied (positive, negative) pairs count one half."""
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs at least one positive and one negative label")
    ranks = average_ranks(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def bin_indices(scores: np.ndarray, n_bins: int) -> np.ndarray:
    """Equal-width bin of each score; bin b holds [b/n, (b+1)/n) and 1.0 joins the top bin."""
    edges = np.arange(n_bins + 1) / n_bins
    return np.clip(np.searchsorted(edges, scores, side="right") - 1, 0, n_bins - 1)


@dataclass
class BinRow:
    lo: float
    hi: float
    count: int
    mean_confidence: float
    accuracy: float


def _bin_sums(scores, labels, n_bins: int):
    s, y = _as_arrays(scores, labels)
    if len(s) == 0:
        raise MetricError("calibration metrics need at least one sample")
    if np.any((s < 0) | (s > 1)):
        raise MetricError("scores must lie in [0, 1]")
    idx = bin_indices(s, n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=s, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=y, minlength=n_bins)
    return counts, conf_sum, acc_sum


def reliability_table(scores, labels, n_bins: int = 10) -> list[BinRow]:
    counts, conf_sum, acc_sum = _bin_sums(scores, labels, n_bins)
    rows = []
    for b in range(n_bins):
        c = int(counts[b])
        rows.append(BinRow(b / n_bins, (b + 1) / n_bins, c,
                           float(conf_sum[b] / c) if c else 0.0,
                           float(acc_sum[b] / c) if c else 0.0))
    return rows


def ece(scores, labels, n_bins: int = 10) -> float:
    """Bin-mass weighted mean |accuracy - confidence| over equal-width bins."""
    counts, conf_sum, acc_sum = _bin_sums(scores, labels, n_bins)
    used = counts > 0
    c = counts[used]
    return float(np.sum(c / c.sum() * np.abs(acc_sum[used] / c - conf_sum[used] / c)))


@dataclass
class EvalReport:
    method: str
    split: str
    auc: float
    ece: float
    n_samples: int
    bins: list[BinRow] = field(default_factory=list)

    @classmethod
    def compute(cls, method: str, split: str, scores, labels, n_bins: int = 10) -> "EvalReport":
        rows = reliability_table(scores, labels, n_bins)
        return cls(method, split, roc_auc(scores, labels), ece(scores, labels, n_bins),
                   sum(r.count for r in rows), rows)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def reliability_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "split", "bin_lo", "bin_hi", "count", "mean_confidence", "accuracy"])
        for r in self.bins:
            w.writerow([self.method, self.split, repr(r.lo), repr(r.hi), r.count,
                        repr(r.mean_confidence), repr(r.accuracy)])
        return buf.getvalue()
