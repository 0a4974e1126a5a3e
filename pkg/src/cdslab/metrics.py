"""Accuracy, calibration and run comparison."""

from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def top1(logits, labels) -> float:
    """Share of rows whose argmax equals the label; ties go to the lowest class index."""
    logits = np.asarray(getattr(logits, "data", logits))
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("top1 needs a non-empty [N x C] array")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def softmax(logits) -> np.ndarray:
    x = np.asarray(getattr(logits, "data", logits), dtype=np.float64)
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class CalibrationReport:
    n_bins: int
    bin_lo: np.ndarray
    bin_hi: np.ndarray
    counts: np.ndarray
    confidence: np.ndarray
    accuracy: np.ndarray
    ece: float
    overall_accuracy: float
    samples: int = field(default=0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count", "conf", "acc"])
        for lo, hi, n, c, a in zip(self.bin_lo, self.bin_hi, self.counts, self.confidence, self.accuracy):
            w.writerow([f"{lo:.6f}", f"{hi:.6f}", int(n), f"{c:.6f}", f"{a:.6f}"])
        w.writerow(["# ece", f"{self.ece:.6f}", "accuracy", f"{self.overall_accuracy:.6f}", self.samples])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CalibrationReport":
        rows = list(csv.reader(io.StringIO(text)))
        body = [r for r in rows[1:] if r and not r[0].startswith("#")]
        tail = [r for r in rows if r and r[0] == "# ece"][0]
        arr = np.array([[float(v) for v in r] for r in body]).reshape(-1, 5)
        return cls(len(body), arr[:, 0], arr[:, 1], arr[:, 2].astype(np.int64), arr[:, 3], arr[:, 4],
                   float(tail[1]), float(tail[3]), int(tail[4]))


def ece(probs, labels, n_bins: int = 15) -> CalibrationReport:
    """Expected calibration error over equal-width confidence bins on (0, 1].

    Bin ``b`` holds confidences in ``(b/n, (b+1)/n]``; confidence is the
    maximum predicted probability.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("ece needs a non-empty [N x C] probability array")
    if np.any(np.abs(probs.sum(axis=1) - 1) > 1e-5) or np.any(probs < 0):
        raise ValueError("probability rows must be non-negative and sum to 1")
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    idx = np.clip(np.ceil(conf * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=n_bins)
    safe = np.maximum(counts, 1)
    mean_conf = np.where(counts > 0, conf_sum / safe, 0.0)
    mean_acc = np.where(counts > 0, acc_sum / safe, 0.0)
    n = probs.shape[0]
    err = float(np.sum(counts / n * np.abs(mean_conf - mean_acc)))
    edges = np.arange(n_bins + 1) / n_bins
    return CalibrationReport(n_bins, edges[:-1], edges[1:], counts, mean_conf, mean_acc, err,
                             float(correct.mean()), n)


def mean_pairwise_cosine(z) -> float:
    """Mean cosine similarity over all ordered pairs of distinct rows."""
    z = np.asarray(getattr(z, "data", z), dtype=np.float64)
    z = z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    s = z @ z.T
    n = z.shape[0]
    return float((s.sum() - np.trace(s)) / (n * (n - 1)))


SUMMARY_COLUMNS = ("top1", "train_ce", "ece")


def curve_summary(runs: Sequence[dict]) -> list[dict]:
    """Per-regime aggregate of final test top-1, final train CE and ECE.

    Each run is a mapping with ``regime``, ``dataset`` and the three summary
    quantities. Rows carry mean, median and population std per quantity.
    """
    if not runs:
        raise ValueError("no runs to summarize")
    datasets = {r["dataset"] for r in runs}
    if len(datasets) > 1:
        raise ValueError(f"runs were evaluated on different datasets: {sorted(datasets)}")
    by_regime: dict[str, list[dict]] = {}
    for r in runs:
        by_regime.setdefault(r["regime"], []).append(r)
    table = []
    for regime, group in by_regime.items():
        row = {"regime": regime, "runs": len(group)}
        for col in SUMMARY_COLUMNS:
            vals = [float(g[col]) for g in group]
            row[f"{col}_mean"] = statistics.fmean(vals)
            row[f"{col}_median"] = statistics.median(vals)
            row[f"{col}_std"] = statistics.pstdev(vals)
        table.append(row)
    return table


def add_deltas(table: list[dict], reference: str) -> list[dict]:
    """Append ``<col>_median_delta`` = row median minus the reference regime's median."""
    ref = next((r for r in table if r["regime"] == reference), None)
    if ref is None:
        return table
    for row in table:
        for col in SUMMARY_COLUMNS:
            row[f"{col}_median_delta"] = row[f"{col}_median"] - ref[f"{col}_median"]
    return table
