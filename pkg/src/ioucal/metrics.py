"""Calibration metrics: ECE, ACE, SCE, NLL, Brier, and reliability tables.

All functions take ``(y_true, y_prob)`` like scikit-learn's metrics and
return fractions (not percent).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Literal

import numpy as np


@dataclass(frozen=True)
class BinningSpec:
    scheme: Literal["equal_width", "adaptive_equal_count"] = "equal_width"
    bin_count: int = 10
    per_class: bool = False

    def __post_init__(self):
        if self.bin_count < 1:
            raise ValueError("bin_count must be >= 1")
        if self.scheme not in ("equal_width", "adaptive_equal_count"):
            raise ValueError(f"unknown binning scheme {self.scheme!r}")


def _check(y_true, y_prob):
    y = np.asarray(y_true, dtype=float).reshape(-1)
    p = np.asarray(y_prob, dtype=float).reshape(-1)
    if len(y) != len(p):
        raise ValueError("y_true and y_prob differ in length")
    if len(y) == 0:
        raise ValueError("calibration metrics need at least one sample")
    return y, p


def equal_width_bin(y_prob, n_bins: int) -> np.ndarray:
    """Bin index per sample; bin k covers (k/B, (k+1)/B] and 0 goes to bin 0."""
    idx = np.ceil(np.asarray(y_prob, dtype=float) * n_bins).astype(np.int64) - 1
    return np.clip(idx, 0, n_bins - 1)


def adaptive_bins(y_prob, n_bins: int) -> list[np.ndarray]:
    """Index groups of consecutive confidence-sorted samples with near-equal counts."""
    order = np.argsort(np.asarray(y_prob, dtype=float), kind="stable")
    return [chunk for chunk in np.array_split(order, n_bins) if len(chunk)]


def _binned_gap(y, p, groups):
    n = len(y)
    total = 0.0
    for g in groups:
        total += len(g) / n * abs(y[g].mean() - p[g].mean())
    return float(total)


def _equal_width_gap(y, p, n_bins):
    idx = equal_width_bin(p, n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    sum_y = np.bincount(idx, weights=y, minlength=n_bins)
    sum_p = np.bincount(idx, weights=p, minlength=n_bins)
    nz = counts > 0
    gaps = np.abs(sum_y[nz] / counts[nz] - sum_p[nz] / counts[nz])
    return float(np.sum(counts[nz] / len(y) * gaps))


def ece(y_true, y_prob, *, n_bins=10) -> float:
    """Expected calibration error with equal-width bins over [0, 1]."""
    y, p = _check(y_true, y_prob)
    return _equal_width_gap(y, p, n_bins)


def ace(y_true, y_prob, *, n_bins=10) -> float:
    """Adaptive calibration error: bins hold floor(N/B) or ceil(N/B) samples."""
    y, p = _check(y_true, y_prob)
    return _binned_gap(y, p, adaptive_bins(p, n_bins))


def sce(y_true, y_prob, categories, *, n_bins=10) -> float:
    """Unweighted mean over categories of the per-category ECE."""
    y, p = _check(y_true, y_prob)
    categories = np.asarray(categories).reshape(-1)
    if len(categories) != len(y):
        raise ValueError("categories must align with samples")
    per_class = [_equal_width_gap(y[categories == c], p[categories == c], n_bins)
                 for c in np.unique(categories)]
    return float(np.mean(per_class))


def nll(y_true, y_prob, *, eps=1e-12) -> float:
    y, p = _check(y_true, y_prob)
    p = np.clip(p, eps, 1 - eps)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def brier(y_true, y_prob) -> float:
    y, p = _check(y_true, y_prob)
    return float(np.mean((y - p) ** 2))


def binned_error(y_true, y_prob, spec: BinningSpec, categories=None) -> float:
    """Dispatch to ECE/ACE (and their per-class average) according to ``spec``."""
    y, p = _check(y_true, y_prob)
    if spec.per_class:
        if categories is None:
            raise ValueError("per-class binning needs categories")
        categories = np.asarray(categories)
        scores = [binned_error(y[categories == c], p[categories == c],
                               BinningSpec(spec.scheme, spec.bin_count))
                  for c in np.unique(categories)]
        return float(np.mean(scores))
    if spec.scheme == "equal_width":
        return _equal_width_gap(y, p, spec.bin_count)
    return _binned_gap(y, p, adaptive_bins(p, spec.bin_count))


def calibration_summary(y_true, y_prob, categories, n_bins=10) -> dict[str, float]:
    """ECE, ACE, SCE, NLL and Brier of one sample set."""
    return {
        "ECE": ece(y_true, y_prob, n_bins=n_bins),
        "ACE": ace(y_true, y_prob, n_bins=n_bins),
        "SCE": sce(y_true, y_prob, categories, n_bins=n_bins),
        "NLL": nll(y_true, y_prob),
        "Brier": brier(y_true, y_prob),
    }


@dataclass(frozen=True)
class ReliabilityBin:
    bin_low: float
    bin_high: float
    mean_conf: float | None
    precision: float | None
    count: int


@dataclass(frozen=True)
class ReliabilityTable:
    bins: tuple[ReliabilityBin, ...]
    error: float
    spec: BinningSpec

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "mean_conf", "precision", "count"])
        for b in self.bins:
            w.writerow([repr(b.bin_low), repr(b.bin_high),
                        "" if b.mean_conf is None else repr(b.mean_conf),
                        "" if b.precision is None else repr(b.precision), b.count])
        return buf.getvalue()


def reliability_table(y_true, y_prob, spec: BinningSpec = BinningSpec()) -> ReliabilityTable:
    """Per-bin mean confidence, empirical precision and count."""
    y, p = _check(y_true, y_prob)
    rows = []
    if spec.scheme == "equal_width":
        idx = equal_width_bin(p, spec.bin_count)
        for k in range(spec.bin_count):
            m = idx == k
            c = int(m.sum())
            rows.append(ReliabilityBin(k / spec.bin_count, (k + 1) / spec.bin_count,
                                       float(p[m].mean()) if c else None,
                                       float(y[m].mean()) if c else None, c))
    else:
        for g in adaptive_bins(p, spec.bin_count):
            rows.append(ReliabilityBin(float(p[g].min()), float(p[g].max()), float(p[g].mean()),
                                       float(y[g].mean()), len(g)))
    error = binned_error(y, p, BinningSpec(spec.scheme, spec.bin_count))
    return ReliabilityTable(tuple(rows), error, spec)
