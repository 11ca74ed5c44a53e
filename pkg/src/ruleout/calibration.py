"""ROC curves, AUC and rule-out threshold selection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class RocCurve:
    """Empirical ROC; ``thresholds[0]`` is +inf and yields the (0, 0) point."""

    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    weights_applied: bool = False

    @property
    def points(self):
        return list(zip(self.thresholds.tolist(), self.tpr.tolist(), self.fpr.tolist()))


@dataclass(frozen=True)
class ThresholdEntry:
    threshold: float
    sensitivity: float
    rule_out_rate: float


@dataclass
class ThresholdTable:
    entries: dict  # target sensitivity -> ThresholdEntry


@dataclass(frozen=True)
class SweepRow:
    target: float
    threshold: float
    val_sensitivity: float
    val_rule_out_rate: float
    test_rule_out_rate: float
    test_absolute_sensitivity: float
    test_relative_sensitivity: float


def _arrays(scores, truths, weights=None):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(truths, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and truths must be 1-D and of equal length")
    if weights is None:
        w = np.ones_like(s)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != s.shape:
            raise ValueError("weights must match scores in length")
        if (w < 0).any():
            raise ValueError("weights must be non-negative")
    return s, y, w


def roc_curve(scores, truths, weights=None) -> RocCurve:
    """ROC with tied scores grouped at one threshold; exam is positive iff score >= t."""
    s, y, w = _arrays(scores, truths, weights)
    pos, neg = (w * y).sum(), (w * ~y).sum()
    if not y.any() or y.all() or pos <= 0 or neg <= 0:
        raise ValueError("ROC needs at least one positive and one negative exam")
    order = np.argsort(-s, kind="mergesort")
    s, y, w = s[order], y[order], w[order]
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(w * y)[last]
    fp = np.cumsum(w * ~y)[last]
    return RocCurve(
        thresholds=np.r_[np.inf, s[last]],
        tpr=np.r_[0.0, tp / tp[-1]],
        fpr=np.r_[0.0, fp / fp[-1]],
        weights_applied=weights is not None,
    )


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve over the false-positive rate."""
    dx = np.diff(curve.fpr)
    return float(np.sum(dx * (curve.tpr[1:] + curve.tpr[:-1]) / 2))


def _exact(value) -> Fraction:
    # floats are read as the decimal they print as (0.99 -> 99/100)
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


def select_threshold(scores, truths, target_sensitivity, weights=None) -> float:
    """Largest threshold whose sensitivity on the cancers still meets the target.

    Without weights this is the k-th smallest cancer score with
    ``k = floor((1 - target) * n_cancers) + 1``, evaluated in exact rational
    arithmetic. Exams scoring exactly at the threshold are not ruled out.
    """
    s, y, w = _arrays(scores, truths, weights)
    if not y.any():
        raise ValueError("threshold selection needs at least one cancer")
    target = _exact(target_sensitivity)
    if not 0 < target <= 1:
        raise ValueError(f"target sensitivity must lie in (0, 1], got {target_sensitivity}")
    cancer = s[y]
    if weights is None:
        n = len(cancer)
        k = math.floor((1 - target) * n) + 1
        return float(np.sort(cancer)[k - 1])
    cw = w[y]
    total = cw.sum()
    if total <= 0:
        raise ValueError("cancer weights sum to zero")
    order = np.argsort(-cancer, kind="mergesort")
    cancer, cw = cancer[order], cw[order]
    last = np.r_[np.nonzero(np.diff(cancer))[0], len(cancer) - 1]
    covered = np.cumsum(cw)[last] / total
    # relative slack absorbs cumulative-sum rounding
    hit = np.nonzero(covered >= float(target) * (1 - 1e-12))[0]
    return float(cancer[last[hit[0]]])


def sensitivity_at(scores, truths, threshold, weights=None) -> float:
    s, y, w = _arrays(scores, truths, weights)
    return float((w * y * (s >= threshold)).sum() / (w * y).sum())


def rule_out_fraction(scores, threshold, weights=None) -> float:
    s = np.asarray(scores, dtype=float)
    w = np.ones_like(s) if weights is None else np.asarray(weights, dtype=float)
    return float((w * (s < threshold)).sum() / w.sum())


def calibrate(scores, truths, targets: Sequence[float], weights=None) -> ThresholdTable:
    entries = {}
    for t in targets:
        thr = select_threshold(scores, truths, t, weights)
        entries[t] = ThresholdEntry(thr, sensitivity_at(scores, truths, thr, weights),
                                    rule_out_fraction(scores, thr, weights))
    return ThresholdTable(entries)


def sweep_operating_points(val_scores, val_truths, test_scores, test_truths,
                           test_radiologist_positive, targets=None,
                           val_weights=None, test_weights=None) -> list[SweepRow]:
    """Threshold and held-out performance for each target sensitivity."""
    if targets is None:
        targets = [round(0.90 + 0.01 * i, 2) for i in range(11)]
    table = calibrate(val_scores, val_truths, targets, val_weights)
    ts, ty, _ = _arrays(test_scores, test_truths)
    rad = np.asarray(test_radiologist_positive, dtype=bool) & ty
    rows = []
    for t in sorted(table.entries):
        e = table.entries[t]
        dev = ty & (ts >= e.threshold)
        rows.append(SweepRow(
            target=t, threshold=e.threshold, val_sensitivity=e.sensitivity,
            val_rule_out_rate=e.rule_out_rate,
            test_rule_out_rate=rule_out_fraction(ts, e.threshold, test_weights),
            test_absolute_sensitivity=float(dev.sum() / ty.sum()) if ty.any()
            else math.nan,
            test_relative_sensitivity=float((dev & rad).sum() / rad.sum()) if rad.any()
            else math.nan,
        ))
    return rows
