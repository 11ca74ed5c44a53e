"""Screening performance metrics, prevalence rebalancing and per-reader tables."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import calibration
from .cohort import (
    EVALUATION_LABELS, ExamRecord, OutcomeLabel, Role, check_window, ground_truth,
    operative_assessment,
)
from .stats import (
    BootstrapSpec, NotApplicable, bootstrap_distribution, cdr_noninferiority,
    percentile_interval, pvalue_from_distribution, sensitivity_noninferiority,
)
from .workflow import SimTable, as_table

METRICS = (
    "relative_sensitivity", "absolute_sensitivity", "radiologist_sensitivity",
    "combined_sensitivity", "specificity_standard", "specificity", "rule_out_rate",
    "cdr_radiologists", "cdr_combined", "fp_callback_reduction",
    "benign_biopsy_reduction", "auc", "auc_unweighted",
)
# one-sided superiority of the rule-out workflow, tested by CI inversion
SUPERIORITY = ("fp_callback_reduction", "benign_biopsy_reduction", "specificity_gain")


@dataclass(frozen=True)
class PrevalenceWeights:
    target_prevalence: dict

    def __post_init__(self):
        target = {}
        for k, v in self.target_prevalence.items():
            label = OutcomeLabel[k] if isinstance(k, str) else OutcomeLabel(k)
            if label not in EVALUATION_LABELS:
                raise ValueError(f"no target prevalence allowed for {label.name}")
            if v < 0:
                raise ValueError(f"negative target prevalence for {label.name}")
            target[label] = float(v)
        if abs(sum(target.values()) - 1) > 1e-9:
            raise ValueError("target prevalences must sum to 1")
        object.__setattr__(self, "target_prevalence", target)

    @classmethod
    def observed(cls, labels):
        labels = np.asarray(labels, dtype=int)
        values, counts = np.unique(labels, return_counts=True)
        return cls({OutcomeLabel(int(v)): c / len(labels) for v, c in zip(values, counts)})


def subclass_weights(counts: dict, weights: PrevalenceWeights) -> dict:
    """Weight per subclass, ``target(c) / observed_fraction(c)``."""
    total = sum(counts.values())
    if total <= 0:
        raise ValueError("empty cohort")
    out = {}
    for c, t in weights.target_prevalence.items():
        if t > 0 and counts.get(c, 0) == 0:
            raise ValueError(f"target prevalence {t} for {c.name} but no such exams")
    for c, k in counts.items():
        c = OutcomeLabel(c)
        if k:
            out[c] = weights.target_prevalence.get(c, 0.0) / (k / total)
    return out


def prevalence_adjust(labels, weights: PrevalenceWeights) -> np.ndarray:
    """Per-exam weights that rebalance subclass fractions to the targets."""
    labels = np.asarray(labels, dtype=int)
    values, counts = np.unique(labels, return_counts=True)
    per = subclass_weights({int(v): int(c) for v, c in zip(values, counts)}, weights)
    lookup = np.zeros(max(OutcomeLabel) + 1)
    for c, w in per.items():
        lookup[int(c)] = w
    return lookup[labels]


def _table(results, weights=None) -> SimTable:
    if isinstance(weights, PrevalenceWeights):
        t = as_table(results)
        return t.with_weight(prevalence_adjust(t.label, weights))
    return as_table(results, weights)


def _ratio(num, den, name):
    if den <= 0:
        raise NotApplicable(f"{name}: empty denominator", count=0)
    return float(num / den)


def relative_sensitivity(results) -> float:
    t = as_table(results)
    return _ratio(t.combined_tp.sum(), t.radiologist_tp.sum(), "relative sensitivity")


def absolute_sensitivity(results) -> float:
    t = as_table(results)
    return _ratio(t.device_tp.sum(), t.truth.sum(), "absolute sensitivity")


def radiologist_sensitivity(results) -> float:
    t = as_table(results)
    return _ratio(t.radiologist_tp.sum(), t.truth.sum(), "radiologist sensitivity")


def combined_sensitivity(results) -> float:
    t = as_table(results)
    return _ratio(t.combined_tp.sum(), t.truth.sum(), "combined sensitivity")


def rule_out_rate(results, weights=None) -> float:
    t = _table(results, weights)
    if len(t) == 0:
        raise ValueError("rule-out rate of an empty cohort")
    return _ratio(t.weight[t.ruled_out].sum(), t.weight.sum(), "rule-out rate")


def cdr(results, workflow: str = "standard", weights=None) -> float:
    """Detections per 1000 exams; the rule-out workflow counts combined TPs."""
    t = _table(results, weights)
    tp = {"standard": t.radiologist_tp, "ruleout": t.combined_tp}[workflow]
    return 1000 * _ratio(t.weight[tp].sum(), t.weight.sum(), "cdr")


def procedure_reduction(results, kind: str = "callback", weights=None) -> float:
    t = _table(results, weights)
    bad, prevented = {
        "callback": (t.incorrect_callback, t.prevented_callback),
        "biopsy": (t.incorrect_biopsy, t.prevented_benign_biopsy),
    }[kind]
    den = t.weight[bad].sum()
    if not bad.any() or den <= 0:
        raise NotApplicable(f"no incorrect {kind} exams", count=int(bad.sum()))
    return float(t.weight[prevented].sum() / den)


def specificity(results, workflow: str = "ruleout", weights=None) -> float:
    t = _table(results, weights)
    assessed = {"standard": t.original_assessment,
                "ruleout": t.effective_assessment}[workflow]
    neg = ~t.truth
    return _ratio(t.weight[neg & (assessed != 0)].sum(), t.weight[neg].sum(),
                  "specificity")


def auc(results, weights=None) -> float:
    t = _table(results, weights)
    if not t.truth.any() or t.truth.all():
        raise NotApplicable("AUC needs cancers and negatives", count=int(t.truth.sum()))
    w = None if weights is None else t.weight
    try:
        return calibration.auc(calibration.roc_curve(t.score, t.truth, w))
    except ValueError as exc:
        raise NotApplicable(str(exc)) from None


def _nan(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except NotApplicable:
        return math.nan


def compute_metrics(results, weights=None, weight_sensitivities: bool = False) -> dict:
    """Every metric for one stratum; not-applicable values are NaN.

    ``weights`` is a per-exam vector or a :class:`PrevalenceWeights`, which is
    re-evaluated on this set of exams. Sensitivities stay unweighted unless
    ``weight_sensitivities`` is set.
    """
    t = _table(results, weights)
    w = None if weights is None else t.weight
    sens_t = t if weight_sensitivities else t.with_weight(None)

    def wsens(tp, den):
        return _nan(_ratio, sens_t.weight[tp].sum(), sens_t.weight[den].sum(), "sens")

    out = {
        "relative_sensitivity": wsens(t.combined_tp, t.radiologist_tp),
        "absolute_sensitivity": wsens(t.device_tp, t.truth),
        "radiologist_sensitivity": wsens(t.radiologist_tp, t.truth),
        "combined_sensitivity": wsens(t.combined_tp, t.truth),
        "specificity_standard": _nan(specificity, t, "standard", w),
        "specificity": _nan(specificity, t, "ruleout", w),
        "rule_out_rate": _nan(rule_out_rate, t, w),
        "cdr_radiologists": _nan(cdr, t, "standard", w),
        "cdr_combined": _nan(cdr, t, "ruleout", w),
        "fp_callback_reduction": _nan(procedure_reduction, t, "callback", w),
        "benign_biopsy_reduction": _nan(procedure_reduction, t, "biopsy", w),
        "auc": _nan(auc, t, w),
    }
    out["auc_unweighted"] = out["auc"] if w is None else _nan(auc, t.with_weight(None))
    out["specificity_gain"] = out["specificity"] - out["specificity_standard"]
    return out


def sample_counts(results) -> dict:
    t = as_table(results)
    return {
        "n_exams": len(t), "n_cancers": int(t.truth.sum()),
        "n_negatives": int((~t.truth).sum()),
        "n_radiologist_tp": int(t.radiologist_tp.sum()),
        "n_ruled_out": int(t.ruled_out.sum()),
        "n_incorrect_callback": int(t.incorrect_callback.sum()),
        "n_incorrect_biopsy": int(t.incorrect_biopsy.sum()),
    }


@dataclass(frozen=True)
class Estimate:
    value: float
    low: float = math.nan
    high: float = math.nan
    p_value: float = math.nan
    n: int = 0

    @property
    def small_sample(self) -> bool:
        return self.n < 10


@dataclass
class StratumReport:
    key: dict
    metrics: dict  # name -> Estimate
    counts: dict
    bootstrap_redraws: int = 0


@dataclass
class MetricsReport:
    strata: list = field(default_factory=list)

    def get(self, **key):
        return [s for s in self.strata if all(s.key.get(k) == v for k, v in key.items())]


_DENOMINATOR = {
    "relative_sensitivity": "n_radiologist_tp", "absolute_sensitivity": "n_cancers",
    "radiologist_sensitivity": "n_cancers", "combined_sensitivity": "n_cancers",
    "specificity_standard": "n_negatives", "specificity": "n_negatives",
    "specificity_gain": "n_negatives", "rule_out_rate": "n_exams",
    "cdr_radiologists": "n_exams", "cdr_combined": "n_exams",
    "fp_callback_reduction": "n_incorrect_callback",
    "benign_biopsy_reduction": "n_incorrect_biopsy", "auc": "n_cancers",
    "auc_unweighted": "n_cancers",
}


def evaluate(results, key: dict | None = None, weights: PrevalenceWeights | None = None,
             spec: BootstrapSpec | None = None, sensitivity_margin: float = 0.05,
             cdr_margin_per_1000: float = 0.25) -> StratumReport:
    """Point estimates, bootstrap CIs and p-values for one stratum.

    Reductions and the specificity gain get one-sided CI-inversion p-values
    against zero; combined sensitivity and rule-out CDR get the paired
    non-inferiority test against the standard workflow.
    """
    t = as_table(results)
    names = METRICS + ("specificity_gain",)
    point = compute_metrics(t, weights)
    counts = sample_counts(t)
    dist, redraws = None, 0
    if spec is not None and len(t):
        def vector(sample):
            m = compute_metrics(sample, weights)
            return np.array([m[name] for name in names])

        res = bootstrap_distribution(vector, t, spec)
        dist, redraws = res.distribution, res.redrawn
    est = {}
    for j, name in enumerate(names):
        low = high = p = math.nan
        if dist is not None and not math.isnan(point[name]):
            col = dist[:, j]
            if np.isnan(col).sum() <= len(col) / 2:
                low, high = percentile_interval(col, spec.level)
                if name in SUPERIORITY:
                    p = pvalue_from_distribution(col, 0.0, "greater")
        est[name] = Estimate(point[name], low, high, p, counts[_DENOMINATOR[name]])
    try:
        ni = sensitivity_noninferiority(t, sensitivity_margin)
        est["combined_sensitivity"] = _with_p(est["combined_sensitivity"], ni.p_value)
    except NotApplicable:
        pass
    try:
        ni = cdr_noninferiority(t, cdr_margin_per_1000)
        est["cdr_combined"] = _with_p(est["cdr_combined"], ni.p_value)
    except (NotApplicable, ValueError):
        pass
    return StratumReport(dict(key or {}), est, counts, redraws)


def _with_p(e: Estimate, p: float) -> Estimate:
    return Estimate(e.value, e.low, e.high, p, e.n)


@dataclass(frozen=True)
class ReaderRow:
    reader_id: str
    n_pos: int
    n_neg: int
    sensitivity: float
    sensitivity_ruleout: float
    specificity: float
    specificity_ruleout: float


@dataclass
class ReaderTable:
    rows: list
    excluded: list  # (reader_id, reason)


def _reader_row(reader_id, truth, recalled, ruled_out):
    truth = np.asarray(truth, dtype=bool)
    recalled = np.asarray(recalled, dtype=bool)
    kept = recalled & ~np.asarray(ruled_out, dtype=bool)
    pos, neg = truth.sum(), (~truth).sum()

    def r(num, den):
        return float(num / den) if den else math.nan

    return ReaderRow(reader_id, int(pos), int(neg),
                     r((recalled & truth).sum(), pos), r((kept & truth).sum(), pos),
                     r((~recalled & ~truth).sum(), neg), r((~kept & ~truth).sum(), neg))


def per_reader_metrics(cohort: Sequence[ExamRecord], results, min_pos: int = 10,
                       min_neg: int = 10, sensitivity_only: bool = False) -> ReaderTable:
    """Sensitivity and specificity per reader, with and without rule-out.

    A reader contributes every opinion they gave, whatever the role. The
    ``collective`` row scores the operative (final) decision of each exam and,
    for double-read cohorts, ``collective_first`` scores the first reader.
    With ``sensitivity_only`` the inclusion rule uses ``min_pos`` alone.
    """
    t = as_table(results)
    index = {e: i for i, e in enumerate(t.exam_id)}
    per = {}
    col_truth, col_final, col_first, col_ro, any_double = [], [], [], [], False
    for exam in cohort:
        i = index.get(exam.exam_id)
        if i is None:
            continue
        truth, ro = bool(t.truth[i]), bool(t.ruled_out[i])
        for op in exam.opinions:
            per.setdefault(op.reader_id, []).append((truth, op.assessment == 0, ro))
        col_truth.append(truth)
        col_ro.append(ro)
        col_final.append(operative_assessment(exam, "final") == 0)
        if any(op.role is Role.FIRST for op in exam.opinions):
            any_double = True
        col_first.append(operative_assessment(exam, "first") == 0)
    rows, excluded = [], []
    for reader in sorted(per):
        truth, recalled, ro = zip(*per[reader])
        row = _reader_row(reader, truth, recalled, ro)
        short = []
        if row.n_pos < min_pos:
            short.append(f"{row.n_pos} cancer-positive exams < {min_pos}")
        if not sensitivity_only and row.n_neg < min_neg:
            short.append(f"{row.n_neg} cancer-negative exams < {min_neg}")
        if short:
            excluded.append((reader, "; ".join(short)))
        else:
            rows.append(row)
    if col_truth:
        rows.append(_reader_row("collective", col_truth, col_final, col_ro))
        if any_double:
            rows.append(_reader_row("collective_first", col_truth, col_first, col_ro))
    return ReaderTable(rows, excluded)


@dataclass(frozen=True)
class WindowRow:
    window: int
    n_cancers: int
    radiologist_sensitivity: float
    absolute_sensitivity: float
    relative_sensitivity: float
    combined_sensitivity: float


def multi_window_sensitivity(cohort: Sequence[ExamRecord], results, windows,
                             mode: str = "final") -> list[WindowRow]:
    """Sensitivities over prediction windows, reusing the rule-out decisions."""
    t = as_table(results)
    ruled = dict(zip(t.exam_id, t.ruled_out))
    exams = [x for x in cohort if x.exam_id in ruled]
    rows = []
    for w in windows:
        for x in exams:
            check_window(x.region, w)
        truth = np.array([ground_truth(x, w) for x in exams], dtype=bool)
        recall = np.array([operative_assessment(x, mode) == 0 for x in exams], dtype=bool)
        device = ~np.array([ruled[x.exam_id] for x in exams], dtype=bool)
        rad, dev = truth & recall, truth & device
        n = int(truth.sum())

        def r(num, den):
            return float(num / den) if den else math.nan

        rows.append(WindowRow(w, n, r(rad.sum(), n), r(dev.sum(), n),
                              r((dev & rad).sum(), rad.sum()), r((dev & rad).sum(), n)))
    return rows
