"""Rule-out workflow simulation and Figure-2-style flow normalization."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from .cohort import (
    EventKind, ExamRecord, OutcomeLabel, ValidationError, check_window,
    ground_truth, operative_assessment,
)


class MissingScoreError(ValidationError):
    pass


@dataclass(frozen=True)
class SimulatedAssessment:
    exam_id: str
    patient_id: str
    site: str
    scanner: str
    label: OutcomeLabel
    truth: bool
    score: float
    ruled_out: bool
    original_assessment: int
    effective_assessment: int
    device_tp: bool
    radiologist_tp: bool
    combined_tp: bool
    incorrect_callback: bool
    incorrect_biopsy: bool
    prevented_callback: bool
    prevented_benign_biopsy: bool
    n_diagnostic: int = 0
    n_biopsy: int = 0


def apply_ruleout(exam: ExamRecord, threshold: float, window: int = 12,
                  mode: str = "final") -> SimulatedAssessment:
    """Simulate the device reading one exam ahead of the radiologists.

    Scores below ``threshold`` are assigned BI-RADS 1; scores at or above it
    keep the clinical assessment. Callbacks and biopsies count as incorrect
    when the exam outcome is negative (N, S, D, P or H).
    """
    if exam.device_score is None:
        raise MissingScoreError(f"exam {exam.exam_id}: no device score")
    check_window(exam.region, window)
    truth = ground_truth(exam, window)
    original = operative_assessment(exam, mode)
    ruled_out = exam.device_score < threshold
    negative = not exam.exam_label.is_cancer
    n_dx = sum(e.kind is EventKind.DIAGNOSTIC_EXAM for e in exam.events)
    n_bx = sum(e.kind is EventKind.BIOPSY for e in exam.events)
    bad_callback = negative and original == 0
    bad_biopsy = negative and n_bx > 0
    device_tp = truth and not ruled_out
    radiologist_tp = truth and original == 0
    return SimulatedAssessment(
        exam_id=exam.exam_id, patient_id=exam.patient_id, site=exam.site,
        scanner=exam.scanner, label=exam.exam_label, truth=truth,
        score=exam.device_score, ruled_out=ruled_out,
        original_assessment=original,
        effective_assessment=1 if ruled_out else original,
        device_tp=device_tp, radiologist_tp=radiologist_tp,
        combined_tp=device_tp and radiologist_tp,
        incorrect_callback=bad_callback, incorrect_biopsy=bad_biopsy,
        prevented_callback=ruled_out and bad_callback,
        prevented_benign_biopsy=ruled_out and bad_biopsy,
        n_diagnostic=n_dx, n_biopsy=n_bx,
    )


def simulate_cohort(cohort: Sequence[ExamRecord], threshold: float, window: int = 12,
                    mode: str = "final") -> list[SimulatedAssessment]:
    missing = [x.exam_id for x in cohort if x.device_score is None]
    if missing:
        shown = ", ".join(missing[:20]) + (" ..." if len(missing) > 20 else "")
        raise MissingScoreError(f"{len(missing)} exams lack a device score: {shown}")
    return [apply_ruleout(x, threshold, window, mode) for x in cohort]


_BOOL = ("truth", "ruled_out", "device_tp", "radiologist_tp", "combined_tp",
         "incorrect_callback", "incorrect_biopsy", "prevented_callback",
         "prevented_benign_biopsy")


class SimTable:
    """Column-oriented view of simulated assessments, indexable by numpy arrays."""

    def __init__(self, columns: dict, weight=None):
        self.columns = columns
        n = len(columns["score"])
        self.weight = (np.ones(n) if weight is None
                       else np.asarray(weight, dtype=float))
        if self.weight.shape != (n,):
            raise ValueError("weight vector does not match the number of exams")

    @classmethod
    def from_assessments(cls, results: Iterable[SimulatedAssessment], weight=None):
        results = list(results)
        cols = {}
        for f in fields(SimulatedAssessment):
            values = [getattr(r, f.name) for r in results]
            if f.name in _BOOL:
                cols[f.name] = np.array(values, dtype=bool)
            elif f.name == "score":
                cols[f.name] = np.array(values, dtype=float)
            elif f.name in ("label", "original_assessment", "effective_assessment",
                            "n_diagnostic", "n_biopsy"):
                cols[f.name] = np.array([int(v) for v in values], dtype=int)
            else:
                cols[f.name] = np.array(values, dtype=object)
        return cls(cols, weight)

    def __len__(self):
        return len(self.weight)

    def __getattr__(self, name):
        try:
            return self.__dict__["columns"][name]
        except KeyError:
            raise AttributeError(name) from None

    def __getitem__(self, idx):
        return SimTable({k: v[idx] for k, v in self.columns.items()}, self.weight[idx])

    def with_weight(self, weight):
        return SimTable(self.columns, weight)


def as_table(results, weights=None) -> SimTable:
    if isinstance(results, SimTable):
        return results if weights is None else results.with_weight(weights)
    return SimTable.from_assessments(results, weights)


@dataclass(frozen=True)
class FlowRates:
    """Per-exam rates of the standard workflow plus the rule-out effects."""

    rule_out_rate: float
    callback_rate: float
    fp_callback_rate: float
    callback_reduction: float
    biopsy_rate: float
    benign_biopsy_rate: float
    biopsy_reduction: float
    cdr_standard: float
    cdr_ruleout: float
    lost_true_callback_rate: float = 0.0
    lost_true_biopsy_rate: float = 0.0


@dataclass(frozen=True)
class FlowDiagram:
    volume: int
    standard: dict
    ruleout: dict
    rates: FlowRates

    def recomputed(self) -> dict:
        """Percent metrics recomputed from the rounded counts."""
        s, r = self.standard, self.ruleout

        def reduction(a, b):
            return 1 - b / a if a else math.nan

        return {
            "rule_out_rate": r["ruled_out"] / self.volume,
            "callback_reduction": reduction(s["false_positive_callbacks"],
                                            r["false_positive_callbacks"]),
            "biopsy_reduction": reduction(s["benign_biopsies"], r["benign_biopsies"]),
            "cdr_standard": 1000 * s["cancers_detected"] / self.volume,
            "cdr_ruleout": 1000 * r["cancers_detected"] / self.volume,
        }

    def to_dict(self) -> dict:
        return {"volume": self.volume, "standard": self.standard,
                "ruleout": self.ruleout, "rates": asdict(self.rates),
                "recomputed": self.recomputed()}


def _partition(shares, volume):
    # largest-remainder rounding; counts always sum to volume
    exact = np.asarray(shares, dtype=float) * volume
    counts = np.floor(exact).astype(int)
    short = volume - counts.sum()
    order = np.argsort(-(exact - counts), kind="mergesort")
    counts[order[:short]] += 1
    return [int(c) for c in counts]


def flow_from_rates(rates: FlowRates, volume: int = 10_000) -> FlowDiagram:
    v = volume
    std_cb = rates.callback_rate
    ro_cb = max(0.0, std_cb - rates.fp_callback_rate * rates.callback_reduction
                - rates.lost_true_callback_rate)
    _, std_quiet, std_calls = _partition([0.0, 1 - std_cb, std_cb], v)
    ro_out, ro_quiet, ro_calls = _partition(
        [rates.rule_out_rate, max(0.0, 1 - rates.rule_out_rate - ro_cb), ro_cb], v)

    std_fp = round(v * rates.fp_callback_rate)
    std_benign = round(v * rates.benign_biopsy_rate)
    # anchoring the prevented counts on the rounded standard counts keeps the
    # recomputed reductions within half a count of the input rates
    ro_fp = std_fp - round(std_fp * rates.callback_reduction)
    ro_benign = std_benign - round(std_benign * rates.biopsy_reduction)
    ro_biopsy_rate = (rates.biopsy_rate - rates.benign_biopsy_rate * rates.biopsy_reduction
                      - rates.lost_true_biopsy_rate)
    standard = {
        "screens": v, "ruled_out": 0, "read_by_radiologist": v,
        "no_callback": std_quiet, "callbacks": std_calls,
        "false_positive_callbacks": min(std_fp, std_calls),
        "biopsies": max(round(v * rates.biopsy_rate), std_benign),
        "benign_biopsies": std_benign,
        "cancers_detected": round(v * rates.cdr_standard / 1000),
    }
    ruleout = {
        "screens": v, "ruled_out": ro_out, "read_by_radiologist": v - ro_out,
        "no_callback": ro_quiet, "callbacks": ro_calls,
        "false_positive_callbacks": min(ro_fp, ro_calls),
        "biopsies": min(max(round(v * ro_biopsy_rate), ro_benign), standard["biopsies"]),
        "benign_biopsies": ro_benign,
        "cancers_detected": round(v * rates.cdr_ruleout / 1000),
    }
    return FlowDiagram(v, standard, ruleout, rates)


def flow_rates(results, weights=None) -> FlowRates:
    t = as_table(results, weights)
    w = t.weight
    total = w.sum()
    if total <= 0:
        raise ValueError("flow needs at least one exam with positive weight")

    def frac(mask):
        return float(w[mask].sum() / total)

    def ratio(num, den):
        d = w[den].sum()
        return float(w[num].sum() / d) if d > 0 else 0.0

    recalled = t.original_assessment == 0
    biopsied = t.n_biopsy > 0
    true_recall = recalled & ~t.incorrect_callback
    return FlowRates(
        rule_out_rate=frac(t.ruled_out),
        callback_rate=frac(recalled),
        fp_callback_rate=frac(t.incorrect_callback),
        callback_reduction=ratio(t.prevented_callback, t.incorrect_callback),
        biopsy_rate=frac(biopsied),
        benign_biopsy_rate=frac(t.incorrect_biopsy),
        biopsy_reduction=ratio(t.prevented_benign_biopsy, t.incorrect_biopsy),
        cdr_standard=1000 * frac(t.radiologist_tp),
        cdr_ruleout=1000 * frac(t.combined_tp),
        lost_true_callback_rate=frac(true_recall & t.ruled_out),
        lost_true_biopsy_rate=frac(biopsied & ~t.incorrect_biopsy & t.ruled_out),
    )


def normalize_flow(results, volume: int = 10_000, weights=None) -> FlowDiagram:
    """Standard and rule-out workflows scaled to ``volume`` screening exams.

    Counts are integer-rounded, so percentages recomputed from them can differ
    from the exact rates in the first decimal.
    """
    if len(results) == 0:
        raise ValueError("cannot normalize an empty simulation")
    return flow_from_rates(flow_rates(results, weights), volume)
