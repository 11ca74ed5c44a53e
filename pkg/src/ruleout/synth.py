"""Seeded synthetic screening cohorts with consistent follow-up histories.

Outcome subclasses are drawn from configured prevalences and every exam gets
an event stream from which :func:`ruleout.cohort.assign_breast_label`
recovers the drawn subclass. The operative reading is therefore implied by
the subclass (N -> 1, S -> 2, D/P/H/M -> 0, I -> 1 or 2). Under double
reading the first and second readers are independent Bernoulli draws at
their configured sensitivity/specificity and an arbitrator restores the
implied decision whenever either reader disagrees with it.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np

from .cohort import (
    INTERVAL_MONTHS, EventKind, EventResult, ExamRecord, FollowUpEvent,
    OutcomeLabel, ReaderOpinion, Role, add_months,
)

L = OutcomeLabel

# WUSTL retrospective-study composition (11,592 exams)
TABLE1_WUSTL_TEST = {L.N: 9005, L.S: 1088, L.D: 1217, L.P: 153, L.H: 28,
                     L.M: 95, L.I: 6}

# Beta(a, b) device scores per subclass; AUC about 0.95 at Table 1 prevalences
DEFAULT_SCORE_MODEL = {
    L.N: (2.0, 6.0), L.S: (2.0, 5.5), L.D: (2.2, 5.0),
    L.P: (2.4, 5.0), L.H: (2.4, 5.0),
    L.M: (4.0, 2.0), L.I: (3.5, 2.2),
}

_BIOPSY_CLASSES = (L.P, L.H, L.M, L.I)
_RECALL_CLASSES = (L.D, L.P, L.H, L.M)


def table1_prevalences(counts=TABLE1_WUSTL_TEST):
    total = sum(counts.values())
    return {k: v / total for k, v in counts.items()}


@dataclass(frozen=True)
class ReaderSpec:
    reader_id: str
    sensitivity: float = 0.9
    specificity: float = 0.9


@dataclass
class SynthConfig:
    n_patients: int = 1000
    exams_per_patient: dict = field(default_factory=lambda: {1: 1.0})
    subclass_prevalences: dict = field(default_factory=table1_prevalences)
    reader_pool: list = field(default_factory=lambda: [
        ReaderSpec("R01", 0.92, 0.89), ReaderSpec("R02", 0.88, 0.90),
        ReaderSpec("R03", 0.95, 0.86)])
    double_reading: bool = False
    arbitrators: list = field(default_factory=lambda: ["ARB01"])
    score_model: dict = field(default_factory=lambda: dict(DEFAULT_SCORE_MODEL))
    interval_lag_months: tuple = (2, 10)
    upstaged_fraction: float = 0.05
    region: str = "US"
    site: str = "synthetic"
    scanner_mix: dict = field(default_factory=lambda: {"HS": 0.5, "SD": 0.5})
    start_date: date = date(2016, 1, 4)
    enrolment_days: int = 730
    seed: int = 0

    def __post_init__(self):
        self.subclass_prevalences = {L[k] if isinstance(k, str) else L(k): float(v)
                                     for k, v in self.subclass_prevalences.items()}
        self.score_model = {L[k] if isinstance(k, str) else L(k): tuple(v)
                            for k, v in self.score_model.items()}
        self.exams_per_patient = {int(k): float(v)
                                  for k, v in self.exams_per_patient.items()}
        self.reader_pool = [r if isinstance(r, ReaderSpec) else ReaderSpec(**r)
                            for r in self.reader_pool]
        self.interval_lag_months = tuple(self.interval_lag_months)
        if isinstance(self.start_date, str):
            self.start_date = date.fromisoformat(self.start_date)
        self.validate()

    def validate(self):
        prev = self.subclass_prevalences
        if L.U in prev and prev[L.U] > 0:
            raise ValueError("U cannot be generated")
        if any(p < 0 for p in prev.values()) or abs(sum(prev.values()) - 1) > 1e-9:
            raise ValueError("subclass_prevalences must be non-negative and sum to 1")
        epp = self.exams_per_patient
        if (any(k < 1 for k in epp) or any(p < 0 for p in epp.values())
                or abs(sum(epp.values()) - 1) > 1e-9):
            raise ValueError("exams_per_patient must map counts >= 1 to "
                             "probabilities summing to 1")
        if not self.reader_pool:
            raise ValueError("reader_pool is empty")
        for r in self.reader_pool:
            if not (0 <= r.sensitivity <= 1 and 0 <= r.specificity <= 1):
                raise ValueError(f"reader {r.reader_id}: sensitivity/specificity "
                                 f"outside [0, 1]")
        if self.double_reading and len(self.reader_pool) < 2:
            raise ValueError("double reading needs at least two readers")
        missing = [c.name for c, p in prev.items() if p > 0 and c not in self.score_model]
        if missing:
            raise ValueError(f"score_model lacks classes {missing}")
        lo, hi = self.interval_lag_months
        if not 0 <= lo <= hi < INTERVAL_MONTHS[self.region]:
            raise ValueError(f"interval_lag_months {self.interval_lag_months} must "
                             f"lie inside the {INTERVAL_MONTHS[self.region]}-month "
                             f"screening interval")
        if self.double_reading and prev.get(L.M, 0) + prev.get(L.I, 0) == 0:
            warnings.warn("double reading requested with zero cancer prevalence; "
                          "arbitration will only resolve false positives",
                          stacklevel=3)


def _days(rng, lo, hi):
    return timedelta(days=int(rng.integers(lo, hi + 1)))


def _screens(rng, d, interval):
    n = math.ceil(24 / interval)
    return [FollowUpEvent(EventKind.SCREENING_EXAM,
                          add_months(d, k * interval) + _days(rng, 0, 30))
            for k in range(1, n + 1)]


def _events(rng, cls, d, cfg):
    interval = INTERVAL_MONTHS[cfg.region]
    if cls in (L.N, L.S):
        return _screens(rng, d, interval)
    if cls is L.D:
        dx = FollowUpEvent(EventKind.DIAGNOSTIC_EXAM, d + _days(rng, 7, 45),
                           EventResult.NEGATIVE)
        return [dx] + _screens(rng, d, interval)
    if cls is L.I:
        lo, hi = cfg.interval_lag_months
        when = add_months(d, int(rng.integers(lo, hi + 1))) + _days(rng, 0, 27)
        return [FollowUpEvent(EventKind.DIAGNOSTIC_EXAM, when),
                FollowUpEvent(EventKind.BIOPSY, when),
                FollowUpEvent(EventKind.PATHOLOGY_RESULT, when + _days(rng, 0, 10),
                              EventResult.MALIGNANT)]
    result = {L.P: EventResult.BENIGN, L.H: EventResult.HIGH_RISK,
              L.M: EventResult.MALIGNANT}[cls]
    if cls is L.M and rng.random() < cfg.upstaged_fraction:
        result = EventResult.HIGH_RISK_UPSTAGED
    dx = d + _days(rng, 7, 30)
    bx = dx + _days(rng, 0, 30)
    out = [FollowUpEvent(EventKind.DIAGNOSTIC_EXAM, dx),
           FollowUpEvent(EventKind.BIOPSY, bx),
           FollowUpEvent(EventKind.PATHOLOGY_RESULT, bx + _days(rng, 0, 10), result)]
    if cls is not L.M:
        out += _screens(rng, d, interval)
    return out


def _implied_assessment(rng, cls):
    if cls in _RECALL_CLASSES:
        return 0
    if cls is L.S:
        return 2
    if cls is L.I:
        return 1 if rng.random() < 0.8 else 2
    return 1


def _opinions(rng, cls, d, final, cfg):
    pool = cfg.reader_pool
    if not cfg.double_reading:
        reader = pool[int(rng.integers(len(pool)))]
        return [ReaderOpinion(reader.reader_id, Role.SINGLE, final, d)]
    i, j = rng.choice(len(pool), size=2, replace=False)
    quiet = final if final != 0 else 1
    out = []
    for role, reader in ((Role.FIRST, pool[i]), (Role.SECOND, pool[j])):
        p_recall = reader.sensitivity if cls.is_cancer else 1 - reader.specificity
        assessment = 0 if rng.random() < p_recall else quiet
        out.append(ReaderOpinion(reader.reader_id, role, assessment, d))
    if any(op.assessment != final for op in out):
        arb = cfg.arbitrators[int(rng.integers(len(cfg.arbitrators)))]
        out.append(ReaderOpinion(arb, Role.ARBITRATION, final, d + timedelta(days=7)))
    return out


def _patient(cfg, index, classes, probs, counts, count_probs, scanners, scanner_p):
    rng = np.random.default_rng([cfg.seed, index])
    pid = f"P{index:07d}"
    n_exams = int(counts[rng.choice(len(counts), p=count_probs)])
    drawn = [classes[k] for k in rng.choice(len(classes), size=n_exams, p=probs)]
    if any(c in _BIOPSY_CLASSES for c in drawn):
        # biopsy anywhere in the history rules out N/S/D for the other exams
        bio = [k for k, c in enumerate(classes) if c in _BIOPSY_CLASSES]
        bp = probs[bio] / probs[bio].sum()
        drawn = [c if c in _BIOPSY_CLASSES else classes[bio[rng.choice(len(bio), p=bp)]]
                 for c in drawn]
    spacing = max(INTERVAL_MONTHS[cfg.region], 24)
    first = cfg.start_date + _days(rng, 0, cfg.enrolment_days)
    age0 = int(rng.integers(40, 76))
    exams, prior, prior_final = [], None, None
    for k, cls in enumerate(drawn):
        d = add_months(first, k * spacing)
        final = _implied_assessment(rng, cls)
        a, b = cfg.score_model[cls]
        exam = ExamRecord(
            exam_id=f"{pid}-E{k + 1}", patient_id=pid, site=cfg.site,
            region=cfg.region,
            scanner=str(scanners[rng.choice(len(scanners), p=scanner_p)]),
            exam_date=d, age=age0 + k * spacing // 12,
            left_label=cls, right_label=cls,
            opinions=_opinions(rng, cls, d, final, cfg),
            events=_events(rng, cls, d, cfg),
            device_score=float(rng.beta(a, b)),
            prior_exam_id=prior.exam_id if prior else None,
            prior_birads=prior_final if prior else None,
        )
        exams.append(exam)
        prior, prior_final = exam, final
    return exams


def generate(config: SynthConfig) -> list[ExamRecord]:
    """Generate a cohort; identical configs give identical cohorts.

    Each patient draws from its own stream seeded by ``(seed, patient_index)``,
    so patients can be generated in any order or in parallel.
    """
    config.validate()
    classes = [c for c, p in sorted(config.subclass_prevalences.items()) if p > 0]
    probs = np.array([config.subclass_prevalences[c] for c in classes])
    probs = probs / probs.sum()
    counts = sorted(config.exams_per_patient)
    count_probs = np.array([config.exams_per_patient[c] for c in counts])
    scanners = sorted(config.scanner_mix)
    scanner_p = np.array([config.scanner_mix[s] for s in scanners], dtype=float)
    scanner_p = scanner_p / scanner_p.sum()
    cohort = []
    for i in range(config.n_patients):
        cohort.extend(_patient(config, i, classes, probs, counts, count_probs,
                               scanners, scanner_p))
    cohort.sort(key=lambda x: (x.patient_id, x.exam_date))
    return cohort
