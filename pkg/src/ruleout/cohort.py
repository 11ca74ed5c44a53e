"""Exam/patient data model, outcome labeling and patient-level splits."""

from __future__ import annotations

import calendar
import enum
import logging
from dataclasses import dataclass, replace
from datetime import date
from functools import reduce
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)


class ValidationError(ValueError):
    """Inconsistent input data. ``issues`` holds one message per problem."""

    def __init__(self, issues):
        if isinstance(issues, str):
            issues = [issues]
        self.issues = list(issues)
        super().__init__("; ".join(str(i) for i in self.issues))


class OutcomeLabel(enum.IntEnum):
    # integer values encode the propagation priority
    N = 0
    S = 1
    D = 2
    U = 3
    P = 4
    H = 5
    I = 6  # noqa: E741
    M = 7

    @property
    def is_cancer(self) -> bool:
        return self in (OutcomeLabel.M, OutcomeLabel.I)


NEGATIVE_LABELS = (OutcomeLabel.N, OutcomeLabel.S, OutcomeLabel.D,
                   OutcomeLabel.P, OutcomeLabel.H)
EVALUATION_LABELS = NEGATIVE_LABELS + (OutcomeLabel.I, OutcomeLabel.M)


class Role(str, enum.Enum):
    SINGLE = "single"
    FIRST = "first"
    SECOND = "second"
    ARBITRATION = "arbitration"


class EventKind(str, enum.Enum):
    DIAGNOSTIC_EXAM = "diagnostic_exam"
    BIOPSY = "biopsy"
    PATHOLOGY_RESULT = "pathology_result"
    SCREENING_EXAM = "screening_exam"


class EventResult(str, enum.Enum):
    NEGATIVE = "negative"
    BENIGN = "benign"
    HIGH_RISK = "high_risk"
    HIGH_RISK_UPSTAGED = "high_risk_upstaged"
    MALIGNANT = "malignant"
    NA = "n/a"


MALIGNANT_RESULTS = (EventResult.MALIGNANT, EventResult.HIGH_RISK_UPSTAGED)

SITES = ("WUSTL-like", "ONSITE-like", "OPTIMAM-like", "synthetic")
REGIONS = ("US", "UK")
SCANNERS = ("HS", "SD")
BIRADS = (0, 1, 2)

INTERVAL_MONTHS = {"US": 12, "UK": 36}
WINDOWS = {"US": (6, 12, 24), "UK": (6, 12, 24, 36)}
FOLLOW_UP_MONTHS = 24


@dataclass(frozen=True)
class ReaderOpinion:
    reader_id: str
    role: Role
    assessment: int
    opinion_date: date

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role))
        if self.assessment not in BIRADS:
            raise ValidationError(f"BI-RADS {self.assessment!r} not in {BIRADS}")


@dataclass(frozen=True)
class FollowUpEvent:
    kind: EventKind
    date: date
    result: EventResult = EventResult.NA

    def __post_init__(self):
        object.__setattr__(self, "kind", EventKind(self.kind))
        object.__setattr__(self, "result", EventResult(self.result))

    @property
    def is_malignant(self) -> bool:
        return (self.kind is EventKind.PATHOLOGY_RESULT
                and self.result in MALIGNANT_RESULTS)


@dataclass(frozen=True)
class ExamRecord:
    exam_id: str
    patient_id: str
    site: str
    region: str
    scanner: str
    exam_date: date
    age: int
    left_label: OutcomeLabel
    right_label: OutcomeLabel
    opinions: tuple = ()
    events: tuple = ()
    device_score: float | None = None
    prior_exam_id: str | None = None
    prior_birads: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "left_label", OutcomeLabel(self.left_label))
        object.__setattr__(self, "right_label", OutcomeLabel(self.right_label))
        object.__setattr__(self, "opinions", tuple(self.opinions))
        object.__setattr__(
            self, "events", tuple(sorted(self.events, key=lambda e: e.date)))
        problems = []
        if self.site not in SITES:
            problems.append(f"site {self.site!r} not in {SITES}")
        if self.region not in REGIONS:
            problems.append(f"region {self.region!r} not in {REGIONS}")
        if self.scanner not in SCANNERS:
            problems.append(f"scanner {self.scanner!r} not in {SCANNERS}")
        if self.device_score is not None and not 0.0 <= self.device_score <= 1.0:
            problems.append(f"device_score {self.device_score!r} outside [0, 1]")
        if self.prior_birads is not None and self.prior_exam_id is None:
            problems.append("prior_birads given without prior_exam_id")
        if self.prior_birads is not None and self.prior_birads not in BIRADS:
            problems.append(f"prior_birads {self.prior_birads!r} not in {BIRADS}")
        seen = set()
        for op in self.opinions:
            key = (op.reader_id, op.role)
            if key in seen:
                problems.append(f"duplicate opinion for reader {op.reader_id!r} "
                                f"as {op.role.value}")
            seen.add(key)
        for ev in self.events:
            if ev.date < self.exam_date:
                problems.append(f"{ev.kind.value} event dated {ev.date} before "
                                f"exam date {self.exam_date}")
        if problems:
            raise ValidationError([f"exam {self.exam_id}: {p}" for p in problems])

    @property
    def exam_label(self) -> OutcomeLabel:
        return propagate_exam_label(self.left_label, self.right_label)

    @property
    def interval_months(self) -> int:
        return INTERVAL_MONTHS[self.region]


def add_months(d: date, months: int) -> date:
    """Same day-of-month ``months`` later, clamped to the end of the month."""
    y, m = divmod(d.month - 1 + months, 12)
    year, month = d.year + y, m + 1
    return date(year, month, min(d.day, calendar.monthrange(year, month)[1]))


def check_window(region: str, window: int) -> int:
    if window not in WINDOWS[region]:
        raise ValueError(f"window {window} not valid for {region} "
                         f"(allowed: {WINDOWS[region]})")
    return window


def propagate_exam_label(*labels: OutcomeLabel) -> OutcomeLabel:
    """Highest-priority label among the breasts (N < S < D < U < P < H < I < M)."""
    if not labels:
        raise ValueError("at least one label required")
    return reduce(max, (OutcomeLabel(lab) for lab in labels))


def _validate_events(events, exam_id, index_date=None):
    problems = []
    for ev in events:
        if ev.kind is EventKind.PATHOLOGY_RESULT and ev.result is EventResult.NA:
            problems.append(f"pathology_result on {ev.date} has no result")
        elif (ev.kind in (EventKind.SCREENING_EXAM, EventKind.DIAGNOSTIC_EXAM)
              and ev.result not in (EventResult.NA, EventResult.NEGATIVE)):
            problems.append(f"{ev.kind.value} on {ev.date} carries pathology "
                            f"result {ev.result.value!r}")
        elif ev.kind is EventKind.BIOPSY and ev.result is not EventResult.NA:
            problems.append(f"biopsy on {ev.date} carries result "
                            f"{ev.result.value!r}; report it as a pathology_result")
        if index_date is not None and ev.date < index_date:
            problems.append(f"{ev.kind.value} event dated {ev.date} before "
                            f"exam date {index_date}")
    if problems:
        raise ValidationError([f"exam {exam_id}: {p}" for p in problems])


def assign_breast_label(index_assessment: int, index_date: date,
                        events: Sequence[FollowUpEvent], region: str, *,
                        patient_biopsy: bool = False,
                        exam_id: str = "?") -> OutcomeLabel:
    """Outcome label for one breast from its screening assessment and follow-up.

    ``events`` are the follow-up events of the index exam; ``patient_biopsy``
    flags biopsy events elsewhere in the patient's history, which disqualify
    the non-pathology labels N, S and D. Histories that are consistent but
    lack follow-up return ``U``.
    """
    if index_assessment not in BIRADS:
        raise ValidationError(f"exam {exam_id}: index BI-RADS "
                              f"{index_assessment!r} not in {BIRADS}")
    events = sorted(events, key=lambda e: e.date)
    _validate_events(events, exam_id, index_date)

    pathology = [e for e in events if e.kind is EventKind.PATHOLOGY_RESULT]
    malignant = [e for e in pathology if e.result in MALIGNANT_RESULTS]
    if malignant:
        first = malignant[0].date
        if index_assessment in (1, 2):
            next_screen = next((e.date for e in events
                                if e.kind is EventKind.SCREENING_EXAM
                                and e.date > index_date), None)
            in_interval = first <= add_months(index_date, INTERVAL_MONTHS[region])
            if in_interval and (next_screen is None or first < next_screen):
                return OutcomeLabel.I
        return OutcomeLabel.M
    results = {e.result for e in pathology}
    if EventResult.HIGH_RISK in results:
        return OutcomeLabel.H
    if results & {EventResult.BENIGN, EventResult.NEGATIVE}:
        return OutcomeLabel.P

    if index_assessment == 0:
        negative_dx = any(e.kind is EventKind.DIAGNOSTIC_EXAM
                          and e.result is EventResult.NEGATIVE for e in events)
        candidate = OutcomeLabel.D if negative_dx else OutcomeLabel.U
    else:
        candidate = OutcomeLabel.S if index_assessment == 2 else OutcomeLabel.N
    if candidate is OutcomeLabel.U:
        return candidate
    horizon = add_months(index_date, FOLLOW_UP_MONTHS)
    followed = any(e.kind in (EventKind.SCREENING_EXAM, EventKind.DIAGNOSTIC_EXAM)
                   and e.date >= horizon for e in events)
    biopsied = patient_biopsy or any(e.kind is EventKind.BIOPSY for e in events)
    if not followed or biopsied:
        return OutcomeLabel.U
    return candidate


def first_malignancy_date(exam: ExamRecord) -> date | None:
    dates = [e.date for e in exam.events if e.is_malignant]
    return min(dates) if dates else None


def ground_truth(exam: ExamRecord, window: int) -> bool:
    """Cancer diagnosed within ``window`` months of the screening exam."""
    label = exam.exam_label
    if label is OutcomeLabel.U:
        raise ValidationError(f"exam {exam.exam_id}: U exams have no ground truth")
    if not label.is_cancer:
        return False
    diagnosed = first_malignancy_date(exam)
    if diagnosed is None:
        raise ValidationError(f"exam {exam.exam_id}: labeled {label.name} but has "
                              f"no dated malignant pathology event")
    return diagnosed <= add_months(exam.exam_date, window)


def _by_role(exam):
    roles = {}
    for op in exam.opinions:
        roles.setdefault(op.role, []).append(op)
    return roles


def operative_assessment(exam: ExamRecord, mode: str = "final") -> int:
    """BI-RADS assessment that drives the clinical workflow.

    Single reading uses the single opinion. Double reading uses the first
    reader in ``"first"`` mode; in ``"final"`` mode arbitration overrides,
    otherwise the exam is recalled when either reader recalled it.
    """
    if mode not in ("final", "first"):
        raise ValueError(f"unknown opinion mode {mode!r}")
    if not exam.opinions:
        raise ValidationError(f"exam {exam.exam_id}: no reader opinions")
    roles = _by_role(exam)
    if Role.SINGLE in roles:
        if len(roles[Role.SINGLE]) > 1 or len(roles) > 1:
            raise ValidationError(f"exam {exam.exam_id}: single-read opinion "
                                  f"mixed with other opinions")
        return roles[Role.SINGLE][0].assessment
    if mode == "first":
        if Role.FIRST not in roles:
            raise ValidationError(f"exam {exam.exam_id}: no first-reader opinion")
        return roles[Role.FIRST][0].assessment
    if Role.ARBITRATION in roles:
        return roles[Role.ARBITRATION][-1].assessment
    readers = [op.assessment for r in (Role.FIRST, Role.SECOND)
               for op in roles.get(r, [])]
    if 0 in readers:
        return 0
    return readers[-1]


def radiologist_positive(exam: ExamRecord, mode: str = "final") -> bool:
    return operative_assessment(exam, mode) == 0


def derive_labels(exams: Iterable[ExamRecord]) -> list[ExamRecord]:
    """Relabel exams from their event streams (both breasts share the history)."""
    exams = list(exams)
    biopsy_patients = {x.patient_id for x in exams
                       if any(e.kind is EventKind.BIOPSY for e in x.events)}
    out = []
    for x in exams:
        label = assign_breast_label(operative_assessment(x), x.exam_date, x.events,
                                    x.region,
                                    patient_biopsy=x.patient_id in biopsy_patients,
                                    exam_id=x.exam_id)
        out.append(replace(x, left_label=label, right_label=label))
    return out


def drop_unknown(exams: Iterable[ExamRecord]) -> tuple[list[ExamRecord], int]:
    kept, dropped = [], 0
    for x in exams:
        if x.exam_label is OutcomeLabel.U:
            dropped += 1
        else:
            kept.append(x)
    if dropped:
        log.info("dropped %d exams labeled U", dropped)
    return kept, dropped


def split_patients(cohort: Sequence[ExamRecord], fractions=(0.8, 0.1, 0.1),
                   seed: int = 0) -> tuple[list, list, list]:
    """Random patient-level train/validation/test split.

    Every exam of a patient lands in the same split. Split sizes are the
    rounded cumulative fractions of the number of patients.
    """
    if not cohort:
        raise ValueError("cannot split an empty cohort")
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"fractions must be three non-negative values summing "
                         f"to 1, got {fractions}")
    patients = sorted({x.patient_id for x in cohort})
    order = np.random.default_rng(seed).permutation(len(patients))
    cuts = np.rint(np.cumsum(fractions) * len(patients)).astype(int)
    cuts[-1] = len(patients)
    which = {}
    start = 0
    for k, stop in enumerate(cuts):
        for i in order[start:stop]:
            which[patients[i]] = k
        start = stop
    splits = ([], [], [])
    for x in cohort:
        splits[which[x.patient_id]].append(x)
    return splits
