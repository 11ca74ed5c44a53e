"""Hand-built exams shared by the test modules."""

from datetime import date

from ruleout.cohort import (
    EventKind as K, EventResult as R, ExamRecord, FollowUpEvent, OutcomeLabel as L,
    ReaderOpinion, Role, add_months,
)

D0 = date(2020, 3, 15)


def ev(kind, months, result=R.NA, days=0, start=D0):
    from datetime import timedelta
    return FollowUpEvent(kind, add_months(start, months) + timedelta(days=days), result)


def screen(months, start=D0):
    return ev(K.SCREENING_EXAM, months, start=start)


def malignant(months, start=D0):
    return ev(K.PATHOLOGY_RESULT, months, R.MALIGNANT, start=start)


def exam(label=L.N, *, exam_id="E1", patient_id="P1", assessment=1, score=0.5,
         events=None, opinions=None, site="synthetic", scanner="HS", region="US",
         when=D0):
    """An exam whose event stream is consistent with ``label``."""
    if events is None:
        events = {
            L.N: [screen(25, when)], L.S: [screen(25, when)],
            L.D: [ev(K.DIAGNOSTIC_EXAM, 0, R.NEGATIVE, days=14, start=when),
                  screen(25, when)],
            L.P: [ev(K.BIOPSY, 1, start=when), ev(K.PATHOLOGY_RESULT, 1, R.BENIGN, start=when)],
            L.H: [ev(K.BIOPSY, 1, start=when),
                  ev(K.PATHOLOGY_RESULT, 1, R.HIGH_RISK, start=when)],
            L.M: [ev(K.BIOPSY, 1, start=when), malignant(1, when)],
            L.I: [ev(K.BIOPSY, 8, start=when), malignant(8, when)],
        }[label]
    if opinions is None:
        opinions = [ReaderOpinion("R1", Role.SINGLE, assessment, when)]
    return ExamRecord(exam_id, patient_id, site, region, scanner, when, 60, label,
                      label, opinions, events, score)
