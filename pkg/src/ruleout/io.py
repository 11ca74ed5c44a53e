"""Four-file CSV cohort layout, ingestion with line-accurate diagnostics, writers."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

from .cohort import (
    BIRADS, EventKind, EventResult, ExamRecord, FollowUpEvent, OutcomeLabel,
    ReaderOpinion, Role, ValidationError, derive_labels, drop_unknown,
)

log = logging.getLogger(__name__)

EXAM_COLUMNS = ("exam_id", "patient_id", "site", "region", "scanner", "exam_date", "age")
EXAM_OPTIONAL = ("left_label", "right_label", "prior_exam_id", "prior_birads")
OPINION_COLUMNS = ("exam_id", "reader_id", "role", "assessment", "opinion_date")
EVENT_COLUMNS = ("exam_id", "kind", "date", "result")
SCORE_COLUMNS = ("exam_id", "score")
FILES = {"exams": "exams.csv", "opinions": "opinions.csv", "events": "events.csv",
         "scores": "scores.csv"}


@dataclass(frozen=True)
class Issue:
    file: str
    line: int
    field: str
    message: str

    def __str__(self):
        return f"{self.file}:{self.line} [{self.field}] {self.message}"


class IngestError(ValidationError):
    pass


@dataclass
class Cohort:
    exams: list
    dropped_unknown: int = 0
    warnings: list = field(default_factory=list)


def _rows(path: Path, required, optional=()):
    """Yield ``(line, row)``; header problems become issues on line 1."""
    name = path.name
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        issues = []
        for col in required:
            if col not in header:
                issues.append(Issue(name, 1, col, "missing required column"))
        for col in header:
            if col not in required and col not in optional:
                issues.append(Issue(name, 1, col, "unknown column"))
        if issues:
            raise IngestError(issues)
        rows = []
        for row in reader:
            if None in row:
                issues.append(Issue(name, reader.line_num, "*", "too many fields"))
                continue
            rows.append((reader.line_num, row))
        return header, rows, issues


class _Parser:
    def __init__(self, file):
        self.file = file
        self.issues = []

    def fail(self, line, col, message):
        self.issues.append(Issue(self.file, line, col, message))

    def text(self, line, row, col, optional=False):
        v = (row.get(col) or "").strip()
        if not v and not optional:
            self.fail(line, col, "empty value")
        return v or None

    def date(self, line, row, col):
        v = self.text(line, row, col)
        if v is None:
            return None
        try:
            return date.fromisoformat(v)
        except ValueError:
            self.fail(line, col, f"{v!r} is not an ISO-8601 date")

    def integer(self, line, row, col, allowed=None, optional=False):
        v = self.text(line, row, col, optional)
        if v is None:
            return None
        try:
            out = int(v)
        except ValueError:
            self.fail(line, col, f"{v!r} is not an integer")
            return None
        if allowed is not None and out not in allowed:
            self.fail(line, col, f"{out} not in {tuple(allowed)}")
            return None
        return out

    def enum(self, line, row, col, kind):
        v = self.text(line, row, col)
        if v is None:
            return None
        try:
            return kind(v)
        except ValueError:
            self.fail(line, col, f"{v!r} not in {[k.value for k in kind]}")

    def label(self, line, row, col):
        v = self.text(line, row, col)
        if v is None:
            return None
        try:
            return OutcomeLabel[v]
        except KeyError:
            self.fail(line, col, f"{v!r} is not an outcome label")


def ingest(exams_csv, opinions_csv, events_csv, scores_csv=None, *,
           drop_u: bool = True) -> Cohort:
    """Read, cross-link and validate the four-file cohort layout.

    Labels are derived from follow-up events when ``exams.csv`` has no label
    columns. Every problem found is reported together as an
    :class:`IngestError` whose ``issues`` name file, line and field.
    """
    issues = []
    header, rows, bad = _rows(Path(exams_csv), EXAM_COLUMNS, EXAM_OPTIONAL)
    issues += bad
    has_labels = "left_label" in header or "right_label" in header
    if has_labels and not ("left_label" in header and "right_label" in header):
        issues.append(Issue(Path(exams_csv).name, 1, "left_label/right_label",
                            "label columns must come as a pair"))
    p = _Parser(Path(exams_csv).name)
    base, exam_line = {}, {}
    for line, row in rows:
        eid = p.text(line, row, "exam_id")
        if eid is None:
            continue
        if eid in base:
            p.fail(line, "exam_id", f"duplicate exam_id {eid!r} (first on line "
                                    f"{exam_line[eid]})")
            continue
        rec = dict(
            exam_id=eid, patient_id=p.text(line, row, "patient_id"),
            site=p.text(line, row, "site"), region=p.text(line, row, "region"),
            scanner=p.text(line, row, "scanner"),
            exam_date=p.date(line, row, "exam_date"),
            age=p.integer(line, row, "age"),
            prior_exam_id=p.text(line, row, "prior_exam_id", optional=True),
            prior_birads=p.integer(line, row, "prior_birads", BIRADS, optional=True),
        )
        if has_labels:
            rec["left_label"] = p.label(line, row, "left_label")
            rec["right_label"] = p.label(line, row, "right_label")
        else:
            rec["left_label"] = rec["right_label"] = OutcomeLabel.U
        base[eid], exam_line[eid] = rec, line
        base[eid]["opinions"], base[eid]["events"] = [], []
    issues += p.issues

    def orphan(parser, line, eid):
        if eid is not None and eid not in base:
            parser.fail(line, "exam_id", f"no exam {eid!r} in exams.csv")
            return True
        return eid is None

    _, rows, bad = _rows(Path(opinions_csv), OPINION_COLUMNS)
    issues += bad
    p = _Parser(Path(opinions_csv).name)
    seen = {}
    for line, row in rows:
        eid = p.text(line, row, "exam_id")
        reader = p.text(line, row, "reader_id")
        role = p.enum(line, row, "role", Role)
        assessment = p.integer(line, row, "assessment", BIRADS)
        when = p.date(line, row, "opinion_date")
        if orphan(p, line, eid) or None in (reader, role, assessment, when):
            continue
        key = (eid, reader, role)
        if key in seen:
            p.fail(line, "reader_id", f"duplicate opinion of {reader!r} as "
                                      f"{role.value} (first on line {seen[key]})")
            continue
        seen[key] = line
        base[eid]["opinions"].append(ReaderOpinion(reader, role, assessment, when))
    issues += p.issues

    _, rows, bad = _rows(Path(events_csv), EVENT_COLUMNS)
    issues += bad
    p = _Parser(Path(events_csv).name)
    for line, row in rows:
        eid = p.text(line, row, "exam_id")
        kind = p.enum(line, row, "kind", EventKind)
        when = p.date(line, row, "date")
        result = p.enum(line, row, "result", EventResult)
        if orphan(p, line, eid) or None in (kind, when, result):
            continue
        exam_date = base[eid]["exam_date"]
        if exam_date is not None and when < exam_date:
            p.fail(line, "date", f"{kind.value} dated {when} before exam {eid} "
                                 f"on {exam_date}")
            continue
        if kind is EventKind.PATHOLOGY_RESULT and result is EventResult.NA:
            p.fail(line, "result", "pathology_result without a result")
            continue
        if kind is EventKind.BIOPSY and result is not EventResult.NA:
            p.fail(line, "result", "biopsy rows carry no result; use pathology_result")
            continue
        if (kind in (EventKind.SCREENING_EXAM, EventKind.DIAGNOSTIC_EXAM)
                and result not in (EventResult.NA, EventResult.NEGATIVE)):
            p.fail(line, "result", f"{kind.value} cannot carry {result.value!r}")
            continue
        base[eid]["events"].append(FollowUpEvent(kind, when, result))
    issues += p.issues

    scores = {}
    if scores_csv is not None:
        _, rows, bad = _rows(Path(scores_csv), SCORE_COLUMNS)
        issues += bad
        p = _Parser(Path(scores_csv).name)
        score_line = {}
        for line, row in rows:
            eid = p.text(line, row, "exam_id")
            raw = p.text(line, row, "score")
            if orphan(p, line, eid) or raw is None:
                continue
            if eid in scores:
                p.fail(line, "exam_id", f"duplicate score for {eid!r} (first on "
                                        f"line {score_line[eid]})")
                continue
            try:
                value = float(raw)
            except ValueError:
                p.fail(line, "score", f"{raw!r} is not a number")
                continue
            if not 0.0 <= value <= 1.0:
                p.fail(line, "score", f"score {raw} outside [0, 1]")
                continue
            scores[eid], score_line[eid] = value, line
        issues += p.issues

    exams = []
    name = Path(exams_csv).name
    for eid, rec in base.items():
        if any(rec[k] is None for k in ("patient_id", "site", "region", "scanner",
                                        "exam_date", "age", "left_label",
                                        "right_label")):
            continue  # already reported
        try:
            exams.append(ExamRecord(**rec, device_score=scores.get(eid)))
        except ValidationError as exc:
            issues += [Issue(name, exam_line[eid], "*", m) for m in exc.issues]
    for x in exams:
        if x.prior_exam_id is not None and x.prior_exam_id not in base:
            issues.append(Issue(name, exam_line[x.exam_id], "prior_exam_id",
                                f"no exam {x.prior_exam_id!r}"))
    if issues:
        raise IngestError(issues)

    warnings = []
    if not has_labels:
        try:
            exams = derive_labels(exams)
        except ValidationError as exc:
            raise IngestError([Issue(name, 0, "*", m) for m in exc.issues]) from None
    dropped = 0
    if drop_u:
        exams, dropped = drop_unknown(exams)
        if dropped:
            warnings.append(f"dropped {dropped} exams labeled U")
    unscored = sum(x.device_score is None for x in exams)
    if scores_csv is not None and unscored:
        warnings.append(f"{unscored} exams have no device score")
    for w in warnings:
        log.warning(w)
    return Cohort(exams, dropped, warnings)


def ingest_dir(directory, **kw) -> Cohort:
    d = Path(directory)
    scores = d / FILES["scores"]
    return ingest(d / FILES["exams"], d / FILES["opinions"], d / FILES["events"],
                  scores if scores.exists() else None, **kw)


def fmt(value) -> str:
    """Deterministic cell text: repr for floats, NA for missing values."""
    if value is None:
        return ""
    if isinstance(value, float):
        return "NA" if math.isnan(value) else repr(value)
    if isinstance(value, OutcomeLabel):
        return value.name
    if hasattr(value, "value"):
        return str(value.value)
    if isinstance(value, date):
        return value.isoformat()
    return str(value)


def write_csv(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def write_cohort(exams, out_dir, *, labels: bool = True, scores: bool = True):
    """Write the four-file layout (``labels=False`` omits the label columns)."""
    out = Path(out_dir)
    cols = EXAM_COLUMNS + (("left_label", "right_label") if labels else ()) + \
        ("prior_exam_id", "prior_birads")
    write_csv(out / FILES["exams"], cols, (
        [x.exam_id, x.patient_id, x.site, x.region, x.scanner, x.exam_date, x.age]
        + ([x.left_label, x.right_label] if labels else [])
        + [x.prior_exam_id, x.prior_birads] for x in exams))
    write_csv(out / FILES["opinions"], OPINION_COLUMNS, (
        [x.exam_id, o.reader_id, o.role, o.assessment, o.opinion_date]
        for x in exams for o in x.opinions))
    write_csv(out / FILES["events"], EVENT_COLUMNS, (
        [x.exam_id, e.kind, e.date, e.result] for x in exams for e in x.events))
    if scores:
        write_csv(out / FILES["scores"], SCORE_COLUMNS, (
            [x.exam_id, x.device_score] for x in exams if x.device_score is not None))


def _clean(obj):
    if isinstance(obj, float):
        return None if math.isnan(obj) else obj
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (date, OutcomeLabel)) or hasattr(obj, "value"):
        return fmt(obj)
    if hasattr(obj, "item"):
        return obj.item()
    return obj


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")
