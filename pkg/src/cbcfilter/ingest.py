"""Event-log, registration and curriculum-catalogue ingestion.

Inputs are headered comma-separated files.  Row-level problems are
recorded in a :class:`ValidationReport` and parsing continues; structural
problems (missing file, header mismatch, conflicting catalogue rows) raise
:class:`~cbcfilter.errors.IngestError`.
"""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

from .errors import IngestError

ENROL = "ENROL"
EXAM = "EXAM"
PASS = "PASS"
FAIL = "FAIL"
NONE = "NONE"

FIELD_GROUPS = (
    "MATH", "PHYSICS", "CHEMISTRY", "INTRO_ENGINEERING", "COMPUTING", "LANGUAGE", "OTHER",
)

EVENT_COLUMNS = ("student_id", "major_id", "subject_code", "kind", "date", "result", "grade")
REGISTRATION_COLUMNS = ("student_id", "major_id", "reg_date")
CATALOG_COLUMNS = ("subject_code", "subject_name", "field_group", "major_id", "year_level")

YEAR_RANGE = (1980, 2030)
GRADE_RANGE = (0.0, 10.0)


class YearMonth(NamedTuple):
    """Calendar month; tuple ordering is the chronological order."""

    year: int
    month: int

    @property
    def index(self) -> int:
        return self.year * 12 + self.month

    def plus_months(self, n: int) -> "YearMonth":
        y, m = divmod(self.year * 12 + self.month - 1 + n, 12)
        return YearMonth(y, m + 1)

    def __str__(self) -> str:
        return f"{self.year:04d}-{self.month:02d}"

    @classmethod
    def parse(cls, text: str) -> "YearMonth":
        ym = _parse_date(text, YEAR_RANGE)
        if isinstance(ym, str):
            raise ValueError(f"{ym}: {text!r}")
        return ym


def months_between(start: YearMonth, end: YearMonth) -> int:
    return (end.year - start.year) * 12 + (end.month - start.month)


_DATE_CACHE: dict[str, YearMonth] = {}


def _parse_date(text, year_range):
    """Return a YearMonth or a reject reason code."""
    ym = _DATE_CACHE.get(text)
    if ym is not None:
        if year_range[0] <= ym.year <= year_range[1]:
            return ym
        return "INVALID_YEAR"
    if len(text) != 7 or text[4] != "-" or not (text[:4].isdigit() and text[5:].isdigit()):
        return "INVALID_DATE"
    year, month = int(text[:4]), int(text[5:])
    if not 1 <= month <= 12:
        return "INVALID_MONTH"
    ym = _DATE_CACHE[text] = YearMonth(year, month)
    if not year_range[0] <= year <= year_range[1]:
        return "INVALID_YEAR"
    return ym


class AcademicEvent(NamedTuple):
    student_id: str
    major_id: str
    subject_code: str
    kind: str
    date: YearMonth
    result: str
    grade: float | None = None


class DegreeRegistration(NamedTuple):
    student_id: str
    major_id: str
    reg_date: YearMonth


class CatalogEntry(NamedTuple):
    subject_code: str
    subject_name: str
    field_group: str
    major_id: str
    year_level: int


@dataclass
class ValidationReport:
    source: str = ""
    rows_read: int = 0
    rows_accepted: int = 0
    rows_rejected: int = 0
    rejects: list[tuple[int, str]] = field(default_factory=list)
    duplicates: int = 0
    students_flagged_inconsistent: set[str] = field(default_factory=set)
    flag_reasons: dict[str, list[str]] = field(default_factory=dict)

    def reject(self, line: int, reason: str) -> None:
        self.rejects.append((line, reason))
        self.rows_rejected += 1

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "rows_read": self.rows_read,
            "rows_accepted": self.rows_accepted,
            "rows_rejected": self.rows_rejected,
            "duplicates": self.duplicates,
            "rejects": [{"line": ln, "reason": r} for ln, r in self.rejects],
            "students_flagged_inconsistent": sorted(self.students_flagged_inconsistent),
            "flag_reasons": {k: self.flag_reasons[k] for k in sorted(self.flag_reasons)},
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


@dataclass(frozen=True)
class Schema:
    """Column-name mapping from canonical names to the names used in a file."""

    columns: dict[str, str] = field(default_factory=dict)
    year_range: tuple[int, int] = YEAR_RANGE
    grade_range: tuple[float, float] = GRADE_RANGE

    def name(self, canonical: str) -> str:
        return self.columns.get(canonical, canonical)


def _open_rows(path, canonical, schema):
    path = Path(path)
    if not path.is_file():
        raise IngestError("MISSING_FILE", str(path))
    fh = open(path, newline="", encoding="utf-8")
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        fh.close()
        raise IngestError("HEADER_MISMATCH", f"{path}: empty file") from None
    header = [h.strip() for h in header]
    if header and header[0].startswith("﻿"):
        header[0] = header[0][1:]
    wanted = [schema.name(c) for c in canonical]
    missing = [w for w in wanted if w not in header]
    if missing:
        fh.close()
        raise IngestError("HEADER_MISMATCH", f"{path}: missing columns {missing}")
    return fh, reader, [header.index(w) for w in wanted], len(header)


def parse_events(path, schema: Schema | None = None):
    """Parse an event log into ``(events, report)``; input order is kept."""
    schema = schema or Schema()
    fh, reader, idx, width = _open_rows(path, EVENT_COLUMNS, schema)
    report = ValidationReport(source=str(path))
    events = []
    seen = set()
    yr = schema.year_range
    glo, ghi = schema.grade_range
    i_sid, i_maj, i_sub, i_kind, i_date, i_res, i_grade = idx
    with fh:
        for row in reader:
            line = reader.line_num
            report.rows_read += 1
            if len(row) != width:
                report.reject(line, "WRONG_FIELD_COUNT")
                continue
            sid, major, subject = row[i_sid].strip(), row[i_maj].strip(), row[i_sub].strip()
            if not (sid and major and subject):
                report.reject(line, "EMPTY_FIELD")
                continue
            kind = row[i_kind].strip().upper()
            if kind != ENROL and kind != EXAM:
                report.reject(line, "INVALID_KIND")
                continue
            date = _parse_date(row[i_date].strip(), yr)
            if type(date) is str:
                report.reject(line, date)
                continue
            result = row[i_res].strip().upper() or NONE
            raw_grade = row[i_grade].strip()
            grade = None
            if raw_grade:
                try:
                    grade = float(raw_grade)
                except ValueError:
                    report.reject(line, "INVALID_GRADE")
                    continue
                if not glo <= grade <= ghi:
                    report.reject(line, "GRADE_OUT_OF_RANGE")
                    continue
            if kind == ENROL:
                if result != NONE:
                    report.reject(line, "ENROL_WITH_RESULT")
                    continue
                if grade is not None:
                    report.reject(line, "ENROL_WITH_GRADE")
                    continue
            elif result != PASS and result != FAIL:
                report.reject(line, "EXAM_WITHOUT_RESULT" if result == NONE else "INVALID_RESULT")
                continue
            ev = AcademicEvent(sid, major, subject, kind, date, result, grade)
            if ev in seen:
                report.duplicates += 1
                report.reject(line, "DUPLICATE")
                continue
            seen.add(ev)
            events.append(ev)
    report.rows_accepted = len(events)
    return events, report


def parse_registrations(path, schema: Schema | None = None):
    """Parse degree registrations into ``(registrations, report)``, deduplicated."""
    schema = schema or Schema()
    fh, reader, (i_sid, i_maj, i_date), width = _open_rows(path, REGISTRATION_COLUMNS, schema)
    report = ValidationReport(source=str(path))
    regs = []
    seen = set()
    with fh:
        for row in reader:
            line = reader.line_num
            report.rows_read += 1
            if len(row) != width:
                report.reject(line, "WRONG_FIELD_COUNT")
                continue
            sid, major = row[i_sid].strip(), row[i_maj].strip()
            if not (sid and major):
                report.reject(line, "EMPTY_FIELD")
                continue
            date = _parse_date(row[i_date].strip(), schema.year_range)
            if type(date) is str:
                report.reject(line, date)
                continue
            reg = DegreeRegistration(sid, major, date)
            if reg in seen:
                report.duplicates += 1
                report.reject(line, "DUPLICATE")
                continue
            seen.add(reg)
            regs.append(reg)
    report.rows_accepted = len(regs)
    return regs, report


def parse_catalog(path, schema: Schema | None = None):
    """Parse a curriculum catalogue into ``(entries, report)``.

    A ``(subject_code, major_id)`` pair listed twice with different
    attributes is fatal (``DUPLICATE_CONFLICT``); exact repeats are dropped.
    """
    schema = schema or Schema()
    fh, reader, idx, width = _open_rows(path, CATALOG_COLUMNS, schema)
    i_code, i_name, i_group, i_major, i_level = idx
    report = ValidationReport(source=str(path))
    entries = []
    first_line: dict[tuple[str, str], tuple[int, CatalogEntry]] = {}
    with fh:
        for row in reader:
            line = reader.line_num
            report.rows_read += 1
            if len(row) != width:
                report.reject(line, "WRONG_FIELD_COUNT")
                continue
            code, major = row[i_code].strip(), row[i_major].strip()
            if not (code and major):
                report.reject(line, "EMPTY_FIELD")
                continue
            group = row[i_group].strip().upper()
            if group not in FIELD_GROUPS:
                report.reject(line, "INVALID_FIELD_GROUP")
                continue
            try:
                level = int(row[i_level].strip())
            except ValueError:
                report.reject(line, "INVALID_YEAR_LEVEL")
                continue
            if level < 1:
                report.reject(line, "INVALID_YEAR_LEVEL")
                continue
            entry = CatalogEntry(code, row[i_name].strip(), group, major, level)
            prev = first_line.get((code, major))
            if prev is not None:
                if prev[1] == entry:
                    report.duplicates += 1
                    report.reject(line, "DUPLICATE")
                    continue
                raise IngestError(
                    "DUPLICATE_CONFLICT",
                    f"{path}: ({code}, {major}) at lines {prev[0]} and {line}",
                )
            first_line[(code, major)] = (line, entry)
            entries.append(entry)
    report.rows_accepted = len(entries)
    return entries, report


@dataclass(frozen=True)
class CbcSubject:
    subject_code: str
    subject_name: str
    field_group: str
    majors: tuple[str, ...]          # every programme listing the subject
    level1_majors: tuple[str, ...]   # programmes where it sits at year level 1


def classify_cbc_subjects(catalog, whitelist=()) -> dict[str, CbcSubject]:
    """Structural CBC subject set.

    A subject qualifies when it is at year level 1 for some programme, is
    listed by at least two programmes, and belongs to a foundational field
    group (anything but OTHER, unless whitelisted by code).
    """
    catalog = list(catalog)
    if not catalog:
        raise IngestError("EMPTY_CATALOG", "cannot derive the CBC from an empty catalogue")
    whitelist = set(whitelist)
    by_subject = defaultdict(list)
    for e in catalog:
        by_subject[e.subject_code].append(e)
    out = {}
    for code in sorted(by_subject):
        rows = sorted(by_subject[code], key=lambda e: e.major_id)
        majors = tuple(sorted({e.major_id for e in rows}))
        level1 = tuple(sorted({e.major_id for e in rows if e.year_level == 1}))
        foundational = code in whitelist or any(e.field_group != "OTHER" for e in rows)
        if level1 and len(majors) >= 2 and foundational:
            named = next((e for e in rows if e.field_group != "OTHER"), rows[0])
            out[code] = CbcSubject(code, named.subject_name, named.field_group, majors, level1)
    return out


def level_map(catalog) -> dict[tuple[str, str], int]:
    """``(subject_code, major_id) -> year_level``."""
    return {(e.subject_code, e.major_id): e.year_level for e in catalog}


def validate_consistency(events, registrations, cbc_subjects=None, grace_months: int = 0):
    """Flag students with inconsistent dates.

    Reasons recorded per student:

    * ``REVERSED_DATES`` -- an EXAM on a subject precedes the first ENROL on it.
    * ``NEGATIVE_DURATION`` -- every recorded activity other than the CBC
      enrolments themselves precedes the first CBC enrolment.
    * ``EVENTS_BEFORE_REGISTRATION`` -- the first event precedes the earliest
      degree registration by more than ``grace_months``.

    Flagged students stay in the data; downstream survival estimation drops them.
    """
    report = ValidationReport(source="consistency")
    report.rows_read = report.rows_accepted = len(events)
    first_reg: dict[str, YearMonth] = {}
    for r in registrations:
        cur = first_reg.get(r.student_id)
        if cur is None or r.reg_date < cur:
            first_reg[r.student_id] = r.reg_date

    per_student = defaultdict(list)
    for ev in events:
        per_student[ev.student_id].append(ev)

    in_cbc = (lambda code: True) if cbc_subjects is None else (lambda code: code in cbc_subjects)
    for sid in sorted(per_student):
        evs = per_student[sid]
        reasons = []
        first_enrol: dict[str, YearMonth] = {}
        for ev in evs:
            if ev.kind == ENROL:
                cur = first_enrol.get(ev.subject_code)
                if cur is None or ev.date < cur:
                    first_enrol[ev.subject_code] = ev.date
        if any(
            ev.kind == EXAM and ev.subject_code in first_enrol and ev.date < first_enrol[ev.subject_code]
            for ev in evs
        ):
            reasons.append("REVERSED_DATES")
        cbc_enrols = [d for code, d in first_enrol.items() if in_cbc(code)]
        if cbc_enrols:
            entry = min(cbc_enrols)
            others = [ev.date for ev in evs if not (ev.kind == ENROL and in_cbc(ev.subject_code))]
            if others and max(others) < entry:
                reasons.append("NEGATIVE_DURATION")
        reg = first_reg.get(sid)
        if reg is not None:
            earliest = min(ev.date for ev in evs)
            if months_between(earliest, reg) > grace_months:
                reasons.append("EVENTS_BEFORE_REGISTRATION")
        if reasons:
            report.students_flagged_inconsistent.add(sid)
            report.flag_reasons[sid] = reasons
    return report


def write_events(path, events) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_COLUMNS)
        for ev in events:
            w.writerow(_event_row(ev))


def _event_row(ev):
    grade = "" if ev.grade is None else f"{ev.grade:g}"
    result = "" if ev.result == NONE else ev.result
    return (ev.student_id, ev.major_id, ev.subject_code, ev.kind, str(ev.date), result, grade)


def write_registrations(path, registrations) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REGISTRATION_COLUMNS)
        for r in registrations:
            w.writerow((r.student_id, r.major_id, str(r.reg_date)))


def write_catalog(path, catalog) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CATALOG_COLUMNS)
        for e in catalog:
            w.writerow(tuple(e))
