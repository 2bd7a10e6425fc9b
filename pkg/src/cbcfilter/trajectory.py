"""Leakage-aware student-level dataset.

Every derived quantity is a pure function of one student's events and
registrations plus the catalogue.  CBC performance indicators only ever see
the *CBC view* of a student's events: events on structural CBC subjects
that are not upper-cycle for the major they were recorded under.
"""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable

from .errors import TrajectoryError
from .ingest import (
    ENROL, EXAM, FAIL, PASS, YearMonth, classify_cbc_subjects, level_map, months_between,
    validate_consistency,
)

UPPER_DESTINATION_MAJOR = "UPPER_DESTINATION_MAJOR"
DROPOUT_CBC = "DROPOUT_CBC"
UPPER_OTHER_MAJOR = "UPPER_OTHER_MAJOR"
CENSORED = "CENSORED"
OUTCOME_CODES = {
    UPPER_DESTINATION_MAJOR: 1,
    DROPOUT_CBC: 2,
    UPPER_OTHER_MAJOR: 3,
    CENSORED: 0,
}

PRE_2006 = "PRE_2006"
POST_2006 = "POST_2006"
REFORM_YEAR = 2006

NO_SWITCH = "NO_SWITCH"
SWITCH_WITHIN_ENGINEERING = "SWITCH_WITHIN_ENGINEERING"
SWITCH_PROGRAMMER_TO_ENGINEERING = "SWITCH_PROGRAMMER_TO_ENGINEERING"
SWITCH_OTHER = "SWITCH_OTHER"

UNKNOWN = "UNKNOWN"


@dataclass(frozen=True)
class TrajectoryConfig:
    inactivity_months: int = 36
    window_end: YearMonth | None = None     # None: latest event in the data
    key_subjects: tuple[str, ...] = ()
    major_taxonomy: dict[str, str] = field(default_factory=dict)
    attempt_definition: str = "exam"        # "exam" | "enrol"
    mean_grade_events: str = "pass"         # "pass" | "all"
    entry_year_range: tuple[int, int] = (1980, 2019)
    imputation_months: int = 12
    first_year_months: int = 12
    grace_months: int = 0
    cbc_whitelist: tuple[str, ...] = ()

    def __post_init__(self):
        if self.attempt_definition not in ("exam", "enrol"):
            raise ValueError(f"attempt_definition must be 'exam' or 'enrol', got {self.attempt_definition!r}")
        if self.mean_grade_events not in ("pass", "all"):
            raise ValueError(f"mean_grade_events must be 'pass' or 'all', got {self.mean_grade_events!r}")
        if self.inactivity_months < 0:
            raise ValueError("inactivity_months must be non-negative")


@dataclass(frozen=True)
class StudentRecord:
    student_id: str
    entry_year: int
    cohort: str
    initial_major: str
    initial_major_imputed: bool
    destination_major: str
    destination_provisional: bool
    n_majors_during_cbc: int
    switch_pattern: str
    cbc_start_date: YearMonth
    cbc_end_event_date: YearMonth
    time_to_event: int
    cbc_outcome: str
    cbc_outcome_code: int
    n_attempted: int
    n_passed: int
    n_failed: int
    cbc_pass_rate: float
    cbc_mean_grade: float | None
    cbc_subjects_passed_first_year: int
    key_subject_failed_first_attempt: dict[str, bool]
    key_subject_failed_any_attempt: dict[str, bool]
    excluded_from_survival: bool
    exclusion_reasons: tuple[str, ...] = ()
    cbc_subjects_attempted: frozenset[str] = frozenset()
    cbc_subjects_failed_first: frozenset[str] = frozenset()
    cbc_subjects_failed_any: frozenset[str] = frozenset()


RECORD_COLUMNS = tuple(f.name for f in fields(StudentRecord))


def cohort_of(entry_year: int) -> str:
    return POST_2006 if entry_year >= REFORM_YEAR else PRE_2006


def is_upper(levels, subject: str, major: str) -> bool:
    return levels.get((subject, major), 0) >= 2


def cbc_view(events, cbc_subjects, levels):
    """Events on CBC subjects, minus those that are upper-cycle for their major."""
    return [
        e for e in events
        if e.subject_code in cbc_subjects and levels.get((e.subject_code, e.major_id), 1) < 2
    ]


def derive_cbc_start(events, cbc_subjects) -> YearMonth:
    """First ENROL on a CBC subject; first CBC EXAM when no such ENROL exists."""
    enrol = [e.date for e in events if e.subject_code in cbc_subjects and e.kind == ENROL]
    if enrol:
        return min(enrol)
    exams = [e.date for e in events if e.subject_code in cbc_subjects and e.kind == EXAM]
    if exams:
        return min(exams)
    raise TrajectoryError("NO_CBC_ACTIVITY", "student has no event on a CBC subject")


def derive_initial_major(registrations, cbc_start: YearMonth, destination_major: str | None = None,
                         imputation_months: int = 12) -> tuple[str, bool]:
    if not registrations:
        raise TrajectoryError("NO_REGISTRATION", "student has no degree registration")

    def pick(regs):
        first = min(r.reg_date for r in regs)
        tied = sorted(r.major_id for r in regs if r.reg_date == first)
        if destination_major in tied:
            return destination_major
        return tied[0]

    before = [r for r in registrations if r.reg_date <= cbc_start]
    if before:
        return pick(before), False
    after = [r for r in registrations if months_between(cbc_start, r.reg_date) <= imputation_months]
    if after:
        return pick(after), True
    return UNKNOWN, True


def declared_major_at(registrations, when: YearMonth) -> str:
    """Latest registration on or before ``when`` (ties: lowest id); earliest overall otherwise."""
    active = [r for r in registrations if r.reg_date <= when]
    if active:
        latest = max(r.reg_date for r in active)
        return min(r.major_id for r in active if r.reg_date == latest)
    first = min(r.reg_date for r in registrations)
    return min(r.major_id for r in registrations if r.reg_date == first)


def upper_cycle_passes(events, levels):
    return [e for e in events if e.result == PASS and is_upper(levels, e.subject_code, e.major_id)]


def derive_destination_major(events, registrations, levels, last_cbc_activity: YearMonth) -> tuple[str, bool]:
    """Major of the first upper-cycle PASS, else the declared major at last CBC activity (provisional)."""
    passes = upper_cycle_passes(events, levels)
    if passes:
        first = min(e.date for e in passes)
        return min(e.major_id for e in passes if e.date == first), False
    if not registrations:
        return UNKNOWN, True
    return declared_major_at(registrations, last_cbc_activity), True


def count_majors_during_cbc(registrations, cbc_start: YearMonth, cbc_end: YearMonth) -> int:
    """Distinct majors registered on or before the CBC exit date.

    Registrations stay active from their date onward.  ``cbc_start`` is kept
    for the signature; earlier registrations count as active at entry.
    """
    end = max(cbc_start, cbc_end)
    return len({r.major_id for r in registrations if r.reg_date <= end})


def classify_switch_pattern(initial: str, destination: str, taxonomy: dict[str, str]) -> tuple[str, bool]:
    """Return ``(pattern, warning)``; ``warning`` marks an unknown initial major."""
    if initial == UNKNOWN:
        return SWITCH_OTHER, True
    if initial == destination:
        return NO_SWITCH, False
    a, b = taxonomy.get(initial, "OTHER"), taxonomy.get(destination, "OTHER")
    if a == "ENGINEERING" and b == "ENGINEERING":
        return SWITCH_WITHIN_ENGINEERING, False
    if a == "PROGRAMMER" and b == "ENGINEERING":
        return SWITCH_PROGRAMMER_TO_ENGINEERING, False
    return SWITCH_OTHER, False


@dataclass(frozen=True)
class CbcPerformance:
    n_attempted: int
    n_passed: int
    n_failed: int
    cbc_pass_rate: float
    cbc_mean_grade: float | None
    cbc_subjects_passed_first_year: int
    key_subject_failed_first_attempt: dict[str, bool]
    key_subject_failed_any_attempt: dict[str, bool]
    subjects_attempted: frozenset[str]
    subjects_failed_first: frozenset[str]
    subjects_failed_any: frozenset[str]


def compute_cbc_performance(cbc_events, cbc_start: YearMonth, key_subjects: Iterable[str] = (),
                            attempt_definition: str = "exam", mean_grade_events: str = "pass",
                            first_year_months: int = 12) -> CbcPerformance:
    """CBC performance indicators from CBC-view events only."""
    exams = defaultdict(list)
    enrolled = set()
    for e in cbc_events:
        if e.kind == EXAM:
            exams[e.subject_code].append(e)
        else:
            enrolled.add(e.subject_code)

    attempted = set(exams)
    if attempt_definition == "enrol":
        attempted |= enrolled
    passed = set()
    failed_counted = set()
    failed_any = set()
    failed_first = set()
    first_year = 0
    grades = []
    for code, evs in exams.items():
        pass_dates = [e.date for e in evs if e.result == PASS]
        first_pass = min(pass_dates) if pass_dates else None
        if first_pass is not None:
            passed.add(code)
            if months_between(cbc_start, first_pass) < first_year_months:
                first_year += 1
        fails = [e.date for e in evs if e.result == FAIL]
        if fails:
            failed_any.add(code)
            if first_pass is None or min(fails) < first_pass:
                failed_counted.add(code)
        first_date = min(e.date for e in evs)
        if all(e.result == FAIL for e in evs if e.date == first_date):
            failed_first.add(code)
        for e in evs:
            if e.grade is not None and (mean_grade_events == "all" or e.result == PASS):
                grades.append(e.grade)

    n_att = len(attempted)
    keys = tuple(key_subjects)
    return CbcPerformance(
        n_attempted=n_att,
        n_passed=len(passed),
        n_failed=len(failed_counted),
        cbc_pass_rate=len(passed) / n_att if n_att else 0.0,
        cbc_mean_grade=sum(grades) / len(grades) if grades else None,
        cbc_subjects_passed_first_year=first_year,
        key_subject_failed_first_attempt={k: k in failed_first for k in keys},
        key_subject_failed_any_attempt={k: k in failed_any for k in keys},
        subjects_attempted=frozenset(attempted),
        subjects_failed_first=frozenset(failed_first),
        subjects_failed_any=frozenset(failed_any),
    )


@dataclass(frozen=True)
class ExitInfo:
    cbc_end_event_date: YearMonth
    time_to_event: int
    cbc_outcome: str
    cbc_outcome_code: int
    negative_duration: bool


def derive_exit_and_outcome(events, cbc_events, destination_major: str, levels, cbc_start: YearMonth,
                            window_end: YearMonth, inactivity_months: int = 36) -> ExitInfo:
    """Apply the four exit rules in priority order.

    ``events`` are all of the student's events up to ``window_end``;
    ``cbc_events`` their CBC view.
    """
    passes = upper_cycle_passes(events, levels)
    dest = [e.date for e in passes if e.major_id == destination_major]
    other = [e.date for e in passes if e.major_id != destination_major]
    if dest:
        end, outcome = min(dest), UPPER_DESTINATION_MAJOR
    elif other:
        end, outcome = min(other), UPPER_OTHER_MAJOR
    else:
        last_cbc = max(e.date for e in cbc_events)
        horizon = last_cbc.plus_months(inactivity_months)
        later = [e.date for e in events if e.date > last_cbc]
        if horizon <= window_end and (not later or min(later) > horizon):
            end, outcome = last_cbc, DROPOUT_CBC
        else:
            end, outcome = max(e.date for e in events), CENSORED
    t = months_between(cbc_start, end)
    return ExitInfo(end, t, outcome, OUTCOME_CODES[outcome], t < 0)


@dataclass
class BuildSummary:
    students_seen: int = 0
    no_cbc_activity: int = 0
    no_registration: int = 0
    entry_out_of_window: int = 0
    included: int = 0
    excluded_from_survival: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _group(items, key):
    out = defaultdict(list)
    for it in items:
        out[key(it)].append(it)
    return out


def build_dataset(events, registrations, catalog, config: TrajectoryConfig | None = None):
    """Build the student dataset; returns ``(records, summary)``.

    Records are ordered by ``student_id``.
    """
    config = config or TrajectoryConfig()
    catalog = list(catalog)
    cbc = classify_cbc_subjects(catalog, config.cbc_whitelist)
    levels = level_map(catalog)
    events = list(events)
    window_end = config.window_end
    if window_end is None:
        if not events:
            raise TrajectoryError("EMPTY_POPULATION", "no events")
        window_end = max(e.date for e in events)
    events = [e for e in events if e.date <= window_end]

    consistency = validate_consistency(events, registrations, cbc, config.grace_months)
    flagged = consistency.flag_reasons
    ev_by = _group(events, lambda e: e.student_id)
    reg_by = _group(registrations, lambda r: r.student_id)
    summary = BuildSummary(students_seen=len(set(ev_by) | set(reg_by)))
    lo, hi = config.entry_year_range
    records = []
    for sid in sorted(ev_by):
        evs = sorted(ev_by[sid], key=lambda e: e.date)
        cbc_evs = cbc_view(evs, cbc, levels)
        if not cbc_evs:
            summary.no_cbc_activity += 1
            continue
        regs = reg_by.get(sid)
        if not regs:
            summary.no_registration += 1
            continue
        start = derive_cbc_start(cbc_evs, cbc)
        if not lo <= start.year <= hi:
            summary.entry_out_of_window += 1
            continue
        rec = _student_record(sid, evs, cbc_evs, regs, cbc, levels, start, window_end, config,
                              tuple(flagged.get(sid, ())))
        records.append(rec)
    summary.included = len(records)
    summary.excluded_from_survival = sum(r.excluded_from_survival for r in records)
    if not records:
        raise TrajectoryError("EMPTY_POPULATION", json.dumps(summary.to_dict()))
    return records, summary


def build_student_dataset(events, registrations, catalog, config: TrajectoryConfig | None = None):
    return build_dataset(events, registrations, catalog, config)[0]


def _student_record(sid, evs, cbc_evs, regs, cbc, levels, start, window_end, config, flags):
    last_cbc = max(e.date for e in cbc_evs)
    destination, provisional = derive_destination_major(evs, regs, levels, last_cbc)
    initial, imputed = derive_initial_major(regs, start, destination, config.imputation_months)
    ex = derive_exit_and_outcome(evs, cbc_evs, destination, levels, start, window_end,
                                 config.inactivity_months)
    n_majors = max(1, count_majors_during_cbc(regs, start, ex.cbc_end_event_date))
    pattern, _ = classify_switch_pattern(initial, destination, config.major_taxonomy)
    perf = compute_cbc_performance(cbc_evs, start, config.key_subjects, config.attempt_definition,
                                   config.mean_grade_events, config.first_year_months)
    reasons = flags + (("NEGATIVE_DURATION_EXIT",) if ex.negative_duration else ())
    return StudentRecord(
        student_id=sid,
        entry_year=start.year,
        cohort=cohort_of(start.year),
        initial_major=initial,
        initial_major_imputed=imputed,
        destination_major=destination,
        destination_provisional=provisional,
        n_majors_during_cbc=n_majors,
        switch_pattern=pattern,
        cbc_start_date=start,
        cbc_end_event_date=ex.cbc_end_event_date,
        time_to_event=ex.time_to_event,
        cbc_outcome=ex.cbc_outcome,
        cbc_outcome_code=ex.cbc_outcome_code,
        n_attempted=perf.n_attempted,
        n_passed=perf.n_passed,
        n_failed=perf.n_failed,
        cbc_pass_rate=perf.cbc_pass_rate,
        cbc_mean_grade=perf.cbc_mean_grade,
        cbc_subjects_passed_first_year=perf.cbc_subjects_passed_first_year,
        key_subject_failed_first_attempt=perf.key_subject_failed_first_attempt,
        key_subject_failed_any_attempt=perf.key_subject_failed_any_attempt,
        excluded_from_survival=bool(reasons),
        exclusion_reasons=reasons,
        cbc_subjects_attempted=perf.subjects_attempted,
        cbc_subjects_failed_first=perf.subjects_failed_first,
        cbc_subjects_failed_any=perf.subjects_failed_any,
    )


# -- serialisation -----------------------------------------------------------

def _cell(name, value):
    if isinstance(value, bool):
        return "1" if value else "0"
    if value is None:
        return ""
    if isinstance(value, YearMonth):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, dict):
        return ";".join(f"{k}={int(v)}" for k, v in sorted(value.items()))
    if isinstance(value, (frozenset, set)):
        return ";".join(sorted(value))
    if isinstance(value, tuple):
        return ";".join(value)
    return str(value)


def write_records_csv(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow([_cell(c, getattr(r, c)) for c in RECORD_COLUMNS])


def record_to_dict(r: StudentRecord) -> dict:
    out = {}
    for c in RECORD_COLUMNS:
        v = getattr(r, c)
        if isinstance(v, YearMonth):
            v = str(v)
        elif isinstance(v, (frozenset, set)):
            v = sorted(v)
        elif isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, dict):
            v = dict(sorted(v.items()))
        out[c] = v
    return out


def write_records_json(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([record_to_dict(r) for r in records], fh, indent=1, ensure_ascii=False)
        fh.write("\n")


def _split(cell):
    return tuple(x for x in cell.split(";") if x)


def read_records_csv(path) -> list[StudentRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != RECORD_COLUMNS:
            raise TrajectoryError("HEADER_MISMATCH", f"{path}: not a student records file")
        for row in reader:
            d = dict(zip(RECORD_COLUMNS, row))
            out.append(StudentRecord(
                student_id=d["student_id"],
                entry_year=int(d["entry_year"]),
                cohort=d["cohort"],
                initial_major=d["initial_major"],
                initial_major_imputed=d["initial_major_imputed"] == "1",
                destination_major=d["destination_major"],
                destination_provisional=d["destination_provisional"] == "1",
                n_majors_during_cbc=int(d["n_majors_during_cbc"]),
                switch_pattern=d["switch_pattern"],
                cbc_start_date=YearMonth.parse(d["cbc_start_date"]),
                cbc_end_event_date=YearMonth.parse(d["cbc_end_event_date"]),
                time_to_event=int(d["time_to_event"]),
                cbc_outcome=d["cbc_outcome"],
                cbc_outcome_code=int(d["cbc_outcome_code"]),
                n_attempted=int(d["n_attempted"]),
                n_passed=int(d["n_passed"]),
                n_failed=int(d["n_failed"]),
                cbc_pass_rate=float(d["cbc_pass_rate"]),
                cbc_mean_grade=float(d["cbc_mean_grade"]) if d["cbc_mean_grade"] else None,
                cbc_subjects_passed_first_year=int(d["cbc_subjects_passed_first_year"]),
                key_subject_failed_first_attempt=_flag_map(d["key_subject_failed_first_attempt"]),
                key_subject_failed_any_attempt=_flag_map(d["key_subject_failed_any_attempt"]),
                excluded_from_survival=d["excluded_from_survival"] == "1",
                exclusion_reasons=_split(d["exclusion_reasons"]),
                cbc_subjects_attempted=frozenset(_split(d["cbc_subjects_attempted"])),
                cbc_subjects_failed_first=frozenset(_split(d["cbc_subjects_failed_first"])),
                cbc_subjects_failed_any=frozenset(_split(d["cbc_subjects_failed_any"])),
            ))
    return out


def _flag_map(cell):
    out = {}
    for item in _split(cell):
        k, _, v = item.rpartition("=")
        out[k] = v == "1"
    return out
