"""Subject pass-rate tables, bottleneck scores and the sentinel-subject scan."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import EstimationError, SeparationError
from .glm import (CONTROLS, FAILED, build_sentinel_design, failed_flag, interaction_column, logistic_fit,
                  major_odds_ratio, marginal_odds_ratio)
from .ingest import EXAM, PASS, months_between
from .survival import cox_fit, survival_samples

ALL = "ALL"

OK = "OK"
SEPARATION = "SEPARATION"
LOW_ENROLMENT = "LOW_ENROLMENT"
NOT_ESTIMABLE = "NOT_ESTIMABLE"
NON_CONVERGENCE = "NON_CONVERGENCE"

HR_COVARIATES = ("cbc_pass_rate", "cbc_subjects_passed_first_year", "cohort_post")


@dataclass(frozen=True)
class SubjectStats:
    subject_code: str
    major_id: str
    n_enrolments: int
    n_attempters: int
    n_passes: int
    pass_rate: float
    mean_time_to_first_pass: float | None


@dataclass(frozen=True)
class SentinelThresholds:
    min_prevalence: float = 0.10
    min_odds_ratio: float = 2.0
    max_p_value: float = 0.01
    min_attempters: int = 50

    def passes(self, prevalence, odds_ratio, p_value, validity) -> bool:
        return bool(
            validity == OK
            and prevalence >= self.min_prevalence
            and odds_ratio >= self.min_odds_ratio
            and p_value <= self.max_p_value
        )


@dataclass(frozen=True)
class SentinelFlag:
    subject_code: str
    major_id: str
    n_attempters: int
    failure_prevalence: float
    odds_ratio: float
    p_value: float
    marginal_odds_ratio: float
    is_sentinel: bool
    validity: str


@dataclass(frozen=True)
class BottleneckScore:
    subject_code: str
    pass_rate: float
    hr_dropout: float
    score: float
    validity: str = OK


# -- pass rates ----------------------------------------------------------------

def subject_pass_rates(events, cbc_set, records=None, by_major: bool = False,
                       levels=None) -> list[SubjectStats]:
    """Student-level pass proportions per CBC subject.

    When ``records`` is given, only their students are counted and each
    student belongs to their destination major (needed for ``by_major``).
    Events that are upper-cycle for their own major are skipped when
    ``levels`` is given.  With ``by_major`` the ALL rows are emitted too,
    over the same population, so per-major rows aggregate back to them.
    """
    if by_major and records is None:
        raise ValueError("by_major needs student records for the destination major")
    major_of = None if records is None else {r.student_id: r.destination_major for r in records}
    cbc_set = set(cbc_set)
    enrolled = defaultdict(set)
    first_exam: dict[tuple[str, str], object] = {}
    first_pass: dict[tuple[str, str], object] = {}
    for e in events:
        code = e.subject_code
        if code not in cbc_set:
            continue
        if major_of is not None and e.student_id not in major_of:
            continue
        if levels is not None and levels.get((code, e.major_id), 1) >= 2:
            continue
        key = (code, e.student_id)
        enrolled[code].add(e.student_id)
        if e.kind != EXAM:
            continue
        cur = first_exam.get(key)
        if cur is None or e.date < cur:
            first_exam[key] = e.date
        if e.result == PASS:
            cur = first_pass.get(key)
            if cur is None or e.date < cur:
                first_pass[key] = e.date

    # (subject, group) -> [enrolled, attempters, passes, months-sum]
    acc = defaultdict(lambda: [0, 0, 0, 0])
    for code, students in enrolled.items():
        for sid in students:
            groups = [ALL] if not by_major else [ALL, major_of[sid]]
            key = (code, sid)
            for g in groups:
                a = acc[(code, g)]
                a[0] += 1
                if key in first_exam:
                    a[1] += 1
                if key in first_pass:
                    a[2] += 1
                    a[3] += months_between(first_exam[key], first_pass[key])
    out = []
    for (code, g), (n_enr, n_att, n_pass, months) in sorted(acc.items()):
        if n_att == 0:
            continue
        out.append(SubjectStats(code, g, n_enr, n_att, n_pass, n_pass / n_att,
                                months / n_pass if n_pass else None))
    return out


# -- dropout hazards and bottleneck scores -----------------------------------------

def subject_dropout_hazard(records, subject: str, min_attempters: int = 50,
                           covariates=HR_COVARIATES, **fit_kw):
    """Cox model of time to CBC dropout among attempters of ``subject``.

    Progression and censoring are both treated as censored; strata are
    destination majors.  The first coefficient is ``failed_any:<subject>``,
    whose hazard ratio is the subject's dropout HR.
    """
    rows = [r for r in records if subject in r.cbc_subjects_attempted]
    n_att = sum(not r.excluded_from_survival for r in rows)
    if n_att < min_attempters:
        raise EstimationError("LOW_ENROLMENT", f"{subject}: {n_att} attempters < {min_attempters}")
    names = [f"failed_any:{subject}"] + list(covariates)
    samples = survival_samples(rows, names, event="dropout")
    X = np.array([s.covariates for s in samples])
    # constant controls say nothing; the failure indicator itself must vary
    keep = [0] + [j for j in range(1, len(names)) if np.ptp(X[:, j]) > 0]
    names = [names[j] for j in keep]
    samples = [s._replace(covariates=tuple(s.covariates[j] for j in keep)) for s in samples]
    return cox_fit(samples, names=names, **fit_kw)


def bottleneck_score(pass_rate: float, hr_dropout: float) -> float:
    """``(1 - pass_rate) * hr_dropout``."""
    if not (isinstance(pass_rate, (int, float)) and 0.0 <= pass_rate <= 1.0):
        raise ValueError(f"pass_rate must lie in [0, 1], got {pass_rate!r}")
    if not (isinstance(hr_dropout, (int, float)) and hr_dropout >= 0.0 and not math.isnan(hr_dropout)):
        raise ValueError(f"hr_dropout must be a non-negative number, got {hr_dropout!r}")
    return (1.0 - pass_rate) * hr_dropout


def bottleneck_table(records, pass_stats, min_attempters: int = 50) -> list[BottleneckScore]:
    """Score every subject with an ALL pass-rate row.

    Subjects whose hazard model cannot be fitted are reported with the
    error code as validity and a NaN score.
    """
    out = []
    for st in pass_stats:
        if st.major_id != ALL:
            continue
        try:
            fit = subject_dropout_hazard(records, st.subject_code, min_attempters)
            hr = fit.ratios[0]
            validity = OK if fit.converged else NON_CONVERGENCE
        except EstimationError as exc:
            hr, validity = float("nan"), exc.code
        score = bottleneck_score(st.pass_rate, float(hr)) if validity == OK else float("nan")
        out.append(BottleneckScore(st.subject_code, st.pass_rate, float(hr), score, validity))
    return out


# -- sentinel scan ------------------------------------------------------------------

def _diverged(result, design, bound):
    """Majors and control columns whose coefficients ran past the separation bound."""
    bad, controls = set(), set()
    ref = design.meta["reference"]
    for name, b in zip(result.names, result.coefficients):
        if abs(b) <= bound:
            continue
        if name in CONTROLS:
            controls.add(name)
        elif name.startswith(FAILED + ":major:"):
            bad.add(name[len(FAILED) + 7:])
        elif name.startswith("major:"):
            bad.add(name[6:])
        elif name in (FAILED, "intercept"):
            bad.add(ref)
    return bad, controls


def _scan_subject(rows, subject, majors, failure, separation_bound):
    """Fit one subject's model until it is valid.

    A control that separates the response is dropped first; otherwise the
    majors whose coefficients diverged are set aside as SEPARATION.
    Returns ``{major: (validity, or, p)}``.
    """
    results = {}
    active = sorted(majors)
    dropped = set()
    while active:
        try:
            design = build_sentinel_design(rows, subject, failure, min_attempts=1, majors=set(active),
                                           drop_controls=dropped)
            fit = logistic_fit(design, separation_bound=separation_bound)
        except SeparationError as exc:
            bad, controls = _diverged(exc.result, design, separation_bound) if exc.result else (set(), set())
            if controls - dropped:
                dropped |= controls
                continue
            bad &= set(active)
            if not bad:
                bad = set(active)
            for m in bad:
                results[m] = (SEPARATION, float("nan"), float("nan"))
            active = [m for m in active if m not in bad]
            continue
        except EstimationError as exc:
            for m in active:
                results[m] = (exc.code, float("nan"), float("nan"))
            break
        for m in active:
            if m != design.meta["reference"] and interaction_column(m) not in design.names:
                results[m] = (NOT_ESTIMABLE, float("nan"), float("nan"))
                continue
            odds, _, p = major_odds_ratio(fit, design, m)
            if not fit.converged:
                validity = NON_CONVERGENCE
            elif math.isfinite(odds) and math.isfinite(p):
                validity = OK
            else:
                validity = NOT_ESTIMABLE
            results[m] = (validity, odds, p)
        break
    return results


def sentinel_scan(records, cbc_subjects, thresholds: SentinelThresholds | None = None,
                  failure: str = "any_attempt", excluded_field_groups=("LANGUAGE",),
                  excluded_subjects=(), separation_bound: float = 15.0) -> list[SentinelFlag]:
    """Evaluate every (subject, destination major) pair and flag sentinels.

    ``cbc_subjects`` maps subject code to metadata with a ``field_group``
    attribute.  Pairs below the attempter threshold are reported as
    LOW_ENROLMENT; majors where nobody or everybody failed as NOT_ESTIMABLE.
    """
    th = thresholds or SentinelThresholds()
    out = []
    for subject in sorted(cbc_subjects):
        meta = cbc_subjects[subject]
        if getattr(meta, "field_group", None) in excluded_field_groups or subject in excluded_subjects:
            continue
        rows = [r for r in records if subject in r.cbc_subjects_attempted]
        by_major = defaultdict(list)
        for r in rows:
            by_major[r.destination_major].append(r)
        stats = {}
        for m, rs in by_major.items():
            failed = np.array([failed_flag(r, subject, failure) for r in rs])
            dropout = np.array([r.cbc_outcome == "DROPOUT_CBC" for r in rs])
            stats[m] = (len(rs), float(failed.mean()), marginal_odds_ratio(failed, dropout))
        eligible = [m for m, (n, prev, _) in stats.items()
                    if n >= th.min_attempters and 0.0 < prev < 1.0]
        fitted = _scan_subject(rows, subject, eligible, failure, separation_bound) if eligible else {}
        for m in sorted(stats):
            n, prev, marg = stats[m]
            if n < th.min_attempters:
                validity, odds, p = LOW_ENROLMENT, float("nan"), float("nan")
            elif m not in fitted:
                validity, odds, p = NOT_ESTIMABLE, float("nan"), float("nan")
            else:
                validity, odds, p = fitted[m]
            out.append(SentinelFlag(subject, m, n, prev, odds, p, marg,
                                    th.passes(prev, odds, p, validity), validity))
    return out


def or_heatmap(flags) -> list[tuple[str, str, float, str]]:
    """``(subject, major, log_or, validity)`` rows; log-OR is NaN unless validity is OK."""
    rows = []
    for f in flags:
        ok = f.validity == OK and f.odds_ratio > 0
        rows.append((f.subject_code, f.major_id, math.log(f.odds_ratio) if ok else float("nan"),
                     f.validity))
    return rows
