"""Outcome transition tables, multi-major summaries and initial-to-destination flows."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import TrajectoryError
from .trajectory import CENSORED, DROPOUT_CBC, UNKNOWN, UPPER_DESTINATION_MAJOR, UPPER_OTHER_MAJOR

ALL = "ALL"
NO_HORIZON = math.inf


@dataclass(frozen=True)
class TransitionRow:
    group: str
    cohort: str
    n: int
    p_upper_same: float
    p_upper_other: float
    p_dropout: float
    p_censored: float


def outcome_at_horizon(record, horizon_months=NO_HORIZON) -> str:
    """The record's outcome, re-censored when its exit falls after the horizon."""
    if record.cbc_outcome != CENSORED and record.time_to_event > horizon_months:
        return CENSORED
    return record.cbc_outcome


def _row(group, cohort, outcomes):
    n = len(outcomes)
    c = defaultdict(int)
    for o in outcomes:
        c[o] += 1
    return TransitionRow(group, cohort, n, c["same"] / n, c["other"] / n, c[DROPOUT_CBC] / n,
                         c[CENSORED] / n)


def transition_matrix(records, horizon_months=36, group_by: str = "destination_major",
                      split_cohort: bool = True) -> list[TransitionRow]:
    """Outcome proportions per major (and cohort) at a fixed horizon.

    Grouped by destination major, "same" and "other" follow the outcome
    codes.  Grouped by initial major, an upper-cycle exit counts as "same"
    when the destination equals the initial major.  ``horizon_months=inf``
    reproduces the raw outcomes.
    """
    if group_by not in ("destination_major", "initial_major"):
        raise ValueError(f"unknown grouping {group_by!r}")
    records = list(records)
    if not records:
        raise TrajectoryError("EMPTY_POPULATION", "transition matrix of an empty dataset")
    groups = defaultdict(list)
    for r in records:
        o = outcome_at_horizon(r, horizon_months)
        if o in (UPPER_DESTINATION_MAJOR, UPPER_OTHER_MAJOR):
            if group_by == "destination_major":
                o = "same" if o == UPPER_DESTINATION_MAJOR else "other"
            else:
                o = "same" if r.destination_major == r.initial_major else "other"
        key = getattr(r, group_by)
        groups[(key, r.cohort if split_cohort else ALL)].append(o)
    return [_row(g, c, groups[(g, c)]) for g, c in sorted(groups)]


@dataclass(frozen=True)
class MultiMajorRow:
    n_majors: int
    n_students: int
    proportion_students: float
    proportion_dropout: float
    proportion_upper_same: float
    proportion_upper_other: float
    proportion_censored: float


def multi_major_outcomes(records, horizon_months=NO_HORIZON) -> list[MultiMajorRow]:
    """Outcome proportions by the number of majors held during the CBC."""
    records = list(records)
    total = len(records)
    groups = defaultdict(list)
    for r in records:
        groups[r.n_majors_during_cbc].append(outcome_at_horizon(r, horizon_months))
    out = []
    for k in sorted(groups):
        os_ = groups[k]
        n = len(os_)
        out.append(MultiMajorRow(
            k, n, n / total,
            os_.count(DROPOUT_CBC) / n,
            os_.count(UPPER_DESTINATION_MAJOR) / n,
            os_.count(UPPER_OTHER_MAJOR) / n,
            os_.count(CENSORED) / n,
        ))
    return out


@dataclass(frozen=True)
class FlowMatrix:
    initial: tuple[str, ...]
    destination: tuple[str, ...]
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def proportions(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)

    @property
    def diagonal(self) -> int:
        col = {m: j for j, m in enumerate(self.destination)}
        return int(sum(self.counts[i, col[m]] for i, m in enumerate(self.initial) if m in col))

    @property
    def diagonal_mass(self) -> float:
        return self.diagonal / self.total if self.total else float("nan")

    def count(self, initial: str, destination: str) -> int:
        if initial not in self.initial or destination not in self.destination:
            return 0
        return int(self.counts[self.initial.index(initial), self.destination.index(destination)])

    def to_rows(self):
        """Long-form ``(initial, destination, count, row_proportion)`` for non-empty cells."""
        prop = self.proportions
        return [
            (a, b, int(self.counts[i, j]), float(prop[i, j]))
            for i, a in enumerate(self.initial)
            for j, b in enumerate(self.destination)
            if self.counts[i, j]
        ]


def initial_to_destination_flows(records) -> FlowMatrix:
    """Counts of initial major by destination major; UNKNOWN initial majors get their own row."""
    records = list(records)
    initial = sorted({r.initial_major for r in records} - {UNKNOWN})
    if any(r.initial_major == UNKNOWN for r in records):
        initial.append(UNKNOWN)
    dest = sorted({r.destination_major for r in records})
    ri = {m: i for i, m in enumerate(initial)}
    ci = {m: j for j, m in enumerate(dest)}
    counts = np.zeros((len(initial), len(dest)), dtype=np.int64)
    for r in records:
        counts[ri[r.initial_major], ci[r.destination_major]] += 1
    return FlowMatrix(tuple(initial), tuple(dest), counts)
