from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbcfilter.errors import TrajectoryError
from cbcfilter.transitions import (ALL, NO_HORIZON, initial_to_destination_flows, multi_major_outcomes,
                                   outcome_at_horizon, transition_matrix)
from cbcfilter.trajectory import CENSORED, DROPOUT_CBC, UNKNOWN, UPPER_DESTINATION_MAJOR, UPPER_OTHER_MAJOR

OUTCOMES = (UPPER_DESTINATION_MAJOR, UPPER_OTHER_MAJOR, DROPOUT_CBC, CENSORED)
MAJORS = ("CIV", "COMP", "PROG")


def rec(outcome, t, dest="CIV", initial=None, cohort="POST_2006", n_majors=1):
    return SimpleNamespace(cbc_outcome=outcome, time_to_event=t, destination_major=dest,
                           initial_major=initial or dest, cohort=cohort, n_majors_during_cbc=n_majors)


records_st = st.lists(st.builds(
    rec, st.sampled_from(OUTCOMES), st.integers(0, 120), st.sampled_from(MAJORS),
    st.sampled_from(MAJORS + (UNKNOWN,)), st.sampled_from(("PRE_2006", "POST_2006")), st.integers(1, 4),
), min_size=1, max_size=80)


def proportions(row):
    return (row.p_upper_same, row.p_upper_other, row.p_dropout, row.p_censored)


@settings(max_examples=100, deadline=None)
@given(records_st, st.sampled_from([0, 12, 36, NO_HORIZON]), st.sampled_from(["destination_major", "initial_major"]),
       st.booleans())
def test_rows_sum_to_one(records, horizon, group_by, split):
    rows = transition_matrix(records, horizon, group_by, split)
    assert sum(r.n for r in rows) == len(records)
    for r in rows:
        assert r.n > 0 and abs(sum(proportions(r)) - 1) < 1e-12


@settings(max_examples=50, deadline=None)
@given(records_st)
def test_infinite_horizon_reproduces_raw_outcomes(records):
    (row,) = transition_matrix([rec(r.cbc_outcome, r.time_to_event) for r in records], NO_HORIZON,
                               split_cohort=False)
    outcomes = [r.cbc_outcome for r in records]
    n = len(outcomes)
    assert proportions(row) == (outcomes.count(UPPER_DESTINATION_MAJOR) / n, outcomes.count(UPPER_OTHER_MAJOR) / n,
                                outcomes.count(DROPOUT_CBC) / n, outcomes.count(CENSORED) / n)


@settings(max_examples=50, deadline=None)
@given(records_st)
def test_flow_total_is_record_count(records):
    flows = initial_to_destination_flows(records)
    assert flows.total == len(records)
    sums = flows.proportions.sum(axis=1)
    assert np.allclose(sums[flows.counts.sum(axis=1) > 0], 1, atol=1e-12)


def test_horizon_zero_censors_everything():
    records = [rec(DROPOUT_CBC, 40), rec(UPPER_DESTINATION_MAJOR, 20), rec(CENSORED, 10)]
    (row,) = transition_matrix(records, 0, split_cohort=False)
    assert row.p_censored == 1 and row.cohort == ALL


def test_exit_after_horizon_is_censored():
    assert outcome_at_horizon(rec(UPPER_DESTINATION_MAJOR, 40), 36) == CENSORED
    assert outcome_at_horizon(rec(UPPER_DESTINATION_MAJOR, 36), 36) == UPPER_DESTINATION_MAJOR


def test_initial_grouping_counts_switchers_as_other():
    records = [rec(UPPER_DESTINATION_MAJOR, 30, "COMP", "PROG"), rec(UPPER_DESTINATION_MAJOR, 30, "PROG")]
    rows = {r.group: r for r in transition_matrix(records, 36, "initial_major", split_cohort=False)}
    assert rows["PROG"].p_upper_other == 0.5 and rows["PROG"].p_upper_same == 0.5


def test_empty_dataset_is_fatal():
    with pytest.raises(TrajectoryError):
        transition_matrix([])
    with pytest.raises(ValueError):
        transition_matrix([rec(CENSORED, 1)], group_by="cohort")


def test_single_major_dataset():
    records = [rec(DROPOUT_CBC, 20), rec(CENSORED, 30), rec(UPPER_DESTINATION_MAJOR, 25)]
    (row,) = multi_major_outcomes(records)
    assert row.n_majors == 1 and row.proportion_students == 1 and row.proportion_dropout == pytest.approx(1 / 3)


def test_multi_major_rows():
    records = [rec(DROPOUT_CBC, 20), rec(DROPOUT_CBC, 20, n_majors=2), rec(UPPER_DESTINATION_MAJOR, 25, n_majors=2)]
    one, two = multi_major_outcomes(records)
    assert (one.n_students, two.n_students) == (1, 2)
    assert two.proportion_dropout == 0.5 and two.proportion_upper_same == 0.5


def test_pure_stayers_give_a_diagonal_matrix():
    records = [rec(CENSORED, 5, m) for m in MAJORS for _ in range(3)]
    flows = initial_to_destination_flows(records)
    assert np.array_equal(flows.counts, 3 * np.eye(3, dtype=int)) and flows.diagonal_mass == 1


def test_one_switcher_cell():
    records = [rec(CENSORED, 5, m) for m in MAJORS] + [rec(CENSORED, 5, "COMP", "PROG")]
    flows = initial_to_destination_flows(records)
    assert flows.count("PROG", "COMP") == 1
    assert ("PROG", "COMP", 1, 0.5) in flows.to_rows()


def test_unknown_initial_major_is_last_row():
    flows = initial_to_destination_flows([rec(CENSORED, 5, "CIV", UNKNOWN), rec(CENSORED, 5, "CIV")])
    assert flows.initial == ("CIV", UNKNOWN) and flows.diagonal == 1
