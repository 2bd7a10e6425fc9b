"""Examples stated against the calibrated synthetic cohort (seed 42, 24,017 students)."""
from dataclasses import replace

import pytest

from cbcfilter.bottleneck import subject_dropout_hazard
from cbcfilter.survival import kaplan_meier, km_by_stratum, survival_samples
from cbcfilter.synth import calibrated_config, simulate_records
from cbcfilter.transitions import initial_to_destination_flows, multi_major_outcomes, transition_matrix


def test_size_and_dropout_share(calibrated_records):
    drop = sum(r.cbc_outcome == "DROPOUT_CBC" for r in calibrated_records) / len(calibrated_records)
    assert len(calibrated_records) == 24017 and drop > 0.60


def test_exit_time_quartiles(calibrated_records):
    km = kaplan_meier(survival_samples(calibrated_records))
    q25, q75 = km.quartiles
    assert abs(km.median - 24) <= 4
    assert 18 <= q25 and q75 <= 30


def test_electronics_retains_longest(calibrated_records):
    curves = km_by_stratum(calibrated_records)
    at_100 = {m: km.survival_at(100) for m, km in curves.items() if m != "OTHER"}
    below = sum(v < at_100["ELN"] for m, v in at_100.items() if m != "ELN")
    assert below > (len(at_100) - 1) / 2


@pytest.mark.parametrize("subject", ["CAL1", "ALG"])
def test_math_failure_hazard_ratio(calibrated_records, subject):
    hr = subject_dropout_hazard(calibrated_records, subject).ratios[0]
    assert 2.0 <= hr <= 3.0


def test_outcomes_by_number_of_majors(calibrated_records):
    rows = {r.n_majors: r for r in multi_major_outcomes(calibrated_records)}
    assert abs(rows[1].proportion_students - 0.88) <= 0.02
    assert abs(rows[1].proportion_dropout - 0.64) <= 0.03
    assert abs(rows[2].proportion_dropout - 0.47) <= 0.03


def test_programmer_pre_reform_dropout(calibrated_records):
    (row,) = [r for r in transition_matrix(calibrated_records, float("inf"))
              if (r.group, r.cohort) == ("PROG", "PRE_2006")]
    assert abs(row.p_dropout - 0.805) <= 0.03


def test_most_students_keep_their_major(calibrated_records):
    assert initial_to_destination_flows(calibrated_records).diagonal_mass > 0.95


@pytest.mark.parametrize("seed", [101, 102, 103])
def test_planted_algebra_multiplier(seed):
    cfg = replace(calibrated_config(), n_students=5000, seed=seed, target_events=None, target_registrations=None,
                  dropout_hazard_multiplier_on_failure={"ALG": 2.5}, failure_multiplier_by_major={})
    hr = subject_dropout_hazard(simulate_records(cfg), "ALG").ratios[0]
    assert 2.0 <= hr <= 3.1
