"""
Sentinel subjects and movement between majors
=============================================

Scan every (subject, destination major) pair for a failure that sharply
raises the odds of leaving, then tabulate outcomes at three years and the
flows from initial to destination major.
"""

import math

from cbcfilter.bottleneck import OK, sentinel_scan
from cbcfilter.ingest import classify_cbc_subjects
from cbcfilter.synth import calibrated_config, simulate_records
from cbcfilter.transitions import initial_to_destination_flows, multi_major_outcomes, transition_matrix

cfg = calibrated_config().with_students(10000)
records = simulate_records(cfg)

# sentinel = prevalence >= 0.10, adjusted OR >= 2 and p <= 0.01, fitted without problems
flags = sentinel_scan(records, classify_cbc_subjects(cfg.catalog))
print(f"{len(flags)} pairs evaluated, {sum(f.validity == OK for f in flags)} fitted cleanly")
print("subject major  n     prev   OR     p")
for f in flags:
    if f.is_sentinel:
        print(f"{f.subject_code:7s} {f.major_id:5s} {f.n_attempters:5d} {f.failure_prevalence:.2f} "
              f"{f.odds_ratio:6.2f} {f.p_value:.1e}")

# outcomes at a 36-month horizon; later exits count as still enrolled
print("\nmajor cohort       n    upper  dropout  censored")
for row in transition_matrix(records, 36):
    print(f"{row.group:5s} {row.cohort:9s} {row.n:5d}  {row.p_upper_same + row.p_upper_other:.3f}   "
          f"{row.p_dropout:.3f}    {row.p_censored:.3f}")

# more majors held during the CBC goes with less dropout
print("\nmajors  students  share  dropout")
for row in multi_major_outcomes(records):
    print(f"{row.n_majors:6d}  {row.n_students:8d}  {row.proportion_students:.3f}  {row.proportion_dropout:.3f}")

flows = initial_to_destination_flows(records)
print(f"\nstayers: {flows.diagonal} of {flows.total} ({flows.diagonal_mass:.1%})")
moves = sorted((r for r in flows.to_rows() if r[0] != r[1]), key=lambda r: -r[2])[:5]
for a, b, n, share in moves:
    print(f"  {a} -> {b}: {n} ({share:.1%} of {a})")
assert math.isclose(flows.proportions.sum(axis=1)[flows.counts.sum(axis=1) > 0].mean(), 1.0)
