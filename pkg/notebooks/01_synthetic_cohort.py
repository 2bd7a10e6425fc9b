"""
A calibrated synthetic faculty
==============================

Generate the shipped calibrated cohort, build one record per student and
compare the headline aggregates with the values the generator was tuned to.
Run from the repository root:  python3 notebooks/01_synthetic_cohort.py
"""

import time

from cbcfilter.synth import (calibrated_config, cohort_aggregates, generate_cohort, published_targets,
                             trajectory_config)
from cbcfilter.trajectory import build_dataset

# the shipped configuration: 24,017 students, seed 42
cfg = calibrated_config()
t0 = time.perf_counter()
cohort = generate_cohort(cfg)
print(f"generated {len(cohort.student_ids)} students, {cohort.n_events} events, "
      f"{cohort.n_registrations} registrations in {time.perf_counter() - t0:.1f}s")

# events -> student records (outcome, exit time, majors, CBC performance)
records, summary = build_dataset(*cohort.triple(), trajectory_config(cfg))
print("population:", summary.to_dict())

# aggregates against the calibration targets
agg = cohort_aggregates(records)
targets = published_targets()
print(f"\noverall dropout   {agg['overall_dropout']:.3f}   target {targets.overall_dropout}")
print(f"median exit       {agg['median_exit_months']}      target {targets.median_exit_months}")
for k, want in sorted(targets.dropout_by_n_majors.items()):
    got = agg["dropout_by_n_majors"].get(k)
    print(f"dropout, {k} major(s): {got:.3f}   target {want}")

print("\ndropout by destination major and entry cohort (achieved / target)")
for major, by_cohort in sorted(targets.dropout_by_major_cohort.items()):
    cells = []
    for c, want in sorted(by_cohort.items()):
        got = agg["dropout_by_major_cohort"].get(major, {}).get(c)
        cells.append(f"{c}: {'-' if got is None else f'{got:.3f}'} / {want:.3f}")
    print(f"  {major:5s} " + "   ".join(cells))
