"""
Time to exit and bottleneck subjects
====================================

Kaplan-Meier curves by destination major, the stratified exit model, and
the subject-level bottleneck score (share failing times the dropout hazard
ratio for failing it).
"""

from cbcfilter.bottleneck import bottleneck_table, subject_pass_rates
from cbcfilter.ingest import classify_cbc_subjects, level_map
from cbcfilter.survival import fit_exit_model, km_by_stratum
from cbcfilter.synth import calibrated_config, generate_cohort, trajectory_config
from cbcfilter.trajectory import build_dataset

# a third of the full cohort keeps this quick
cfg = calibrated_config().with_students(8000)
cohort = generate_cohort(cfg)
events, regs, catalog = cohort.triple()
records, _ = build_dataset(events, regs, catalog, trajectory_config(cfg))

# survival in the CBC by destination major; small majors are pooled as OTHER
curves = km_by_stratum(records)
print("major   n_steps  median  q25  q75  S(100)")
for major, km in sorted(curves.items()):
    q25, q75 = km.quartiles
    print(f"{major:6s} {len(km.times):7d}  {km.median!s:6s} {q25!s:4s} {q75!s:4s} {km.survival_at(100):.3f}")

# exit model: any exit from the CBC, stratified by destination major
fit = fit_exit_model(records)
print("\nexit model (hazard ratios)")
for name, hr, p in zip(fit.names, fit.ratios, fit.p_values):
    print(f"  {name:32s} {hr:7.3f}   p={p:.2g}")

# pass rates over the faculty, then bottleneck scores
cbc = classify_cbc_subjects(catalog)
stats = subject_pass_rates(events, cbc, records=records, levels=level_map(catalog))
scores = bottleneck_table(records, stats)
print("\nsubject  pass_rate  HR_dropout  score")
for s in sorted(scores, key=lambda s: -s.score if s.score == s.score else 0):
    print(f"{s.subject_code:8s} {s.pass_rate:9.3f}  {s.hr_dropout:10.3f}  {s.score:5.3f}  {s.validity}")

# a single-cohort dataset has no cohort contrast, so that term is dropped
post = [r for r in records if r.cohort == "POST_2006"]
post_fit = fit_exit_model(post, cohort_encoding="none")
print(f"\npost-reform records: {len(post)}")
for name, hr in zip(post_fit.names, post_fit.ratios):
    print(f"  {name:32s} {hr:7.3f}")
