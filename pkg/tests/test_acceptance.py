"""Acceptance gate: every criterion at its stated tolerance, one report line each.

The lines are printed as the tests run (visible with ``-s``) and again in a
"acceptance criteria" section at the end of the pytest summary.
"""
import hashlib
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from cbcfilter.bottleneck import OK, bottleneck_score, sentinel_scan, subject_dropout_hazard
from cbcfilter.cli import ANALYSES, main
from cbcfilter.errors import EstimationError, SeparationError
from cbcfilter.glm import DesignMatrix, logistic_fit
from cbcfilter.ingest import classify_cbc_subjects
from cbcfilter.survival import CoxData, cox_fit_arrays, cox_loglik, kaplan_meier, km_estimate, survival_samples
from cbcfilter.synth import COHORTS, calibrated_config, simulate_records
from cbcfilter.transitions import NO_HORIZON, multi_major_outcomes, transition_matrix

from conftest import report_criterion
from oracles import breslow_loglik, central_gradient, logistic_newton, maximise_1d, product_limit


# -- 1. Kaplan-Meier --------------------------------------------------------------

def test_criterion_1_kaplan_meier_oracle():
    rng = np.random.default_rng(2024)
    instances = []
    for _ in range(200):
        n = int(rng.integers(1, 51))
        instances.append((rng.integers(0, 40, n).astype(float), rng.random(n) < rng.uniform(0.2, 0.9)))
    start = time.perf_counter()
    fits = [km_estimate(t, e) for t, e in instances]
    elapsed = time.perf_counter() - start
    worst, shape_ok = 0.0, True
    for (t, e), km in zip(instances, fits):
        ref = product_limit(t, e)
        shape_ok &= [r[:3] for r in ref] == [tuple(s[:3]) for s in km.steps]
        worst = max(worst, max(abs(r[3] - s) for r, s in zip(ref, km.survival)))
    ok = shape_ok and worst < 1e-12 and elapsed < 1.0
    report_criterion(1, "KM oracle equivalence", ok,
                     f"200 instances, max|dS|={worst:.1e} (<1e-12), steps match={shape_ok}, "
                     f"runtime {elapsed:.3f}s (<1s)")
    assert ok


# -- 2. Cox ---------------------------------------------------------------------------

def _cox_instance(rng, n, p, strata=1):
    t = rng.integers(1, 10, n).astype(float)
    e = rng.random(n) < 0.7
    e[0] = True
    return t, e, rng.normal(size=(n, p)), rng.integers(0, strata, n)


def test_criterion_2_cox_correctness():
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    # (a) score vector against central finite differences of the log-likelihood
    grad_err = 0.0
    for _ in range(100):
        t, e, X, g = _cox_instance(rng, int(rng.integers(5, 40)), int(rng.integers(1, 4)), strata=2)
        data = CoxData.build(t, e, X, g)
        beta = rng.normal(scale=0.5, size=X.shape[1])
        grad = cox_loglik(beta, data)[1]
        num = central_gradient(lambda b: cox_loglik(b, data, derivatives=False)[0], beta)
        grad_err = max(grad_err, float(np.max(np.abs(grad - num)) / max(1.0, np.max(np.abs(num)))))
    # (b) one covariate against grid search plus bisection on the independent log-likelihood
    beta_err, n_b = 0.0, 0
    cases = [([1, 2, 3, 4, 5, 6], [1, 1, 0, 1, 1, 1], [1, 0, 1, 1, 0, 0])]
    while len(cases) < 8:
        t, e, X, _ = _cox_instance(rng, 25, 1)
        cases.append((t, e, X[:, 0]))
    for t, e, x in cases:
        x = np.asarray(x, float)
        try:
            fit = cox_fit_arrays(t, e, x[:, None])
        except EstimationError:
            continue
        ref = maximise_1d(lambda b: breslow_loglik([b], t, e, x), grid=801)
        beta_err = max(beta_err, abs(fit.coefficients[0] - ref))
        n_b += 1
    # (c) a single explicit stratum is the unstratified model
    strat_err = 0.0
    for _ in range(10):
        t, e, X, _ = _cox_instance(rng, 60, 2)
        a = cox_fit_arrays(t, e, X)
        b = cox_fit_arrays(t, e, X, strata=["s"] * len(t))
        strat_err = max(strat_err, float(np.max(np.abs(a.coefficients - b.coefficients))))
    elapsed = time.perf_counter() - start
    ok = grad_err < 1e-6 and n_b == len(cases) and beta_err < 1e-6 and strat_err < 1e-8 and elapsed < 10
    report_criterion(2, "Cox correctness", ok,
                     f"(a) gradient rel err {grad_err:.1e} (<1e-6); (b) {n_b} fits, max|dbeta|={beta_err:.1e} "
                     f"(<1e-6); (c) stratified vs unstratified {strat_err:.1e} (<1e-8); runtime {elapsed:.2f}s (<10s)")
    assert ok


# -- 3. logistic ----------------------------------------------------------------------

def test_criterion_3_logistic_correctness():
    rng = np.random.default_rng(99)
    coef_err, score_err, fitted, flagged_random = 0.0, 0.0, 0, 0
    while fitted + flagged_random < 100:
        n = int(rng.integers(20, 201))
        p = int(rng.integers(1, 6))
        X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
        y = (rng.random(n) < 1 / (1 + np.exp(-(X @ rng.normal(scale=0.8, size=p))))).astype(float)
        if y.min() == y.max():
            continue
        try:
            fit = logistic_fit(DesignMatrix(X, y, [f"x{j}" for j in range(p)]))
        except SeparationError:
            flagged_random += 1
            continue
        fitted += 1
        mu = 1 / (1 + np.exp(-(X @ fit.coefficients)))
        score_err = max(score_err, abs(mu.sum() - y.sum()))
        coef_err = max(coef_err, float(np.max(np.abs(fit.coefficients - logistic_newton(X, y)))))
    # forced separation: complete and quasi-complete
    separated = []
    for k in range(10):
        n = 30 + 10 * k
        x = rng.normal(size=n)
        y = (x > 0).astype(float)
        if k % 2:
            # quasi-complete: both classes share only the boundary value 0
            x = np.where(y == 1, np.abs(x), -np.abs(x))
            x[:4] = 0.0
            y[:4] = [0, 1, 0, 1]
        X = np.column_stack([np.ones(n), x])
        try:
            logistic_fit(DesignMatrix(X, y, ["intercept", "x"]))
            separated.append(False)
        except SeparationError:
            separated.append(True)
    ok = fitted >= 90 and coef_err < 1e-6 and score_err < 1e-8 and all(separated)
    report_criterion(3, "logistic correctness", ok,
                     f"{fitted} fits (+{flagged_random} flagged separated), max|dbeta| vs Newton {coef_err:.1e} "
                     f"(<1e-6), max|sum p - sum y|={score_err:.1e} (<1e-8), forced separation flagged "
                     f"{sum(separated)}/{len(separated)}")
    assert ok


# -- 4. plant and recover ----------------------------------------------------------------

def _plant_base():
    return replace(calibrated_config(), n_students=5000, target_events=None, target_registrations=None,
                   dropout_hazard_multiplier_on_failure={}, failure_multiplier_by_major={})


def test_criterion_4_plant_and_recover():
    base = _plant_base()
    hr_lines, hr_ok = [], True
    for planted in (1.5, 2.5, 4.0):
        for seed in (101, 102, 103):
            records = simulate_records(replace(base, seed=seed,
                                               dropout_hazard_multiplier_on_failure={"ALG": planted}))
            hr = float(subject_dropout_hazard(records, "ALG").ratios[0])
            hr_ok &= abs(hr / planted - 1) <= 0.30
            hr_lines.append(f"{planted}->{hr:.2f}")
    mix = {c: {m: (0.7 if m == "PROG" else 0.3 / (len(base.majors()) - 1)) for m in base.majors()}
           for c in COHORTS}
    cbc = classify_cbc_subjects(base.catalog)
    sent_lines, sent_ok = [], True
    for seed in (201, 202, 203):
        cfg = replace(base, seed=seed, major_mix=mix, failure_multiplier_by_major={"CAL1": {"PROG": 3.96}})
        flags = sentinel_scan(simulate_records(cfg), cbc)
        (f,) = [x for x in flags if (x.subject_code, x.major_id) == ("CAL1", "PROG")]
        sent_ok &= f.is_sentinel and abs(f.odds_ratio / 3.96 - 1) <= 0.25
        sent_lines.append(f"OR {f.odds_ratio:.2f} prev {f.failure_prevalence:.2f} n {f.n_attempters} "
                          f"sentinel={f.is_sentinel}")
    ok = hr_ok and sent_ok
    report_criterion(4, "plant and recover", ok,
                     f"HR (within 30%): {', '.join(hr_lines)}; CAL1/PROG planted 3.96 (within 25%): "
                     f"{'; '.join(sent_lines)}")
    assert ok


# -- 5. tables on the calibrated cohort -------------------------------------------------------

def test_criterion_5_table_reproduction(calibrated_records):
    records = calibrated_records
    n = len(records)
    overall = sum(r.cbc_outcome == "DROPOUT_CBC" for r in records) / n
    by_n = {row.n_majors: row.proportion_dropout for row in multi_major_outcomes(records)}
    prog_pre = [r for r in transition_matrix(records, NO_HORIZON) if (r.group, r.cohort) == ("PROG", "PRE_2006")]
    median = kaplan_meier(survival_samples(records)).median
    checks = {
        "n": n == 24017,
        "overall": abs(overall - 0.60) <= 0.03,
        "by_n_majors": all(abs(by_n.get(k, np.nan) - v) <= 0.05 for k, v in ((1, 0.64), (2, 0.47), (3, 0.46))),
        "decreasing": by_n[1] > by_n[2],
        "prog_pre": bool(prog_pre) and abs(prog_pre[0].p_dropout - 0.805) <= 0.03,
        "median": median is not None and abs(median - 24) <= 4,
    }
    ok = all(checks.values())
    report_criterion(5, "table reproduction", ok,
                     f"n={n}; overall dropout {overall:.4f} (0.60+-0.03); by n_majors "
                     f"{by_n[1]:.3f}/{by_n[2]:.3f}/{by_n.get(3, float('nan')):.3f} (0.64/0.47/0.46 +-0.05, "
                     f"decreasing={checks['decreasing']}); PROG PRE {prog_pre[0].p_dropout if prog_pre else None:.3f} "
                     f"(0.805+-0.03); KM median {median} (24+-4)")
    assert ok


# -- 6. structural invariants --------------------------------------------------------------

def test_criterion_6_structural_invariants(calibrated_cohort):
    cfg, _, records = calibrated_cohort
    row_err = 0.0
    n_rows = 0
    for horizon in (0, 12, 36, NO_HORIZON):
        for group_by in ("destination_major", "initial_major"):
            for split in (True, False):
                for r in transition_matrix(records, horizon, group_by, split):
                    row_err = max(row_err, abs(r.p_upper_same + r.p_upper_other + r.p_dropout + r.p_censored - 1))
                    n_rows += 1
    zero = all(bottleneck_score(1.0, h) == 0.0 for h in (0.0, 0.5, 1.0, 2.5, 1e6))
    flags = sentinel_scan(records, classify_cbc_subjects(cfg.catalog))
    mismatched = [f for f in flags if f.is_sentinel != (
        f.validity == OK and f.failure_prevalence >= 0.10 and f.odds_ratio >= 2.0 and f.p_value <= 0.01)]
    ok = row_err <= 1e-12 and zero and not mismatched
    report_criterion(6, "structural invariants", ok,
                     f"{n_rows} transition rows, max|sum-1|={row_err:.1e} (<=1e-12); bottleneck_score(1, h)=0: "
                     f"{zero}; sentinel flag = threshold conjunction on {len(flags) - len(mismatched)}/{len(flags)} "
                     f"rows ({sum(f.is_sentinel for f in flags)} sentinels)")
    assert ok


# -- 7. performance and byte identity ---------------------------------------------------------

def _pipeline(root: Path):
    data, out = root / "data", root / "out"
    t0 = time.perf_counter()
    assert main(["synth", "--seed", "42", "--out-dir", str(data)]) == 0
    assert main(["build", "--config", str(data / "run_config.json"), "--out-dir", str(out)]) == 0
    rc = main(["analyze", "all", "--config", str(data / "run_config.json"), "--out-dir", str(out),
               "--records", str(out / "student_records.csv")])
    elapsed = time.perf_counter() - t0
    assert rc in (0, 1)
    files = sorted(p for d in (data, out) for p in d.iterdir() if p.name != "manifest.json")
    return elapsed, {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest() for p in files}


def test_criterion_7_performance_and_determinism(tmp_path):
    t1, h1 = _pipeline(tmp_path / "run1")
    t2, h2 = _pipeline(tmp_path / "run2")
    n_events = sum(1 for _ in open(tmp_path / "run1" / "data" / "events.csv")) - 1
    expected = {"km.csv", "cox.json", "pass_rates.csv", "bottlenecks.csv", "sentinels.csv", "transitions.csv",
                "flows.csv"}
    produced = {Path(k).name for k in h1}
    ok = max(t1, t2) < 60 and h1 == h2 and expected <= produced
    report_criterion(7, "performance and byte identity", ok,
                     f"synth->build->analyze all on {n_events} events: {t1:.1f}s and {t2:.1f}s (<60s); "
                     f"{len(h1)} artifacts byte-identical={h1 == h2}; analyses {len(ANALYSES)}")
    assert ok
