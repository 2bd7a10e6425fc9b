import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbcfilter.errors import EstimationError, SeparationError
from cbcfilter.glm import (FAILED, DesignMatrix, build_sentinel_design, dependent_columns, interaction_column,
                           linear_combination, logistic_fit, major_column, marginal_odds_ratio)

from oracles import logistic_newton


def design(X, y, names=None):
    X = np.asarray(X, float)
    return DesignMatrix(X, y, names or [f"x{j}" for j in range(X.shape[1])])


def test_balanced_table_without_association():
    x = [0, 0, 1, 1] * 5
    y = [0, 1, 0, 1] * 5
    fit = logistic_fit(design(np.column_stack([np.ones(20), x]), y, ["intercept", "x"]))
    assert abs(fit.coefficients[1]) < 1e-10 and abs(fit.ratios[1] - 1) < 1e-10


def test_small_dataset_against_newton_oracle():
    rng = np.random.default_rng(11)
    X = np.column_stack([np.ones(20), rng.normal(size=20), rng.normal(size=20)])
    y = (rng.random(20) < 1 / (1 + np.exp(-(X @ [0.2, 1.0, -0.5])))).astype(float)
    fit = logistic_fit(design(X, y))
    assert np.max(np.abs(fit.coefficients - logistic_newton(X, y))) < 1e-6


def test_separation_is_flagged():
    x = np.arange(10.0)
    y = (x > 4.5).astype(float)
    with pytest.raises(SeparationError) as exc:
        logistic_fit(design(np.column_stack([np.ones(10), x]), y))
    assert exc.value.code == "SEPARATION" and exc.value.result is not None


def test_degenerate_inputs():
    X = np.column_stack([np.ones(6), [1, 2, 3, 4, 5, 6]])
    with pytest.raises(EstimationError) as exc:
        logistic_fit(design(X, np.ones(6)))
    assert exc.value.code == "SINGLE_CLASS"
    X = np.column_stack([np.ones(6), [1, 2, 3, 4, 5, 6], [2, 4, 6, 8, 10, 12]])
    assert dependent_columns(X, ["a", "b", "c"]) == ["c"]
    with pytest.raises(EstimationError) as exc:
        logistic_fit(design(X, [0, 1, 0, 1, 1, 0]))
    assert exc.value.code == "RANK_DEFICIENT"
    with pytest.raises(ValueError):
        design(X, [0, 2, 0, 1, 1, 0])


@st.composite
def instances(draw):
    seed = draw(st.integers(0, 2 ** 32 - 1))
    rng = np.random.default_rng(seed)
    n = int(rng.integers(30, 201))
    p = int(rng.integers(1, 6))
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))]) if p > 1 else np.ones((n, 1))
    beta = rng.normal(scale=0.7, size=p)
    y = (rng.random(n) < 1 / (1 + np.exp(-(X @ beta)))).astype(float)
    return X, y


@settings(max_examples=60, deadline=None)
@given(instances())
def test_score_identity_and_oracle(inst):
    X, y = inst
    if y.min() == y.max():
        return
    try:
        fit = logistic_fit(design(X, y))
    except SeparationError:
        return
    p = 1 / (1 + np.exp(-(X @ fit.coefficients)))
    assert abs(p.sum() - y.sum()) < 1e-8
    assert np.max(np.abs(fit.coefficients - logistic_newton(X, y))) < 1e-6
    assert all(b >= a - 1e-9 for a, b in zip(fit.history, fit.history[1:]))


def test_linear_combination_of_one_coefficient():
    rng = np.random.default_rng(3)
    X = np.column_stack([np.ones(80), rng.normal(size=80)])
    y = (rng.random(80) < 0.4).astype(float)
    fit = logistic_fit(design(X, y, ["intercept", "x"]))
    est, se, p = linear_combination(fit, {"x": 1.0})
    assert est == fit.coefficients[1] and se == pytest.approx(fit.standard_errors[1])
    assert p == pytest.approx(fit.p_values[1])


def test_marginal_odds_ratio():
    failed = [1, 1, 1, 0, 0, 0, 0, 0]
    drop = [1, 1, 0, 1, 0, 0, 0, 0]
    assert marginal_odds_ratio(failed, drop) == pytest.approx((2 * 4) / (1 * 1))
    assert math.isfinite(marginal_odds_ratio([1, 1, 0, 0], [1, 1, 0, 0]))


def record(major, failed, outcome, pass_rate=0.5, grade=6.0, year=2010, attempted=True):
    return SimpleNamespace(
        destination_major=major, cbc_outcome=outcome, cbc_pass_rate=pass_rate, cbc_mean_grade=grade,
        entry_year=year, cbc_subjects_attempted=frozenset({"S"} if attempted else ()),
        cbc_subjects_failed_any=frozenset({"S"} if failed else ()),
        cbc_subjects_failed_first=frozenset({"S"} if failed else ()),
    )


def test_sentinel_design_encoding():
    rows = ([record("A", i % 2, "DROPOUT_CBC" if i % 3 else "CENSORED", year=2000 + i) for i in range(30)]
            + [record("B", i % 2, "UPPER_DESTINATION_MAJOR", year=2000 + i) for i in range(20)])
    d = build_sentinel_design(rows, "S", min_attempts=10)
    assert d.meta["reference"] == "A"
    assert {FAILED, major_column("B"), interaction_column("B")} <= set(d.names)
    # censored and progressed records both have response 0
    assert d.y[3] == 0 and d.y[31] == 0
    # a reference-major student who never failed has zero failure and interaction columns
    i = 0
    assert d.X[i, d.names.index(FAILED)] == 0 and d.X[i, d.names.index(interaction_column("B"))] == 0
    with pytest.raises(EstimationError) as exc:
        build_sentinel_design(rows[:40], "S", min_attempts=50)
    assert exc.value.code == "LOW_ENROLMENT"
    assert "cbc_pass_rate" not in d.names          # constant control removed
    assert "cbc_mean_grade" not in build_sentinel_design(rows, "S", min_attempts=10, drop_controls=("cbc_mean_grade",)).names
