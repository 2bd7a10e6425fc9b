import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbcfilter.errors import EstimationError
from cbcfilter.survival import (CoxData, SurvivalSample, cox_fit, cox_fit_arrays, cox_loglik, kaplan_meier,
                                km_by_stratum, km_estimate, normal_two_sided_p)

from oracles import breslow_loglik, central_gradient, maximise_1d, product_limit


def test_two_events_hand_computed():
    km = km_estimate([5, 10], [1, 1])
    assert km.survival_at(5) == 0.5 and km.survival_at(10) == 0.0
    assert km.survival_at(4.9) == 1.0
    assert km.median == 5


def test_all_censored():
    km = km_estimate([3, 4, 9], [0, 0, 0])
    assert np.all(km.survival == 1.0) and km.median is None


def test_censored_at_event_time_stays_at_risk():
    km = km_estimate([2, 2, 3], [1, 0, 1])
    assert km.at_risk.tolist() == [3, 1]
    assert km.survival_at(2) == pytest.approx(2 / 3)


def test_km_rejects_empty_and_negative():
    with pytest.raises(EstimationError):
        kaplan_meier([])
    with pytest.raises(ValueError):
        km_estimate([-1.0], [1])


samples_st = st.lists(st.tuples(st.integers(0, 30), st.booleans()), min_size=1, max_size=50)


@settings(max_examples=200, deadline=None)
@given(samples_st)
def test_km_matches_brute_force(rows):
    t, e = zip(*rows)
    km = km_estimate(t, e)
    ref = product_limit(t, e)
    assert len(ref) == len(km.times)
    for (tt, n, d, s), (t2, n2, d2, s2) in zip(ref, km.steps):
        assert (tt, n, d) == (t2, n2, d2) and abs(s - s2) < 1e-12


@settings(max_examples=100, deadline=None)
@given(samples_st)
def test_km_is_monotone_and_bounded(rows):
    t, e = zip(*rows)
    s = km_estimate(t, e).survival
    assert np.all(np.diff(s) <= 0) and np.all((s >= 0) & (s <= 1))


def test_km_by_stratum_partition_and_pooling():
    a = [SurvivalSample(float(t), bool(t % 3), "A") for t in range(40)]
    b = [SurvivalSample(float(t), True, "B") for t in range(1, 41)]
    c = [SurvivalSample(float(t), True, "C") for t in range(5)]

    class R:
        def __init__(self, s):
            self.excluded_from_survival = False
            self.time_to_event = s.duration
            self.cbc_outcome = "DROPOUT_CBC" if s.event else "CENSORED"
            self.destination_major = s.stratum

    curves = km_by_stratum([R(s) for s in a + b + c])
    assert set(curves) == {"A", "B", "OTHER"}
    np.testing.assert_array_equal(curves["A"].survival, kaplan_meier(a).survival)
    np.testing.assert_array_equal(curves["B"].survival, kaplan_meier(b).survival)


# -- Cox ------------------------------------------------------------------------

def random_instance(rng, n=None, p=None, strata=1):
    n = n or int(rng.integers(5, 30))
    p = p or int(rng.integers(1, 4))
    t = rng.integers(1, 8, n).astype(float)      # plenty of ties
    e = rng.random(n) < 0.7
    e[0] = True
    X = rng.normal(size=(n, p))
    g = rng.integers(0, strata, n)
    return t, e, X, g


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    for _ in range(100):
        t, e, X, g = random_instance(rng, strata=2)
        data = CoxData.build(t, e, X, g)
        beta = rng.normal(scale=0.5, size=X.shape[1])
        _, grad, hess = cox_loglik(beta, data)
        num = central_gradient(lambda b: cox_loglik(b, data, derivatives=False)[0], beta)
        assert np.allclose(grad, num, rtol=1e-6, atol=1e-7)
        num_h = np.array([central_gradient(lambda b: cox_loglik(b, data)[1][j], beta) for j in range(len(beta))])
        assert np.allclose(hess, num_h, rtol=1e-5, atol=1e-6)


def test_loglik_matches_risk_set_definition():
    rng = np.random.default_rng(2)
    for _ in range(30):
        t, e, X, g = random_instance(rng, strata=3)
        beta = rng.normal(size=X.shape[1])
        ll = cox_loglik(beta, CoxData.build(t, e, X, g), derivatives=False)[0]
        assert ll == pytest.approx(breslow_loglik(beta, t, e, X, g), rel=1e-10, abs=1e-10)


def test_six_sample_binary_covariate_against_grid_oracle():
    t = [1, 2, 3, 4, 5, 6]
    e = [1, 1, 0, 1, 1, 1]
    x = [1, 0, 1, 1, 0, 0]
    fit = cox_fit_arrays(t, e, np.array(x, float)[:, None])
    ref = maximise_1d(lambda b: breslow_loglik([b], t, e, np.array(x, float)))
    assert abs(fit.coefficients[0] - ref) < 1e-6
    assert fit.converged


def test_constant_covariate_is_rejected():
    with pytest.raises(EstimationError) as exc:
        cox_fit_arrays([1, 2, 3], [1, 1, 1], np.ones((3, 1)))
    assert exc.value.code == "ZERO_VARIANCE_COVARIATE"


def test_hazard_ratio_is_exponentiated_coefficient():
    rng = np.random.default_rng(3)
    t, e, X, _ = random_instance(rng, n=40, p=1)
    fit = cox_fit_arrays(t, e, X)
    assert fit.ratios[0] == pytest.approx(math.exp(fit.coefficients[0]))
    assert math.exp(0.6931471805599453) == pytest.approx(2.0)


def test_one_stratum_equals_unstratified():
    rng = np.random.default_rng(4)
    t, e, X, _ = random_instance(rng, n=60, p=2)
    a = cox_fit_arrays(t, e, X)
    b = cox_fit_arrays(t, e, X, strata=["only"] * len(t))
    assert np.max(np.abs(a.coefficients - b.coefficients)) < 1e-8


def test_monotone_likelihood_is_flagged():
    # the covariate perfectly orders the event times
    t = np.arange(1, 11, dtype=float)
    x = -t
    with pytest.raises(EstimationError) as exc:
        cox_fit_arrays(t, np.ones(10, bool), x[:, None])
    assert exc.value.code == "MONOTONE_LIKELIHOOD" and exc.value.result is not None


def test_large_uncentred_covariate_converges():
    rng = np.random.default_rng(5)
    n = 3000
    year = rng.integers(1990, 2020, n).astype(float)
    t = rng.exponential(np.exp(-0.02 * (year - 2000))) * 10
    fit = cox_fit_arrays(np.ceil(t), np.ones(n, bool), year[:, None])
    assert fit.converged
    assert fit.coefficients[0] == pytest.approx(0.02, abs=0.01)


def test_cox_fit_requires_samples():
    with pytest.raises(EstimationError):
        cox_fit([])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_cox_score_is_zero_at_the_optimum(seed):
    rng = np.random.default_rng(seed)
    t, e, X, g = random_instance(rng, n=40, p=2, strata=2)
    try:
        fit = cox_fit_arrays(t, e, X, g)
    except EstimationError:
        return
    _, grad, _ = cox_loglik(fit.coefficients, CoxData.build(t, e, X, g))
    assert np.max(np.abs(grad)) < 1e-6


def test_normal_p_values():
    assert normal_two_sided_p(0.0)[0] == pytest.approx(1.0)
    assert normal_two_sided_p(1.959963984540054)[0] == pytest.approx(0.05)
