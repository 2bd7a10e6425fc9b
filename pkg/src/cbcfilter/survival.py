"""Kaplan-Meier curves and stratified Cox proportional-hazards fits.

The Cox fitter maximises the Breslow partial likelihood, summed over
strata, by Newton iteration with step-halving.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import EstimationError


class SurvivalSample(NamedTuple):
    duration: float
    event: bool
    stratum: str = ""
    covariates: tuple[float, ...] = ()


def normal_two_sided_p(z):
    """Two-sided normal tail probability, ``P(|Z| >= |z|)``."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    return np.array([math.erfc(abs(v) / math.sqrt(2.0)) if np.isfinite(v) else 0.0 for v in z])


@dataclass(frozen=True)
class FitResult:
    names: tuple[str, ...]
    coefficients: np.ndarray
    standard_errors: np.ndarray
    wald_z: np.ndarray
    p_values: np.ndarray
    ratios: np.ndarray
    loglik: float
    n_iterations: int
    converged: bool
    covariance: np.ndarray
    n_obs: int = 0
    n_events: int = 0
    model: str = ""
    history: tuple[float, ...] = ()

    @classmethod
    def from_estimate(cls, names, beta, cov, loglik, n_iter, converged, **kw):
        beta = np.asarray(beta, dtype=float)
        with np.errstate(invalid="ignore"):
            se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
            z = np.where(se > 0, beta / np.where(se > 0, se, 1.0), np.nan)
        p = normal_two_sided_p(z)
        p[~np.isfinite(z)] = np.nan
        with np.errstate(over="ignore"):
            ratios = np.exp(beta)
        return cls(tuple(names), beta, se, z, p, ratios, float(loglik), int(n_iter), bool(converged),
                   np.asarray(cov, dtype=float), **kw)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def ratio(self, name: str) -> float:
        return float(self.ratios[self.index(name)])

    def to_dict(self) -> dict:
        def clean(v):
            v = float(v)
            return v if math.isfinite(v) else None
        return {
            "model": self.model,
            "n_obs": self.n_obs,
            "n_events": self.n_events,
            "loglik": clean(self.loglik),
            "n_iterations": self.n_iterations,
            "converged": self.converged,
            "coefficients": [
                {
                    "name": n,
                    "coef": clean(self.coefficients[i]),
                    "se": clean(self.standard_errors[i]),
                    "z": clean(self.wald_z[i]),
                    "p_value": clean(self.p_values[i]),
                    "ratio": clean(self.ratios[i]),
                }
                for i, n in enumerate(self.names)
            ],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


# -- Kaplan-Meier ------------------------------------------------------------

@dataclass(frozen=True)
class KmCurve:
    times: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray
    survival: np.ndarray
    median: float | None = None
    quartiles: tuple[float | None, float | None] = (None, None)   # (q25, q75) exit times

    @property
    def steps(self):
        return list(zip(self.times.tolist(), self.at_risk.tolist(), self.events.tolist(),
                        self.survival.tolist()))

    def survival_at(self, t: float) -> float:
        i = np.searchsorted(self.times, t, side="right")
        return 1.0 if i == 0 else float(self.survival[i - 1])

    def to_rows(self):
        return [(t, int(n), int(d), s) for t, n, d, s in self.steps]

    def write_csv(self, path, stratum: str | None = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("time", "at_risk", "events", "survival"))
            for row in self.to_rows():
                w.writerow((_num(row[0]), row[1], row[2], repr(row[3])))


def _num(x):
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def _first_time_below(times, surv, level):
    idx = np.nonzero(surv <= level)[0]
    return float(times[idx[0]]) if idx.size else None


def km_estimate(durations, events) -> KmCurve:
    """Product-limit estimate over all distinct observed times.

    Subjects censored at ``t`` are still at risk at ``t``.
    """
    t = np.asarray(durations, dtype=float)
    e = np.asarray(events, dtype=bool)
    if t.size == 0:
        raise EstimationError("EMPTY_SAMPLE", "Kaplan-Meier needs at least one sample")
    if np.any(t < 0):
        raise ValueError("durations must be non-negative")
    uniq, inv = np.unique(t, return_inverse=True)
    counts = np.bincount(inv, minlength=uniq.size)
    deaths = np.bincount(inv, weights=e.astype(float), minlength=uniq.size).astype(int)
    at_risk = t.size - np.concatenate(([0], np.cumsum(counts)[:-1]))
    surv = np.cumprod(1.0 - deaths / at_risk)
    return KmCurve(
        times=uniq,
        at_risk=at_risk,
        events=deaths,
        survival=surv,
        median=_first_time_below(uniq, surv, 0.5),
        quartiles=(_first_time_below(uniq, surv, 0.75), _first_time_below(uniq, surv, 0.25)),
    )


def kaplan_meier(samples: Sequence[SurvivalSample]) -> KmCurve:
    if not samples:
        raise EstimationError("EMPTY_SAMPLE", "Kaplan-Meier needs at least one sample")
    return km_estimate([s.duration for s in samples], [s.event for s in samples])


# -- Cox partial likelihood -----------------------------------------------------

class _Stratum(NamedTuple):
    X: np.ndarray           # rows sorted by time ascending
    starts: np.ndarray      # index of first row of each distinct event time
    deaths: np.ndarray      # events at each of those times
    event_x_sum: np.ndarray


@dataclass
class CoxData:
    """Sorted, stratified view of a survival data set."""

    strata: list[_Stratum]
    p: int
    n_obs: int
    n_events: int
    labels: list = field(default_factory=list)

    @classmethod
    def build(cls, time, event, X, strata=None):
        time = np.asarray(time, dtype=float)
        event = np.asarray(event, dtype=bool)
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        n, p = X.shape
        if time.shape != (n,) or event.shape != (n,):
            raise ValueError("time, event and covariate rows must have the same length")
        if np.any(time < 0):
            raise ValueError("durations must be non-negative")
        # the partial likelihood is shift invariant; centring keeps sums well scaled
        X = X - X.mean(axis=0) if n else X
        if strata is None:
            strata = np.zeros(n, dtype=int)
        strata = np.asarray(strata)
        labels, s_idx = np.unique(strata, return_inverse=True)
        out = []
        for k in range(labels.size):
            m = s_idx == k
            t, d, x = time[m], event[m], X[m]
            # content-determined order: permuting tied rows cannot change any sum
            keys = [x[:, j] for j in range(p - 1, -1, -1)] + [~d, t]
            order = np.lexsort(keys)
            t, d, x = t[order], d[order], x[order]
            if not d.any():
                continue
            ev_times = np.unique(t[d])
            starts = np.searchsorted(t, ev_times, side="left")
            ends = np.searchsorted(t, ev_times, side="right")
            cum = np.concatenate(([0], np.cumsum(d)))
            deaths = cum[ends] - cum[starts]
            out.append(_Stratum(x, starts, deaths, x[d].sum(axis=0)))
        return cls(out, p, n, int(event.sum()), list(labels))


def cox_loglik(beta, data: CoxData, derivatives: bool = True):
    """Breslow partial log-likelihood; returns ``(loglik, gradient, hessian)``."""
    beta = np.asarray(beta, dtype=float)
    p = data.p
    ll = 0.0
    grad = np.zeros(p)
    hess = np.zeros((p, p))
    for s in data.strata:
        eta = s.X @ beta
        c = eta.max()
        w = np.exp(eta - c)
        S0 = np.cumsum(w[::-1])[::-1][s.starts]
        ll += float(s.event_x_sum @ beta) - float(np.sum(s.deaths * (np.log(S0) + c)))
        if not derivatives:
            continue
        wx = w[:, None] * s.X
        S1 = np.cumsum(wx[::-1], axis=0)[::-1][s.starts]
        mean = S1 / S0[:, None]
        grad += s.event_x_sum - (s.deaths[:, None] * mean).sum(axis=0)
        wxx = wx[:, :, None] * s.X[:, None, :]
        S2 = np.cumsum(wxx[::-1], axis=0)[::-1][s.starts]
        cov = S2 / S0[:, None, None] - mean[:, :, None] * mean[:, None, :]
        hess -= (s.deaths[:, None, None] * cov).sum(axis=0)
    return ll, grad, hess


def _check_variance(data: CoxData, names):
    for j in range(data.p):
        if not any(np.ptp(s.X[:, j]) > 0 for s in data.strata):
            raise EstimationError("ZERO_VARIANCE_COVARIATE", f"covariate {j} ({names[j]}) is constant")


def cox_fit_arrays(time, event, X, strata=None, names=None, max_iter: int = 50, tol: float = 1e-8,
                   max_halvings: int = 10, coef_bound: float = 20.0, ties: str = "breslow") -> FitResult:
    if ties.lower() != "breslow":
        raise ValueError("only Breslow ties are supported")
    data = CoxData.build(time, event, X, strata)
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(data.p))
    if len(names) != data.p:
        raise ValueError("names must match the number of covariates")
    if data.n_events == 0:
        raise EstimationError("NO_EVENTS", "Cox fit needs at least one event")
    _check_variance(data, names)
    return _newton(data, names, max_iter, tol, max_halvings, coef_bound)


def _newton(data, names, max_iter, tol, max_halvings, coef_bound):
    beta = np.zeros(data.p)
    ll, g, H = cox_loglik(beta, data)
    it = 0
    converged = bool(np.max(np.abs(g)) < tol)
    while not converged and it < max_iter:
        try:
            step = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(-H, g, rcond=None)[0]
        new = beta + step
        ll_new = cox_loglik(new, data, derivatives=False)[0]
        halvings = 0
        slack = 1e-12 * max(1.0, abs(ll))     # rounding noise near the optimum
        while not ll_new >= ll - slack and halvings < max_halvings:
            step = step / 2
            new = beta + step
            ll_new = cox_loglik(new, data, derivatives=False)[0]
            halvings += 1
        it += 1
        if not ll_new >= ll - slack:
            # no ascent left: accept when the predicted gain is at rounding level
            gain = float(g @ np.linalg.lstsq(-H, g, rcond=None)[0])
            converged = gain <= 1e-10 * max(1.0, abs(ll))
            break
        beta = new
        ll, g, H = cox_loglik(beta, data)
        converged = bool(np.max(np.abs(g)) < tol)
        if np.max(np.abs(beta)) > coef_bound:
            res = _result(data, names, beta, H, ll, it, False)
            raise EstimationError("MONOTONE_LIKELIHOOD",
                                  f"|coefficient| exceeded {coef_bound}", result=res)
    return _result(data, names, beta, H, ll, it, converged)


def _result(data, names, beta, H, ll, it, converged):
    try:
        cov = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        cov = np.full_like(H, np.nan)
    return FitResult.from_estimate(names, beta, cov, ll, it, converged,
                                   n_obs=data.n_obs, n_events=data.n_events, model="cox")


def cox_fit(samples: Sequence[SurvivalSample], names=None, max_iter: int = 50, tol: float = 1e-8,
            ties: str = "breslow", max_halvings: int = 10, coef_bound: float = 20.0) -> FitResult:
    """Stratified Cox fit over :class:`SurvivalSample` rows."""
    if not samples:
        raise EstimationError("EMPTY_SAMPLE", "no samples")
    widths = {len(s.covariates) for s in samples}
    if len(widths) != 1:
        raise ValueError("covariate vectors must all have the same length")
    X = np.array([s.covariates for s in samples], dtype=float).reshape(len(samples), widths.pop())
    return cox_fit_arrays([s.duration for s in samples], [s.event for s in samples], X,
                          [s.stratum for s in samples], names, max_iter, tol, max_halvings,
                          coef_bound, ties)


# -- records -> samples ----------------------------------------------------------

def covariate_value(record, name: str) -> float:
    """Numeric covariate extracted from a student record.

    Besides plain numeric fields, understands ``cohort_post`` (1 for
    post-reform entry) and ``failed_any:<code>`` / ``failed_first:<code>``.
    """
    if name == "cohort_post":
        return 1.0 if record.cohort == "POST_2006" else 0.0
    if name.startswith("failed_any:"):
        return 1.0 if name[11:] in record.cbc_subjects_failed_any else 0.0
    if name.startswith("failed_first:"):
        return 1.0 if name[13:] in record.cbc_subjects_failed_first else 0.0
    v = getattr(record, name)
    return float(v)


def survival_samples(records, covariates: Sequence[str] = (), event: str = "any",
                     stratum: str | None = "destination_major") -> list[SurvivalSample]:
    """Survival rows for non-excluded records.

    ``event="any"`` counts every non-censored exit; ``event="dropout"``
    counts CBC dropout only and treats progression as censoring.
    """
    out = []
    for r in records:
        if r.excluded_from_survival:
            continue
        if event == "any":
            ev = r.cbc_outcome != "CENSORED"
        elif event == "dropout":
            ev = r.cbc_outcome == "DROPOUT_CBC"
        else:
            raise ValueError(f"unknown event definition {event!r}")
        out.append(SurvivalSample(
            float(r.time_to_event), ev,
            getattr(r, stratum) if stratum else "",
            tuple(covariate_value(r, c) for c in covariates),
        ))
    return out


def km_by_stratum(records, min_n: int = 30, other: str = "OTHER") -> dict[str, KmCurve]:
    """One curve per destination major; majors with fewer than ``min_n`` records are pooled."""
    samples = survival_samples(records)
    if not samples:
        raise EstimationError("EMPTY_SAMPLE", "every record is excluded from survival")
    sizes: dict[str, int] = {}
    for s in samples:
        sizes[s.stratum] = sizes.get(s.stratum, 0) + 1
    groups: dict[str, list] = {}
    for s in samples:
        key = s.stratum if sizes[s.stratum] >= min_n else other
        groups.setdefault(key, []).append(s)
    return {k: kaplan_meier(groups[k]) for k in sorted(groups)}


def fit_exit_model(records, cohort_encoding: str = "categorical", **kw) -> FitResult:
    """Time-to-exit Cox model stratified by destination major.

    Predictors: CBC pass rate, subjects passed in the first year, and entry
    cohort (post-reform indicator, linear entry year, or ``"none"`` for a
    single-cohort dataset).
    """
    cohort = {"categorical": ("cohort_post",), "linear": ("entry_year",), "none": ()}[cohort_encoding]
    covs = ("cbc_pass_rate", "cbc_subjects_passed_first_year") + cohort
    samples = survival_samples(records, covs, event="any")
    return cox_fit(samples, names=covs, **kw)
