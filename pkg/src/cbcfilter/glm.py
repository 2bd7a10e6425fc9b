"""Logistic regression by IRLS, with Wald inference.

Used for the subject-by-major models of dropout after failure.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import EstimationError, SeparationError
from .survival import FitResult, normal_two_sided_p

INTERCEPT = "intercept"


@dataclass(frozen=True)
class DesignMatrix:
    X: np.ndarray
    y: np.ndarray
    names: tuple[str, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "names", tuple(self.names))
        if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[1] != len(self.names):
            raise ValueError("design shape does not match response/names")
        if len(set(self.names)) != len(self.names):
            raise ValueError("column names must be unique")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("response must be binary 0/1")
        for j, name in enumerate(self.names):
            if name != INTERCEPT and not np.any(X[:, j]):
                raise ValueError(f"column {name!r} is all zero")

    @property
    def n(self) -> int:
        return self.X.shape[0]


def _loglik(eta, y):
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def dependent_columns(X, names, rtol: float = 1e-10) -> list[str]:
    """Columns that are linear combinations of the columns before them."""
    kept = []
    dependent = []
    scale = max(1.0, float(np.abs(X).max(initial=0.0)))
    for j in range(X.shape[1]):
        trial = X[:, kept + [j]]
        s = np.linalg.svd(trial, compute_uv=False)
        if s[-1] <= rtol * scale * max(X.shape) * s[0]:
            dependent.append(names[j])
        else:
            kept.append(j)
    return dependent


def logistic_fit(design: DesignMatrix, max_iter: int = 50, tol: float = 1e-8,
                 separation_bound: float = 15.0, max_halvings: int = 10) -> FitResult:
    """Maximum-likelihood logistic fit by iteratively reweighted least squares.

    Each step solves the weighted least-squares problem through a QR
    factorisation of ``sqrt(W) X``.  Raises :class:`SeparationError` (with the
    last iterate attached) once any coefficient exceeds ``separation_bound``.
    """
    X, y, names = design.X, design.y, design.names
    n, p = X.shape
    if n <= p:
        raise EstimationError("TOO_FEW_ROWS", f"n={n} must exceed the {p} columns")
    if y.min() == y.max():
        raise EstimationError("SINGLE_CLASS", "response has a single class")
    dep = dependent_columns(X, names)
    if dep:
        raise EstimationError("RANK_DEFICIENT", f"dependent columns: {dep}")

    beta = np.zeros(p)
    eta = X @ beta
    ll = _loglik(eta, y)
    history = [ll]
    converged = False
    it = 0
    while True:
        mu = 1.0 / (1.0 + np.exp(-eta))
        score = X.T @ (y - mu)
        if np.max(np.abs(score)) < tol:
            converged = True
            beta, eta, ll = _polish(X, y, beta, mu, score, ll)
            break
        if it >= max_iter:
            break
        sw = np.sqrt(np.clip(mu * (1.0 - mu), 1e-300, None))
        Q, R = np.linalg.qr(sw[:, None] * X)
        step = solve_triangular(R, Q.T @ ((y - mu) / sw))
        new = beta + step
        ll_new = _loglik(X @ new, y)
        halvings = 0
        slack = 1e-12 * max(1.0, abs(ll))     # rounding noise near the optimum
        while not ll_new >= ll - slack and halvings < max_halvings:
            step = step / 2
            new = beta + step
            ll_new = _loglik(X @ new, y)
            halvings += 1
        it += 1
        if not ll_new >= ll - slack:
            # no ascent left: accept when the predicted gain is at rounding level
            gain = float(((y - mu) / sw) @ Q @ (Q.T @ ((y - mu) / sw)))
            converged = gain <= 1e-10 * max(1.0, abs(ll))
            break
        beta, ll = new, ll_new
        eta = X @ beta
        history.append(ll)
        if np.max(np.abs(beta)) > separation_bound:
            raise SeparationError(
                f"|coefficient| exceeded {separation_bound} before the score converged",
                result=_result(X, y, names, beta, ll, it, False, history),
            )
    res = _result(X, y, names, beta, ll, it, converged, history)
    if np.max(np.abs(beta)) > separation_bound:
        raise SeparationError(f"|coefficient| exceeded {separation_bound}", result=res)
    return res


def _polish(X, y, beta, mu, score, ll):
    """One extra Newton step, kept only if it shrinks the score without losing likelihood."""
    sw = np.sqrt(np.clip(mu * (1.0 - mu), 1e-300, None))
    Q, R = np.linalg.qr(sw[:, None] * X)
    new = beta + solve_triangular(R, Q.T @ ((y - mu) / sw))
    eta = X @ new
    ll_new = _loglik(eta, y)
    score_new = X.T @ (y - 1.0 / (1.0 + np.exp(-eta)))
    if ll_new >= ll - 1e-12 * max(1.0, abs(ll)) and np.max(np.abs(score_new)) < np.max(np.abs(score)):
        return new, eta, ll_new
    return beta, X @ beta, ll


def _result(X, y, names, beta, ll, it, converged, history):
    mu = 1.0 / (1.0 + np.exp(-(X @ beta)))
    w = mu * (1.0 - mu)
    info = (X * w[:, None]).T @ X
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        cov = np.full_like(info, np.nan)
    return FitResult.from_estimate(names, beta, cov, ll, it, converged, n_obs=X.shape[0],
                                   n_events=int(y.sum()), model="logistic", history=tuple(history))


def linear_combination(fit: FitResult, weights: dict[str, float]):
    """Wald estimate of a linear combination of coefficients: ``(estimate, se, p)``."""
    c = np.zeros(len(fit.names))
    for name, w in weights.items():
        c[fit.index(name)] = w
    est = float(c @ fit.coefficients)
    var = float(c @ fit.covariance @ c)
    se = math.sqrt(var) if var > 0 else float("nan")
    p = float(normal_two_sided_p(est / se)[0]) if se > 0 else float("nan")
    return est, se, p


# -- sentinel designs --------------------------------------------------------------

FAILED = "failed"
CONTROLS = ("cbc_pass_rate", "cbc_mean_grade", "cbc_mean_grade_missing", "entry_year_c")


def failed_flag(record, subject: str, failure: str) -> bool:
    if failure == "any_attempt":
        return subject in record.cbc_subjects_failed_any
    if failure == "first_attempt":
        return subject in record.cbc_subjects_failed_first
    raise ValueError(f"unknown failure definition {failure!r}")


def major_column(m: str) -> str:
    return f"major:{m}"


def interaction_column(m: str) -> str:
    return f"{FAILED}:major:{m}"


def build_sentinel_design(records, subject: str, failure: str = "any_attempt", min_attempts: int = 50,
                          population: str = "attempters", majors=None, reference: str | None = None,
                          drop_controls=()) -> DesignMatrix:
    """Dropout-after-failure design for one subject.

    Columns: intercept, ``failed``, destination-major indicators and their
    interactions with ``failed`` (reference: the largest major), CBC pass
    rate, CBC mean grade (mean-imputed, plus a missingness indicator when
    needed), and centred entry year.  Response: 1 for CBC dropout.

    ``population="all"`` keeps non-attempters and adds a ``not_attempted``
    indicator.  ``majors`` restricts the rows to those destination majors.
    ``drop_controls`` names control columns to leave out.
    """
    rows = [r for r in records if majors is None or r.destination_major in majors]
    if population == "attempters":
        rows = [r for r in rows if subject in r.cbc_subjects_attempted]
    elif population != "all":
        raise ValueError(f"unknown population {population!r}")
    n_att = sum(subject in r.cbc_subjects_attempted for r in rows)
    if n_att < min_attempts:
        raise EstimationError("LOW_ENROLMENT", f"{subject}: {n_att} attempters < {min_attempts}")

    counts: dict[str, int] = {}
    for r in rows:
        counts[r.destination_major] = counts.get(r.destination_major, 0) + 1
    if reference is None:
        reference = min(counts, key=lambda m: (-counts[m], m))
    others = sorted(m for m in counts if m != reference)

    n = len(rows)
    failed = np.array([failed_flag(r, subject, failure) for r in rows], dtype=float)
    dest = [r.destination_major for r in rows]
    cols = {INTERCEPT: np.ones(n), FAILED: failed}
    for m in others:
        cols[major_column(m)] = np.array([d == m for d in dest], dtype=float)
    for m in others:
        col = cols[major_column(m)] * failed
        if col.any():
            cols[interaction_column(m)] = col
    if population == "all":
        col = np.array([subject not in r.cbc_subjects_attempted for r in rows], dtype=float)
        if col.any():
            cols["not_attempted"] = col
    cols["cbc_pass_rate"] = np.array([r.cbc_pass_rate for r in rows])
    grades = np.array([np.nan if r.cbc_mean_grade is None else r.cbc_mean_grade for r in rows])
    missing = np.isnan(grades)
    fill = float(np.nanmean(grades)) if (~missing).any() else 0.0
    cols["cbc_mean_grade"] = np.where(missing, fill, grades)
    if missing.any():
        cols["cbc_mean_grade_missing"] = missing.astype(float)
    years = np.array([r.entry_year for r in rows], dtype=float)
    cols["entry_year_c"] = years - years.mean()
    # constant controls carry no information and would duplicate the intercept
    for name in ("cbc_pass_rate", "cbc_mean_grade", "entry_year_c"):
        if np.ptp(cols[name]) == 0:
            del cols[name]
    for name in CONTROLS:
        if name in drop_controls:
            cols.pop(name, None)
    y = np.array([r.cbc_outcome == "DROPOUT_CBC" for r in rows], dtype=float)
    names = tuple(cols)
    X = np.column_stack([cols[c] for c in names])
    meta = {"subject": subject, "reference": reference, "majors": [reference] + others,
            "failure": failure, "counts": counts}
    return DesignMatrix(X, y, names, meta)


def major_odds_ratio(fit: FitResult, design: DesignMatrix, major: str):
    """Major-specific adjusted OR of dropout after failure: ``(or, se_log, p)``.

    For a non-reference major the log-OR is ``failed + failed:major:m``;
    its standard error comes from the full covariance (delta method).
    """
    weights = {FAILED: 1.0}
    if major != design.meta["reference"]:
        col = interaction_column(major)
        if col not in design.names:
            return float("nan"), float("nan"), float("nan")
        weights[col] = 1.0
    est, se, p = linear_combination(fit, weights)
    return math.exp(est) if est < 700 else float("inf"), se, p


def marginal_odds_ratio(failed, dropout) -> float:
    """Crude 2x2 odds ratio, with a 0.5 continuity correction when a cell is empty."""
    failed = np.asarray(failed, dtype=bool)
    dropout = np.asarray(dropout, dtype=bool)
    a = np.sum(failed & dropout)
    b = np.sum(failed & ~dropout)
    c = np.sum(~failed & dropout)
    d = np.sum(~failed & ~dropout)
    if min(a, b, c, d) == 0:
        a, b, c, d = a + 0.5, b + 0.5, c + 0.5, d + 0.5
    return float(a * d / (b * c))
