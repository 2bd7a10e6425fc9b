"""Reference implementations used as test oracles.

Each one is written from the textbook definition, deliberately slow, and
shares no code with the package.
"""
import math

import numpy as np


def product_limit(durations, events):
    """Survival after each distinct time, by explicit risk-set counting."""
    pairs = list(zip([float(d) for d in durations], [bool(e) for e in events]))
    out = []
    s = 1.0
    for t in sorted({d for d, _ in pairs}):
        n = sum(1 for d, _ in pairs if d >= t)
        d = sum(1 for u, e in pairs if u == t and e)
        s *= 1.0 - d / n
        out.append((t, n, d, s))
    return out


def breslow_loglik(beta, time, event, X, strata=None):
    """Breslow partial log-likelihood summed over strata, one risk set at a time."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    X = np.asarray(X, dtype=float).reshape(len(time), -1)
    strata = [0] * len(time) if strata is None else list(strata)
    total = 0.0
    for g in set(strata):
        idx = [i for i in range(len(time)) if strata[i] == g]
        for t in sorted({time[i] for i in idx if event[i]}):
            dead = [i for i in idx if time[i] == t and event[i]]
            risk = [i for i in idx if time[i] >= t]
            denom = sum(math.exp(float(X[i] @ beta)) for i in risk)
            total += sum(float(X[i] @ beta) for i in dead) - len(dead) * math.log(denom)
    return total


def maximise_1d(f, lo=-10.0, hi=10.0, grid=4001, tol=1e-12):
    """Dense grid search, then bisection on a central-difference derivative."""
    xs = np.linspace(lo, hi, grid)
    vals = [f(x) for x in xs]
    k = int(np.argmax(vals))
    a, b = xs[max(k - 1, 0)], xs[min(k + 1, grid - 1)]

    def slope(x, h=1e-7):
        return (f(x + h) - f(x - h)) / (2 * h)

    for _ in range(200):
        m = 0.5 * (a + b)
        if slope(m) > 0:
            a = m
        else:
            b = m
        if b - a < tol:
            break
    return 0.5 * (a + b)


def central_gradient(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def logistic_newton(X, y, iters=100):
    """Plain Newton-Raphson on the Bernoulli log-likelihood, solved with ``np.linalg.solve``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    b = np.zeros(X.shape[1])
    for _ in range(iters):
        p = 1.0 / (1.0 + np.exp(-X @ b))
        grad = X.T @ (y - p)
        hess = -(X.T * (p * (1 - p))) @ X
        step = np.linalg.solve(hess, grad)
        b = b - step
        if np.max(np.abs(step)) < 1e-14:
            break
    return b
