"""Shared reference implementations (oracles) for the test suite.

Everything here is deliberately independent of the package's production
paths: dense matrices are materialized, conditions are checked from the
definitions, and derivatives come from finite differences.
"""

import numpy as np
import pytest

from dslsr1.problems import ObjectiveShard


def dense_acceptance_oracle(S, Y, eta, guard=1e-12):
    """Sequential pair acceptance with the model held as a dense matrix.

    Applies the definition directly: materialize B, test
    |s.(y - Bs)| >= eta*||s||*||y - Bs||, apply the same denominator guard
    as the production sweep, and update B by the rank-one formula.
    """
    d, m = S.shape
    B = np.zeros((d, d))
    accepted, safety = [], []
    for c in range(m):
        s, y = S[:, c], Y[:, c]
        r = y - B @ s
        t = float(r @ s)
        if abs(t) < eta * np.linalg.norm(s) * np.linalg.norm(r):
            continue
        if abs(t) < guard * (abs(float(s @ y)) + 1.0):
            safety.append(c)
            continue
        B = B + np.outer(r, r) / t
        accepted.append(c)
    return accepted, safety, B


def general_compact_apply(S, Y, accepted, gamma, v):
    """General compact form with a nonzero scalar initial matrix.

    B v = gamma*v + W M^{-1} W^T v with W = Y - gamma*S over the accepted
    columns and M the mirrored lower triangle of S^T Y minus gamma*S^T S.
    """
    idx = list(accepted)
    Sa, Ya = S[:, idx], Y[:, idx]
    psi = Sa.T @ Ya
    M = np.tril(psi) + np.tril(psi, -1).T - gamma * (Sa.T @ Sa)
    W = Ya - gamma * Sa
    return gamma * v + W @ np.linalg.solve(M, W.T @ v)


def fd_gradient(problem, w, h=1e-6):
    d = w.shape[0]
    g = np.empty(d)
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        g[i] = (problem.value(w + e) - problem.value(w - e)) / (2 * h)
    return g


def fd_hessvec(problem, w, v, h=None):
    if h is None:
        h = 1e-4 * (1.0 + np.linalg.norm(w))
    return (problem.gradient(w + h * v) - problem.gradient(w - h * v)) / (2 * h)


class DiagQuadratic(ObjectiveShard):
    """f(w) = 0.5 w.diag(a).w - b.w: exact O(d) curvature for big-d tests."""

    kind = "diag_quadratic"

    def __init__(self, a, b=None, weight=1.0):
        self.a = np.asarray(a, dtype=float)
        self.b = np.zeros_like(self.a) if b is None else np.asarray(b, dtype=float)
        self.weight = float(weight)  # stands in for a sample count

    @property
    def dim(self):
        return self.a.shape[0]

    @property
    def n_samples(self):
        return int(self.weight)

    def value(self, w):
        return float(0.5 * w @ (self.a * w) - self.b @ w)

    def gradient(self, w):
        return self.a * w - self.b

    def hessvec(self, w, v):
        return self.a * v


class Rosenbrock(ObjectiveShard):
    """Classic 2-d valley with analytic curvature."""

    kind = "rosenbrock"

    def __init__(self):
        pass

    @property
    def dim(self):
        return 2

    @property
    def n_samples(self):
        return 1

    def value(self, w):
        x, y = w
        return float((1 - x) ** 2 + 100 * (y - x**2) ** 2)

    def gradient(self, w):
        x, y = w
        return np.array([
            -2 * (1 - x) - 400 * x * (y - x**2),
            200 * (y - x**2),
        ])

    def hessvec(self, w, v):
        x, y = w
        h11 = 2 - 400 * y + 1200 * x**2
        h12 = -400 * x
        return np.array([h11 * v[0] + h12 * v[1], h12 * v[0] + 200 * v[1]])


class ConstantObjective(ObjectiveShard):
    kind = "constant"

    def __init__(self, d, value=3.0):
        self._d = d
        self._value = value

    @property
    def dim(self):
        return self._d

    @property
    def n_samples(self):
        return 1

    def value(self, w):
        return self._value

    def gradient(self, w):
        return np.zeros(self._d)

    def hessvec(self, w, v):
        return np.zeros(self._d)


def gradient_descent_oracle(problem, w0, max_iters=20000, tol=1e-10):
    """Armijo-backtracking gradient descent; defines reference minima."""
    w = w0.copy()
    f = problem.value(w)
    step = 1.0
    for _ in range(max_iters):
        g = problem.gradient(w)
        gn2 = float(g @ g)
        if np.sqrt(gn2) < tol:
            break
        step = min(step * 2.0, 1e3)
        while True:
            trial = problem.value(w - step * g)
            if trial <= f - 1e-4 * step * gn2:
                break
            step *= 0.5
            if step < 1e-18:
                return w, f
        w = w - step * g
        f = trial
    return w, problem.value(w)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
