"""Closed-form optima of the L2-penalized linear-in-features objectives.

The hypothesis class is f(x) = <v, phi(x)> and the classification loss is the
linear loss reduced to -<v, delta_pm>. Two regularizers are covered: the
squared demographic-parity gap (rank-one system, solved with a soft
projection) and the squared mixup-path slope (system in the D matrix).
``gd_oracle`` solves the same problems by plain gradient descent and exists
only to certify the closed forms.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .mixup import interpolate

MAX_CONDITION = 1e12


class NotDifferentiableError(ValueError):
    pass


class FeatureMap:
    """x -> phi(x) in R^m, with a directional derivative ``jvp(X, U) = Jphi(X) U``."""

    differentiable = True
    kind = "abstract"

    def __call__(self, X):
        raise NotImplementedError

    def jvp(self, X, U):
        raise NotImplementedError

    def describe(self):
        return {"kind": self.kind}


class IdentityMap(FeatureMap):
    kind = "identity"

    def __call__(self, X):
        return np.asarray(X, dtype=np.float64)

    def jvp(self, X, U):
        return np.asarray(U, dtype=np.float64)


class PolynomialMap(FeatureMap):
    """All monomials of total degree 1..degree (no constant term)."""

    kind = "polynomial"

    def __init__(self, degree=2):
        if degree < 1:
            raise ValueError("degree must be >= 1")
        self.degree = int(degree)
        self._terms = None
        self._dim = None

    def terms(self, dim):
        if self._dim != dim:
            self._terms = [c for k in range(1, self.degree + 1)
                           for c in itertools.combinations_with_replacement(range(dim), k)]
            self._dim = dim
        return self._terms

    def __call__(self, X):
        X = np.asarray(X, dtype=np.float64)
        cols = [np.prod(X[:, list(term)], axis=1) for term in self.terms(X.shape[1])]
        return np.stack(cols, axis=1)

    def jvp(self, X, U):
        X = np.asarray(X, dtype=np.float64)
        U = np.asarray(U, dtype=np.float64)
        cols = []
        for term in self.terms(X.shape[1]):
            col = np.zeros(len(X))
            for p, j in enumerate(term):
                rest = term[:p] + term[p + 1:]
                col += U[:, j] * (np.prod(X[:, list(rest)], axis=1) if rest else 1.0)
            cols.append(col)
        return np.stack(cols, axis=1)

    def describe(self):
        return {"kind": self.kind, "degree": self.degree}


class RandomFourierMap(FeatureMap):
    """sqrt(2/m) cos(W x / bandwidth + b), W ~ N(0, I), b ~ U[0, 2pi)."""

    kind = "random_fourier"

    def __init__(self, count, bandwidth=1.0, seed=0):
        self.count = int(count)
        self.bandwidth = float(bandwidth)
        self.seed = seed
        self._cache = {}

    def _draw(self, dim):
        if dim not in self._cache:
            rng = np.random.default_rng(self.seed)
            self._cache[dim] = (rng.normal(size=(dim, self.count)) / self.bandwidth,
                                rng.uniform(0.0, 2.0 * np.pi, size=self.count))
        return self._cache[dim]

    def __call__(self, X):
        X = np.asarray(X, dtype=np.float64)
        W, b = self._draw(X.shape[1])
        return np.sqrt(2.0 / self.count) * np.cos(X @ W + b)

    def jvp(self, X, U):
        X = np.asarray(X, dtype=np.float64)
        W, b = self._draw(X.shape[1])
        return -np.sqrt(2.0 / self.count) * np.sin(X @ W + b) * (np.asarray(U) @ W)

    def describe(self):
        return {"kind": self.kind, "count": self.count, "bandwidth": self.bandwidth, "seed": self.seed}


@dataclass
class ClosedFormInputs:
    m_plus: np.ndarray
    m_minus: np.ndarray
    m0: np.ndarray
    m1: np.ndarray
    D: np.ndarray | None = field(default=None)

    @property
    def delta_pm(self):
        return self.m_plus - self.m_minus

    @property
    def delta_01(self):
        return self.m0 - self.m1

    def to_dict(self):
        d = {k: getattr(self, k).tolist() for k in ("m_plus", "m_minus", "m0", "m1", "delta_pm", "delta_01")}
        d["D"] = None if self.D is None else self.D.tolist()
        return d


def mean_embeddings(X, y, a, feature_map):
    """Label- and group-conditional mean embeddings of ``feature_map``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(int)
    a = np.asarray(a).astype(int)
    means = {}
    for name, mask in (("m_plus", y == 1), ("m_minus", y == 0), ("m0", a == 0), ("m1", a == 1)):
        if not mask.any():
            raise ValueError(f"no samples for {name}: both labels and both groups are required")
        means[name] = feature_map(X[mask]).mean(axis=0)
    return ClosedFormInputs(**means)


def soft_project(u, x, beta):
    """(u u^T / (|u|^2 + beta)) x."""
    u = np.asarray(u, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if beta < 0:
        raise ValueError("beta must be non-negative")
    denom = u @ u + beta
    if denom == 0:
        raise ZeroDivisionError("soft projection onto the zero vector with beta = 0")
    return u * (u @ x) / denom


def prop2_solution(delta_pm, delta_01, lambda1, lambda2):
    """Minimizer of -<v, delta_pm> + lambda1/2 <v, delta_01>^2 + lambda2/2 |v|^2."""
    if lambda2 <= 0:
        raise ValueError("lambda2 must be positive")
    if lambda1 < 0:
        raise ValueError("lambda1 must be non-negative")
    delta_pm = np.asarray(delta_pm, dtype=np.float64)
    if lambda1 == 0:
        return delta_pm / lambda2
    return (delta_pm - soft_project(delta_01, delta_pm, lambda2 / lambda1)) / lambda2


def d_matrix(x0, x1, feature_map, t_grid=None, derivative_mode="fd", h=1e-4):
    """D = int_0^1 mdot_t mdot_t^T dt for the mixup path between row-paired groups.

    ``mdot_t`` is the mean over pairs of d/dt phi((1-t) x0 + t x1); it is a
    central difference in t (``fd``) or the analytic Jacobian-vector product.
    """
    if not feature_map.differentiable:
        raise NotDifferentiableError(f"feature map {feature_map.kind!r} is not differentiable")
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape or x0.ndim != 2 or len(x0) == 0:
        raise ValueError("x0 and x1 must be non-empty 2-D blocks of equal shape")
    t = np.linspace(0.0, 1.0, 101) if t_grid is None else np.asarray(t_grid, dtype=np.float64)
    if t.ndim != 1 or t.size < 3 or t[0] < 0 or t[-1] > 1 or np.any(np.diff(t) <= 0):
        raise ValueError("t grid needs >= 3 increasing points in [0, 1]")
    direction = x1 - x0
    mdots = []
    for tk in t:
        if derivative_mode == "fd":
            up = feature_map(interpolate(x0, x1, tk + h)).mean(axis=0)
            down = feature_map(interpolate(x0, x1, tk - h)).mean(axis=0)
            mdots.append((up - down) / (2.0 * h))
        elif derivative_mode == "analytic":
            mdots.append(feature_map.jvp(interpolate(x0, x1, tk), direction).mean(axis=0))
        else:
            raise ValueError(f"unknown derivative mode {derivative_mode!r}")
    mdots = np.array(mdots)
    outer = mdots[:, :, None] * mdots[:, None, :]
    D = np.trapezoid(outer, t, axis=0)
    return 0.5 * (D + D.T)


def prop3_solution(delta_pm, D, lambda1, lambda2):
    """Solve (lambda1 D + lambda2 I) v = delta_pm."""
    if lambda2 <= 0:
        raise ValueError("lambda2 must be positive")
    D = np.asarray(D, dtype=np.float64)
    A = lambda1 * D + lambda2 * np.eye(len(D))
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise np.linalg.LinAlgError(f"system too ill-conditioned (cond={cond:.3g})")
    return np.linalg.solve(A, np.asarray(delta_pm, dtype=np.float64))


def objective(kind, v, delta_pm, lambda1, lambda2, delta_01=None, D=None):
    """Value and gradient of the reduced objective ``gap_l2`` or ``mixup_l2``."""
    if kind == "gap_l2":
        proj = delta_01 @ v
        value = -(v @ delta_pm) + 0.5 * lambda1 * proj ** 2 + 0.5 * lambda2 * (v @ v)
        grad = -delta_pm + lambda1 * proj * delta_01 + lambda2 * v
    elif kind == "mixup_l2":
        Dv = D @ v
        value = -(v @ delta_pm) + 0.5 * lambda1 * (v @ Dv) + 0.5 * lambda2 * (v @ v)
        grad = -delta_pm + lambda1 * Dv + lambda2 * v
    else:
        raise ValueError(f"unknown objective {kind!r}")
    return float(value), grad


class DivergenceError(RuntimeError):
    pass


def gd_oracle(kind, delta_pm, lambda1, lambda2, delta_01=None, D=None, steps=200_000,
              learning_rate=None, tol=1e-10):
    """Full-batch gradient descent from v = 0 on the strongly convex objective.

    The default step is 1/L with L the largest curvature of the quadratic.
    Stops when |grad| <= ``tol``; raises if the objective rises for ten
    consecutive steps.
    """
    delta_pm = np.asarray(delta_pm, dtype=np.float64)
    if kind == "gap_l2":
        delta_01 = np.asarray(delta_01, dtype=np.float64)
        curvature = lambda1 * (delta_01 @ delta_01) + lambda2
    elif kind == "mixup_l2":
        D = np.asarray(D, dtype=np.float64)
        curvature = lambda1 * max(np.linalg.eigvalsh(D).max(), 0.0) + lambda2
    else:
        raise ValueError(f"unknown objective {kind!r}")
    lr = 1.0 / curvature if learning_rate is None else learning_rate
    v = np.zeros_like(delta_pm)
    prev, rises = np.inf, 0
    for _ in range(steps):
        value, grad = objective(kind, v, delta_pm, lambda1, lambda2, delta_01, D)
        if np.sqrt(grad @ grad) <= tol:
            break
        rises = rises + 1 if value > prev else 0
        if rises >= 10 or not np.isfinite(value):
            raise DivergenceError(f"gradient descent diverged (objective {value:.3g})")
        prev = value
        v = v - lr * grad
    return v
