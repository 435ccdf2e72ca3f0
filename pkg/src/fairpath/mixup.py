"""Mixup paths between sensitive groups and the penalties built on them.

The interpolator follows the endpoint convention T(x0, x1, 0) = x0 and
T(x0, x1, 1) = x1, i.e. ``(1 - t) * x0 + t * x1``. The path derivative is
therefore the directional derivative along ``x1 - x0``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad

SPACES = ("input", "latent")
DEFAULT_H = 0.1
# roundoff allowance for windows such as t = 1 - 0.9, h = 0.1
WINDOW_SLACK = 1e-12


@dataclass
class PairedBatch:
    """Row-paired samples from group 0 (``x0``) and group 1 (``x1``)."""

    x0: np.ndarray
    x1: np.ndarray

    def __post_init__(self):
        if not sp.issparse(self.x0):
            self.x0 = np.asarray(self.x0, dtype=np.float64)
        if not sp.issparse(self.x1):
            self.x1 = np.asarray(self.x1, dtype=np.float64)
        if self.x0.ndim != 2 or self.x1.ndim != 2:
            raise ValueError("paired blocks must be 2-D")
        if self.x0.shape[0] == 0 or self.x1.shape[0] == 0:
            raise ValueError("paired batch has an empty block")
        if self.x0.shape != self.x1.shape:
            raise ValueError(f"paired blocks differ in shape: {self.x0.shape} vs {self.x1.shape}")

    def swapped(self):
        return PairedBatch(self.x1, self.x0)

    def __len__(self):
        return self.x0.shape[0]


@dataclass
class PathCurve:
    t: np.ndarray
    mu: np.ndarray

    @property
    def mu_calibrated(self):
        return self.mu - self.mu[0]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "mu", "mu_calibrated"])
            for t, m, c in zip(self.t, self.mu, self.mu_calibrated):
                w.writerow([repr(float(t)), repr(float(m)), repr(float(c))])


def uniform_grid(n_points):
    if n_points < 2:
        raise ValueError("grid needs at least 2 points")
    return np.linspace(0.0, 1.0, int(n_points))


def _check_grid(t_grid, min_points=2):
    t = np.asarray(t_grid, dtype=np.float64)
    if t.ndim != 1 or t.size < min_points:
        raise ValueError(f"t grid needs at least {min_points} points")
    if t[0] != 0.0 or t[-1] != 1.0 or np.any(np.diff(t) <= 0):
        raise ValueError("t grid must increase strictly from 0 to 1")
    return t


def _check_space(space, model):
    if space not in SPACES:
        raise ValueError(f"space must be one of {SPACES}, got {space!r}")
    if space == "latent" and model is None:
        raise ValueError("latent mixup needs the model's encoder")


def interpolate(a, b, t):
    return (1.0 - t) * a + t * b


def _endpoints(model, pair, space, params=None):
    if space == "input":
        return pair.x0, pair.x1
    return model.encode(pair.x0, params), model.encode(pair.x1, params)


def _head(model, space):
    return model.forward if space == "input" else model.predict_from_latent


def mixup_interpolate(pair, t, space="input", model=None):
    """Rowwise convex combination, in input space or of encoder outputs."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    _check_space(space, model)
    z0, z1 = _endpoints(model, pair, space)
    return interpolate(z0, z1, t)


def _mu_and_slope(model, z0, z1, t, space):
    mixed = interpolate(z0, z1, t)
    out = ad.mean(_head(model, space)(ad.Dual(mixed, z1 - z0)))
    return float(out.value), float(out.tangent)


def mu_path(model, pair, t_grid, space="input"):
    """Expected model output on the mixup interpolates at each grid value of t."""
    _check_space(space, model)
    t = _check_grid(t_grid)
    z0, z1 = _endpoints(model, pair, space)
    head = _head(model, space)
    mu = np.array([np.mean(head(interpolate(z0, z1, tk))) for tk in t])
    return PathCurve(t, mu)


def path_derivative(model, pair, t, mode="jvp", h=1e-3, space="input"):
    """d mu / dt at ``t``; ``fd`` uses a central difference, ``jvp`` is exact."""
    _check_space(space, model)
    z0, z1 = _endpoints(model, pair, space)
    if mode == "jvp":
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {t}")
        return _mu_and_slope(model, z0, z1, t, space)[1]
    if mode == "fd":
        if h <= 0 or t - h < -WINDOW_SLACK or t + h > 1.0 + WINDOW_SLACK:
            raise ValueError(f"finite-difference window [{t - h}, {t + h}] leaves [0, 1]")
        head = _head(model, space)
        up = np.mean(head(interpolate(z0, z1, t + h)))
        down = np.mean(head(interpolate(z0, z1, t - h)))
        return float((up - down) / (2.0 * h))
    raise ValueError(f"unknown mode {mode!r}")


def arc_length(model, pair, t_grid, space="input", chord_floor=True):
    """Length of the mu(t) curve: trapezoid rule on |d mu/dt| (exact jvp slopes).

    With ``chord_floor`` each panel is raised to at least the chord
    |mu(t_{k+1}) - mu(t_k)|, a hard lower bound on the true panel length, so
    the estimate can never fall below |mu(1) - mu(0)| through quadrature error.
    """
    _check_space(space, model)
    t = _check_grid(t_grid, min_points=3)
    z0, z1 = _endpoints(model, pair, space)
    mu, slope = np.array([_mu_and_slope(model, z0, z1, tk, space) for tk in t]).T
    dt = np.diff(t)
    panels = 0.5 * (np.abs(slope[:-1]) + np.abs(slope[1:])) * dt
    if chord_floor:
        panels = np.maximum(panels, np.abs(np.diff(mu)))
    return float(np.sum(panels))


def integrated_slope(model, pair, t_grid, space="input"):
    """Trapezoid integral of the signed slope; approximates mu(1) - mu(0)."""
    _check_space(space, model)
    t = _check_grid(t_grid, min_points=3)
    z0, z1 = _endpoints(model, pair, space)
    slope = np.array([_mu_and_slope(model, z0, z1, tk, space)[1] for tk in t])
    return float(np.trapezoid(slope, t))


def sample_t(rng, h=DEFAULT_H):
    """One mixing coefficient per batch, uniform on [h, 1 - h]."""
    return float(rng.uniform(h, 1.0 - h))


def _as_pairs(batch_spec):
    if isinstance(batch_spec, PairedBatch):
        return [batch_spec]
    pairs = list(batch_spec)
    if not pairs:
        raise ValueError("no paired batches supplied")
    return pairs


def fair_mixup_penalty(model, batch_spec, t, h=DEFAULT_H, space="input", penalty_form="abs", params=None):
    """Central-difference slope of mu at ``t``, made differentiable in the parameters.

    ``batch_spec`` is one PairedBatch (DP) or one per label (EO, summed).
    Pass taped ``params`` to get a Var whose gradient trains the model.
    """
    _check_space(space, model)
    if h <= 0 or t - h < -WINDOW_SLACK or t + h > 1.0 + WINDOW_SLACK:
        raise ValueError(f"t window [{t - h}, {t + h}] leaves [0, 1]")
    if penalty_form not in ("abs", "squared"):
        raise ValueError(f"unknown penalty form {penalty_form!r}")
    head = _head(model, space)
    total = 0.0
    for pair in _as_pairs(batch_spec):
        z0, z1 = _endpoints(model, pair, space, params)
        up = ad.mean(head(interpolate(z0, z1, t + h), params))
        down = ad.mean(head(interpolate(z0, z1, t - h), params))
        slope = (up - down) * (1.0 / (2.0 * h))
        total = total + (ad.absolute(slope) if penalty_form == "abs" else ad.square(slope))
    return total


def gap_penalty(model, batch_spec, params=None):
    """|mean f(x0) - mean f(x1)|, summed over paired batches."""
    total = 0.0
    for pair in _as_pairs(batch_spec):
        diff = ad.mean(model.forward(pair.x0, params)) - ad.mean(model.forward(pair.x1, params))
        total = total + ad.absolute(diff)
    return total
