"""Self-contained verification suite for the closed forms and path identities.

Every check draws its own seeded inputs, measures an error and compares it
with a fixed tolerance. ``tolerance_scale`` multiplies every tolerance, so
0 turns the suite into a guaranteed failure (useful to test exit codes).
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from . import closed_form as cf
from .data import synth_two_group
from .mixup import PairedBatch, arc_length, integrated_slope, mu_path, path_derivative, uniform_grid
from .model import MlpModel

TOLERANCES = {
    "prop2_vs_gd": 1e-4,
    "prop2_first_order": 1e-10,
    "prop3_vs_gd": 1e-3,
    "identity_d_matrix": 1e-6,
    "path_integral_identity": 1e-3,
    "jensen_bound": 1e-9,
    "fd_vs_jvp": 1e-4,
}


@dataclass
class Check:
    name: str
    error: float
    tolerance: float
    passed: bool
    detail: str = ""
    seconds: float = 0.0


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def _log_uniform(rng, lo, hi):
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def prop2_errors(seed=0, n_instances=20, max_dim=50, lambda1=None):
    """Worst relative gap to gradient descent and worst first-order residual."""
    rng = np.random.default_rng(seed)
    worst_rel = worst_foc = 0.0
    for _ in range(n_instances):
        dim = int(rng.integers(1, max_dim + 1))
        d_pm = rng.normal(size=dim) / np.sqrt(dim)
        d_01 = rng.normal(size=dim) / np.sqrt(dim)
        lam1 = _log_uniform(rng, 0.1, 10.0) if lambda1 is None else float(lambda1)
        lam2 = _log_uniform(rng, 0.1, 10.0)
        v = cf.prop2_solution(d_pm, d_01, lam1, lam2)
        ref = cf.gd_oracle("gap_l2", d_pm, lam1, lam2, delta_01=d_01)
        _, grad = cf.objective("gap_l2", v, d_pm, lam1, lam2, delta_01=d_01)
        worst_rel = max(worst_rel, _rel(v, ref))
        worst_foc = max(worst_foc, float(np.linalg.norm(grad)))
    return worst_rel, worst_foc


def _paired_groups(ds):
    x0, x1 = ds.X[ds.a == 0], ds.X[ds.a == 1]
    n = min(len(x0), len(x1))
    return x0[:n], x1[:n]


def prop3_errors(seed=0, n_per_cell=500, lambda1=1.0, lambda2=0.5):
    """Worst relative gap to gradient descent (identity and degree-2 maps) and
    the identity-map D error against the outer product of the mean gap."""
    ds = synth_two_group(seed, n_per_cell=n_per_cell, dim=3)
    x0, x1 = _paired_groups(ds)
    worst = 0.0
    for fmap in (cf.IdentityMap(), cf.PolynomialMap(2)):
        inputs = cf.mean_embeddings(ds.X, ds.y, ds.a, fmap)
        D = cf.d_matrix(x0, x1, fmap)
        v = cf.prop3_solution(inputs.delta_pm, D, lambda1, lambda2)
        ref = cf.gd_oracle("mixup_l2", inputs.delta_pm, lambda1, lambda2, D=D)
        worst = max(worst, _rel(v, ref))
    gap = x0.mean(axis=0) - x1.mean(axis=0)
    d_err = float(np.max(np.abs(cf.d_matrix(x0, x1, cf.IdentityMap()) - np.outer(gap, gap))))
    return worst, d_err


def _random_setup(rng, hidden, n=256, dim=10):
    model = MlpModel.init(int(rng.integers(2**31)), [dim, hidden, 1])
    shift = rng.normal(size=dim)
    pair = PairedBatch(rng.normal(size=(n, dim)), rng.normal(size=(n, dim)) + shift)
    return model, pair


def path_integral_error(seed=0, n_models=20):
    """max |int_0^1 mu'(t) dt - (mu(1) - mu(0))| with a 201-point trapezoid."""
    rng = np.random.default_rng(seed)
    grid = uniform_grid(201)
    worst = 0.0
    for k in range(n_models):
        model, pair = _random_setup(rng, 64 if k % 2 == 0 else 200)
        curve = mu_path(model, pair, [0.0, 1.0])
        worst = max(worst, abs(integrated_slope(model, pair, grid) - (curve.mu[-1] - curve.mu[0])))
    return worst


def jensen_violation(seed=0, n_models=100, n_points=51):
    """Largest amount by which |mu(1) - mu(0)| exceeds the arc length (0 if never)."""
    rng = np.random.default_rng(seed)
    grid = uniform_grid(n_points)
    worst = 0.0
    for k in range(n_models):
        model, pair = _random_setup(rng, 64 if k % 2 == 0 else 200)
        for space in ("input", "latent"):
            curve = mu_path(model, pair, [0.0, 1.0], space)
            excess = abs(curve.mu[-1] - curve.mu[0]) - arc_length(model, pair, grid, space)
            worst = max(worst, excess)
    return max(worst, 0.0)


def fd_jvp_error(seed=0, n_models=10, h=1e-6, floor=1e-4):
    """Worst relative disagreement between central-difference and jvp slopes.

    The step is small because ReLU kinks inside the difference window bias the
    central difference by O(h) on input-space paths; at h = 1e-6 any residual
    disagreement points at the jvp, not at the kinks.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_models):
        model, pair = _random_setup(rng, 64 if k % 2 == 0 else 200)
        for space in ("input", "latent"):
            for t in rng.uniform(0.1, 0.9, size=3):
                fd = path_derivative(model, pair, t, "fd", h, space)
                jvp = path_derivative(model, pair, t, "jvp", space=space)
                worst = max(worst, abs(fd - jvp) / max(abs(fd), abs(jvp), floor))
    return worst


def run_checks(seed=0, tolerance_scale=1.0, lambda1=None):
    """Run every check; returns a list of Check records."""
    tol = {k: v * tolerance_scale for k, v in TOLERANCES.items()}
    checks = []

    def record(name, error, detail=""):
        checks.append(Check(name, float(error), tol[name], bool(error <= tol[name]), detail))

    start = time.perf_counter()
    rel, foc = prop2_errors(seed, lambda1=lambda1)
    note = "" if lambda1 is None else f"lambda1 fixed at {lambda1}"
    record("prop2_vs_gd", rel, note)
    record("prop2_first_order", foc, note)
    checks[-1].seconds = checks[-2].seconds = time.perf_counter() - start

    start = time.perf_counter()
    rel3, d_err = prop3_errors(seed)
    record("prop3_vs_gd", rel3, "identity and degree-2 polynomial maps")
    record("identity_d_matrix", d_err)
    checks[-1].seconds = checks[-2].seconds = time.perf_counter() - start

    for name, fn in (("path_integral_identity", path_integral_error),
                     ("jensen_bound", jensen_violation),
                     ("fd_vs_jvp", fd_jvp_error)):
        start = time.perf_counter()
        record(name, fn(seed))
        checks[-1].seconds = time.perf_counter() - start
    return checks


def report(checks):
    return {"passed": all(c.passed for c in checks), "checks": [asdict(c) for c in checks]}
