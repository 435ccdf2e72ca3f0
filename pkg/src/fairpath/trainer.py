"""Penalized training (ERM, gap regularization, fair mixup, adversarial debiasing)
and the lambda sweep that produces tradeoff tables."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import metrics
from .data import BalancedSampler, split
from .mixup import DEFAULT_H, fair_mixup_penalty, gap_penalty, sample_t
from .model import MlpModel, bce_loss

log = logging.getLogger(__name__)

METHODS = ("erm", "gap_reg", "fair_mixup", "adv_debias")
DEFAULT_LAMBDAS = (0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0)
RECORD_COLUMNS = [
    "method", "constraint", "space", "lambda", "seed", "epoch_selected",
    "train_ap", "test_ap", "train_ddp", "test_ddp", "train_deo", "test_deo",
    "test_mean_thresh_dp", "test_mean_thresh_eo", "status",
]
METRIC_COLUMNS = RECORD_COLUMNS[6:14]
# one-hot designs (Adult) go through CSR products below this fill ratio
SPARSE_DENSITY = 0.25


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    method: str = "erm"
    constraint: str = "dp"
    space: str = "input"
    lambda_: float = 0.0
    penalty_form: str = "abs"
    h: float = DEFAULT_H
    epochs: int = 20
    batch_size: int = 1000
    learning_rate: float = 1e-3
    seed: int = 0
    hidden_dims: tuple = (200,)
    split: tuple = (0.6, 0.2, 0.2)
    selection: str = "constrained"
    ap_tolerance: float = 0.01
    adv_hidden: int = 50
    t_sampling: str = "uniform[h,1-h], one t per batch"

    def validate(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.constraint not in ("dp", "eo"):
            raise ValueError("constraint must be 'dp' or 'eo'")
        if self.space not in ("input", "latent"):
            raise ValueError("space must be 'input' or 'latent'")
        if self.penalty_form not in ("abs", "squared"):
            raise ValueError("penalty_form must be 'abs' or 'squared'")
        if self.lambda_ < 0 or not math.isfinite(self.lambda_):
            raise ValueError("lambda must be a finite non-negative number")
        if not 0 < self.h < 0.5:
            raise ValueError("h must lie in (0, 0.5)")
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")
        if self.selection not in ("constrained", "best_ap", "last"):
            raise ValueError(f"unknown selection rule {self.selection!r}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        d["hidden_dims"] = list(self.hidden_dims)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        for key in ("hidden_dims", "split"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TradeoffRecord:
    method: str
    constraint: str
    space: str
    lambda_: float
    seed: int
    epoch_selected: int = -1
    train_ap: float = float("nan")
    test_ap: float = float("nan")
    train_ddp: float = float("nan")
    test_ddp: float = float("nan")
    train_deo: float = float("nan")
    test_deo: float = float("nan")
    test_mean_thresh_dp: float = float("nan")
    test_mean_thresh_eo: float = float("nan")
    status: str = "ok"
    fingerprint: str = ""

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        return d

    def row(self):
        d = self.to_dict()
        out = []
        for col in RECORD_COLUMNS:
            v = d[col]
            out.append(repr(float(v)) if isinstance(v, float) else str(v))
        return out


@dataclass
class TrainResult:
    model: MlpModel
    record: TradeoffRecord
    history: list = field(default_factory=list)


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        """In-place update of ``params``."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class Adversary:
    """Two-layer MLP predicting the sensitive attribute from the classifier score
    (and the label, for equalized odds)."""

    def __init__(self, rng, hidden=50, use_label=False):
        self.use_label = use_label
        self.params = [rng.normal(0.0, np.sqrt(2.0), size=(1, hidden))]
        if use_label:
            self.params.append(rng.normal(0.0, np.sqrt(2.0), size=(1, hidden)))
        self.params += [np.zeros(hidden), rng.normal(0.0, np.sqrt(2.0 / hidden), size=(hidden, 1)), np.zeros(1)]

    def forward(self, scores, labels, params=None):
        p = self.params if params is None else params
        h = ad.reshape(scores, -1, 1) @ p[0]
        if self.use_label:
            h = h + np.asarray(labels, dtype=np.float64).reshape(-1, 1) @ p[1]
        w2, b2 = p[-2], p[-1]
        h = ad.relu(h + p[-3])
        return ad.reshape(ad.sigmoid(h @ w2 + b2), -1)

    def loss(self, scores, labels, sensitive, params=None):
        return bce_loss(self.forward(scores, labels, params), sensitive)


def adversarial_step(model, adversary, batch, lam, opt, adv_opt, params=None):
    """One classifier step on BCE(y) - lam * BCE_adv, then one adversary step.

    Returns ``(classifier_objective, adversary_loss)``. With ``lam == 0`` the
    classifier update is exactly the ERM update.
    """
    params = model.parameters() if params is None else params
    with ad.Tape() as tape:
        pv = [tape.watch(p) for p in params]
        scores = model.forward(batch.X, pv)
        obj = bce_loss(scores, batch.y)
        if lam > 0:
            obj = obj - lam * adversary.loss(scores, batch.y, batch.a)
        grads = tape.gradient(obj, pv)
    score_values = scores.value
    value = float(obj.value)
    if not math.isfinite(value):
        raise TrainingAborted(f"non-finite classifier objective (lambda={lam})")
    opt.step(params, grads)
    with ad.Tape() as tape:
        av = [tape.watch(p) for p in adversary.params]
        adv_loss = adversary.loss(score_values, batch.y, batch.a, av)
        adv_grads = tape.gradient(adv_loss, av)
    adv_value = float(adv_loss.value)
    if not math.isfinite(adv_value):
        raise TrainingAborted(f"non-finite adversary loss (lambda={lam})")
    adv_opt.step(adversary.params, adv_grads)
    return value, adv_value


def select_model(history, rule="constrained", ap_tolerance=0.01):
    """Pick an epoch from validation history.

    ``constrained``: smallest validation gap among epochs whose AP is within
    ``ap_tolerance`` of the best validation AP (earliest on ties), falling back
    to the best-AP epoch. ``best_ap`` and ``last`` are also available.
    """
    if not history:
        raise ValueError("empty history")
    aps = [h["val_ap"] for h in history]
    if rule == "last":
        return len(history) - 1
    best_idx = int(np.nanargmax(aps)) if not all(math.isnan(a) for a in aps) else 0
    if rule == "best_ap":
        return best_idx
    best = aps[best_idx]
    feasible = [i for i, h in enumerate(history)
                if h["val_ap"] >= best - ap_tolerance and math.isfinite(h["val_gap"])]
    if not feasible:
        return best_idx
    return min(feasible, key=lambda i: (history[i]["val_gap"], i))


def seed_streams(seed):
    """Split, init, batch, t and adversary seeds of one run, derived from ``seed`` alone."""
    children = np.random.SeedSequence(seed).spawn(5)
    return [int(c.generate_state(1)[0]) for c in children]


def evaluate(model, ds, thresholds=metrics.DEFAULT_THRESHOLDS):
    scores = model.forward(ds.X)
    return {
        "ap": metrics.average_precision(scores, ds.y),
        "ddp": metrics.delta_dp(scores, ds.a),
        "deo": metrics.delta_eo(scores, ds.y, ds.a),
        "mean_thresh_dp": metrics.mean_thresholded_dp(scores, ds.a, thresholds),
        "mean_thresh_eo": metrics.mean_thresholded_eo(scores, ds.y, ds.a, thresholds),
    }


def run_splits(config, dataset):
    """The (train, val, test) split ``train`` uses for ``config``."""
    return split(dataset, config.split, seed_streams(config.seed)[0])


def train(config, dataset, splits=None):
    """Train one model; returns model (selected epoch), record and epoch history."""
    config.validate()
    _, init_seed, batch_seed, t_seed, adv_seed = seed_streams(config.seed)
    train_ds, val_ds, test_ds = splits if splits is not None else run_splits(config, dataset)
    if not train_ds.has_all_cells():
        raise ValueError("training data must contain all four (a, y) cells")
    model = MlpModel.init(init_seed, [train_ds.dim, *config.hidden_dims, 1])
    params = model.parameters()
    opt = Adam(params, config.learning_rate)
    sampler = BalancedSampler(train_ds, config.constraint, config.batch_size, np.random.default_rng(batch_seed),
                              sparse=train_ds.density < SPARSE_DENSITY)
    t_rng = np.random.default_rng(t_seed)
    lam = float(config.lambda_) if config.method != "erm" else 0.0
    adversary = adv_opt = None
    if config.method == "adv_debias":
        adversary = Adversary(np.random.default_rng(adv_seed), config.adv_hidden, config.constraint == "eo")
        adv_opt = Adam(adversary.params, config.learning_rate)

    history, snapshots = [], []
    for epoch in range(config.epochs):
        losses = []
        for b, batch in enumerate(sampler.epoch()):
            if config.method == "adv_debias":
                try:
                    value, _ = adversarial_step(model, adversary, batch, lam, opt, adv_opt, params)
                except TrainingAborted as exc:
                    raise TrainingAborted(f"{exc} at epoch {epoch}, batch {b}") from None
                losses.append(value)
                continue
            t = sample_t(t_rng, config.h) if config.method == "fair_mixup" else None
            with ad.Tape() as tape:
                pv = [tape.watch(p) for p in params]
                obj = bce_loss(model.forward(batch.X, pv), batch.y)
                if lam > 0 and config.method == "gap_reg":
                    obj = obj + lam * gap_penalty(model, batch.pairs, pv)
                elif lam > 0 and config.method == "fair_mixup":
                    obj = obj + lam * fair_mixup_penalty(model, batch.pairs, t, config.h, config.space,
                                                         config.penalty_form, pv)
                grads = tape.gradient(obj, pv)
            value = float(obj.value)
            if not math.isfinite(value):
                raise TrainingAborted(f"non-finite loss at epoch {epoch}, batch {b}, lambda {lam}")
            opt.step(params, grads)
            losses.append(value)
        val_scores = model.forward(val_ds.X)
        gap = (metrics.delta_dp(val_scores, val_ds.a) if config.constraint == "dp"
               else metrics.delta_eo(val_scores, val_ds.y, val_ds.a))
        history.append({"epoch": epoch, "train_objective": float(np.mean(losses)),
                        "val_ap": metrics.average_precision(val_scores, val_ds.y), "val_gap": gap})
        snapshots.append([p.copy() for p in params])

    chosen = select_model(history, config.selection, config.ap_tolerance)
    model.set_parameters(snapshots[chosen])
    tr, te = evaluate(model, train_ds), evaluate(model, test_ds)
    record = TradeoffRecord(
        config.method, config.constraint, config.space, lam, config.seed, chosen,
        tr["ap"], te["ap"], tr["ddp"], te["ddp"], tr["deo"], te["deo"],
        te["mean_thresh_dp"], te["mean_thresh_eo"], "ok", config.fingerprint(),
    )
    return TrainResult(model, record, history)


@dataclass
class TradeoffTable:
    records: list

    def summary(self):
        groups = {}
        for r in self.records:
            groups.setdefault((r.method, r.constraint, r.space, r.lambda_), []).append(r)
        rows = []
        for (method, constraint, space, lam), recs in groups.items():
            ok = [r for r in recs if r.status == "ok"]
            row = {"method": method, "constraint": constraint, "space": space, "lambda": lam,
                   "n_runs": len(recs), "n_failed": len(recs) - len(ok)}
            for col in METRIC_COLUMNS:
                vals = np.array([getattr(r, col) for r in ok])
                row[f"{col}_mean"] = float(vals.mean()) if len(vals) else float("nan")
                row[f"{col}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            rows.append(row)
        return rows

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(RECORD_COLUMNS)
            for r in self.records:
                w.writerow(r.row())

    def summary_to_csv(self, path):
        rows = self.summary()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            header = list(rows[0]) if rows else ["method", "constraint", "space", "lambda"]
            w.writerow(header)
            for row in rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in row.values()])

    def select(self, **criteria):
        key = {"lambda": "lambda_"}
        return [r for r in self.records
                if all(getattr(r, key.get(k, k)) == v for k, v in criteria.items())]


_WORKER_DATASET = None


def _init_worker(dataset):
    global _WORKER_DATASET
    _WORKER_DATASET = dataset


def _run_cell(config_dict, dataset=None, keep_model=False):
    config = TrainConfig.from_dict(config_dict)
    dataset = _WORKER_DATASET if dataset is None else dataset
    try:
        result = train(config, dataset)
    except (TrainingAborted, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.warning("run %s failed: %s", config.fingerprint(), exc)
        rec = TradeoffRecord(config.method, config.constraint, config.space,
                             float(config.lambda_) if config.method != "erm" else 0.0,
                             config.seed, status="failed", fingerprint=config.fingerprint())
        return rec, None
    return result.record, (result.model.to_dict() if keep_model else None)


def sweep_configs(base, lambdas, seeds, methods=None):
    """Cartesian product of methods x lambdas x seeds (ERM runs once per seed)."""
    if not lambdas or not seeds:
        raise ValueError("lambda list and seed list must be non-empty")
    methods = [base.method] if methods is None else list(methods)
    configs = []
    for method in methods:
        lams = [0.0] if method == "erm" else lambdas
        for lam in lams:
            for seed in seeds:
                cfg = TrainConfig.from_dict({**base.to_dict(), "method": method, "lambda": float(lam),
                                             "seed": int(seed)})
                configs.append(cfg.validate())
    return configs


def sweep(base, lambdas, seeds, dataset, methods=None, jobs=1, keep_models=False):
    """Train every cell independently; failed cells are marked, others proceed.

    Returns the table and, if ``keep_models``, the selected models keyed by
    ``(method, lambda, seed)``.
    """
    configs = sweep_configs(base, lambdas, seeds, methods)
    dicts = [c.to_dict() for c in configs]
    if jobs > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(dataset,)) as pool:
            results = list(pool.map(_run_cell, dicts, [None] * len(dicts), [keep_models] * len(dicts)))
    else:
        results = [_run_cell(d, dataset, keep_models) for d in dicts]
    table = TradeoffTable([r for r, _ in results])
    if not keep_models:
        return table
    models = {(r.method, r.lambda_, r.seed): MlpModel.from_dict(m) for r, m in results if m is not None}
    return table, models
