"""Datasets: UCI Adult ingestion, a synthetic two-group generator, splits and
group-balanced batch sampling."""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .mixup import PairedBatch

log = logging.getLogger(__name__)

ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education-num", "marital-status",
    "occupation", "relationship", "race", "sex", "capital-gain", "capital-loss",
    "hours-per-week", "native-country", "income",
]
ADULT_CONTINUOUS = ["age", "education-num", "capital-gain", "capital-loss", "hours-per-week"]
ADULT_DROPPED = ["fnlwgt", "income"]
N_BINS = 10
CELLS = ((0, 0), (0, 1), (1, 0), (1, 1))


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    a: np.ndarray
    feature_names: list = field(default_factory=list)
    provenance: str = ""

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y).astype(np.int64)
        self.a = np.asarray(self.a).astype(np.int64)
        n = len(self.X)
        if self.X.ndim != 2 or len(self.y) != n or len(self.a) != n:
            raise ValueError("X, y and a must agree on the number of rows")
        if not self.feature_names:
            self.feature_names = [f"x{j}" for j in range(self.X.shape[1])]
        if len(self.feature_names) != self.X.shape[1]:
            raise ValueError("feature_names length does not match X")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("features must be finite")

    def __len__(self):
        return len(self.X)

    @property
    def density(self):
        return float(np.count_nonzero(self.X)) / max(self.X.size, 1)

    @property
    def dim(self):
        return self.X.shape[1]

    def subset(self, idx):
        return Dataset(self.X[idx], self.y[idx], self.a[idx], list(self.feature_names), self.provenance)

    def cell_indices(self, a, y=None):
        mask = self.a == a if y is None else (self.a == a) & (self.y == y)
        return np.flatnonzero(mask)

    def has_all_cells(self):
        return all(np.any((self.a == a) & (self.y == y)) for a, y in CELLS)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(list(self.feature_names) + ["label", "sensitive"])
            for row, yi, ai in zip(self.X, self.y, self.a):
                w.writerow([repr(float(v)) for v in row] + [int(yi), int(ai)])

    @classmethod
    def from_csv(cls, path, provenance=""):
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=np.float64)
        if header[-2:] != ["label", "sensitive"]:
            raise DataFormatError("last two CSV columns must be 'label' and 'sensitive'")
        return cls(body[:, :-2], body[:, -2], body[:, -1], header[:-2], provenance or str(path))


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_adult_rows(path):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, fields in enumerate(csv.reader(fh, skipinitialspace=True), start=1):
            if not fields or (len(fields) == 1 and (not fields[0].strip() or fields[0].startswith("|"))):
                continue
            if len(fields) != len(ADULT_COLUMNS):
                raise DataFormatError(f"{path}:{lineno}: expected {len(ADULT_COLUMNS)} fields, got {len(fields)}")
            fields = [f.strip() for f in fields]
            if "?" in fields:
                continue
            rows.append(fields)
    return rows


def load_adult(data_path, test_path=None, include_sensitive=False):
    """Read the UCI Adult files into a one-hot encoded Dataset.

    Rows with a missing field are dropped. Continuous columns are cut into 10
    equal-width bins whose edges come from ``data_path`` alone and then one-hot
    encoded; ``fnlwgt`` is dropped. ``sex`` becomes the sensitive attribute
    (1 = Male) and is left out of the features unless ``include_sensitive``.
    """
    data_path = Path(data_path)
    if data_path.is_dir():
        test_path = data_path / "adult.test" if test_path is None else test_path
        data_path = data_path / "adult.data"
    train_rows = _read_adult_rows(data_path)
    test_rows = _read_adult_rows(test_path) if test_path is not None else []
    rows = train_rows + test_rows
    if not train_rows:
        raise DataFormatError(f"{data_path}: no usable rows")
    col = {name: j for j, name in enumerate(ADULT_COLUMNS)}

    blocks, names = [], []
    for name in ADULT_COLUMNS:
        if name in ADULT_DROPPED or (name == "sex" and not include_sensitive):
            continue
        j = col[name]
        if name in ADULT_CONTINUOUS:
            values = np.array([float(r[j]) for r in rows])
            ref = values[: len(train_rows)]
            lo, hi = ref.min(), ref.max()
            width = (hi - lo) / N_BINS if hi > lo else 1.0
            codes = np.clip(np.floor((values - lo) / width), 0, N_BINS - 1).astype(int)
            levels = list(range(N_BINS))
            names += [f"{name}_bin{k}" for k in levels]
        else:
            raw = [r[j] for r in rows]
            levels = sorted(set(raw))
            lookup = {v: k for k, v in enumerate(levels)}
            codes = np.array([lookup[v] for v in raw])
            names += [f"{name}={v}" for v in levels]
        onehot = np.zeros((len(rows), len(levels)))
        onehot[np.arange(len(rows)), codes] = 1.0
        blocks.append(onehot)

    y = np.array([r[col["income"]].rstrip(".") == ">50K" for r in rows], dtype=np.int64)
    a = np.array([r[col["sex"]] == "Male" for r in rows], dtype=np.int64)
    digests = [file_digest(data_path)] + ([file_digest(test_path)] if test_path is not None else [])
    provenance = "uci-adult:" + ",".join(d[:12] for d in digests)
    return Dataset(np.hstack(blocks), y, a, names, provenance)


def synth_two_group(seed, n_per_cell=1000, group_shift=1.0, label_shift=2.0, dim=2, label_bias=0.0):
    """Gaussian cells with mean y*label_shift*e1 + a*group_shift*e2 and unit covariance.

    ``label_bias`` in [0, 1) skews base rates: cell (a, y) holds
    n_per_cell*(1 + label_bias) samples when y == a and n_per_cell*(1 - label_bias)
    otherwise, so group 1 has more positives. 0 gives equal cells.
    """
    if n_per_cell < 1 or dim < 2:
        raise ValueError("need n_per_cell >= 1 and dim >= 2")
    if not 0.0 <= label_bias < 1.0:
        raise ValueError("label_bias must be in [0, 1)")
    rng = np.random.default_rng(seed)
    X, y, a = [], [], []
    for ai, yi in CELLS:
        n = max(1, int(round(n_per_cell * (1 + label_bias if ai == yi else 1 - label_bias))))
        mean = np.zeros(dim)
        mean[0] = yi * label_shift
        mean[1] = ai * group_shift
        X.append(rng.normal(size=(n, dim)) + mean)
        y.append(np.full(n, yi))
        a.append(np.full(n, ai))
    tag = f"synth:seed={seed},n={n_per_cell},gs={group_shift},ls={label_shift},dim={dim},lb={label_bias}"
    return Dataset(np.vstack(X), np.concatenate(y), np.concatenate(a), provenance=tag)


def split(dataset, fractions=(0.6, 0.2, 0.2), seed=0, max_tries=100):
    """Seeded disjoint train/val/test split; every part keeps all four (a, y) cells."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) <= 0 or not math.isclose(sum(fractions), 1.0):
        raise ValueError(f"split fractions must be three positive numbers summing to 1, got {fractions}")
    n = len(dataset)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        perm = rng.permutation(n)
        parts = [perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]]
        subsets = [dataset.subset(np.sort(p)) for p in parts]
        if all(s.has_all_cells() for s in subsets):
            return tuple(subsets)
    raise ValueError("could not find a split where every part contains all four (a, y) cells")


@dataclass
class Batch:
    X: np.ndarray
    y: np.ndarray
    a: np.ndarray
    pairs: list


class BalancedSampler:
    """Group-balanced batches: ``batch_size/2`` per group (dp) or ``/4`` per (a, y) cell (eo).

    An epoch has ceil(largest cell / quota) batches; each cell is drawn from
    fresh permutations, cycling smaller cells, so every index appears at least
    once per epoch. Cells smaller than their quota are drawn with replacement
    and ``replaced`` is set. With ``sparse`` the feature blocks are CSR matrices.
    """

    def __init__(self, dataset, constraint, batch_size, rng, sparse=False):
        if constraint not in ("dp", "eo"):
            raise ValueError(f"constraint must be 'dp' or 'eo', got {constraint!r}")
        per = 2 if constraint == "dp" else 4
        if batch_size % per:
            raise ValueError(f"batch_size must be divisible by {per} for {constraint}")
        self.dataset = dataset
        self.constraint = constraint
        self.quota = batch_size // per
        self.rng = rng
        self._X = sp.csr_matrix(dataset.X) if sparse else dataset.X
        if constraint == "dp":
            self.cells = [dataset.cell_indices(0), dataset.cell_indices(1)]
        else:
            self.cells = [dataset.cell_indices(a, y) for y in (0, 1) for a in (0, 1)]
        if any(len(c) == 0 for c in self.cells):
            raise ValueError("every sampling cell must be non-empty")
        self.replaced = any(len(c) < self.quota for c in self.cells)
        if self.replaced:
            log.warning("some cells are smaller than the per-batch quota %d; sampling with replacement",
                        self.quota)
        self.n_batches = max(1, math.ceil(max(len(c) for c in self.cells) / self.quota))

    def _stream(self, cell, length):
        if len(cell) < self.quota:
            return cell[self.rng.integers(0, len(cell), size=length)]
        chunks, total = [], 0
        while total < length:
            chunks.append(cell[self.rng.permutation(len(cell))])
            total += len(cell)
        return np.concatenate(chunks)[:length]

    def epoch(self):
        length = self.n_batches * self.quota
        streams = [self._stream(c, length) for c in self.cells]
        ds, X = self.dataset, self._X
        for k in range(self.n_batches):
            parts = [s[k * self.quota:(k + 1) * self.quota] for s in streams]
            idx = np.concatenate(parts)
            blocks = [X[p] for p in parts]
            pairs = [PairedBatch(blocks[i], blocks[i + 1]) for i in range(0, len(blocks), 2)]
            yield Batch(X[idx], ds.y[idx], ds.a[idx], pairs)


def balanced_batches(dataset, constraint, batch_size, seed, epochs=1):
    """Flat stream of ``epochs`` epochs of balanced batches."""
    sampler = BalancedSampler(dataset, constraint, batch_size, np.random.default_rng(seed))
    for _ in range(epochs):
        yield from sampler.epoch()


def group_pairing(dataset, seed, n_pairs=None):
    """Seeded row pairing of group 0 with group 1, ``min(n0, n1)`` pairs by default."""
    rng = np.random.default_rng(seed)
    idx0, idx1 = dataset.cell_indices(0), dataset.cell_indices(1)
    n = min(len(idx0), len(idx1)) if n_pairs is None else int(n_pairs)
    if n < 1 or n > min(len(idx0), len(idx1)):
        raise ValueError(f"cannot form {n} pairs from groups of size {len(idx0)} and {len(idx1)}")
    return PairedBatch(dataset.X[rng.permutation(idx0)[:n]], dataset.X[rng.permutation(idx1)[:n]])
