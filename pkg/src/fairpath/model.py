"""ReLU MLP classifiers with a sigmoid head and a latent split point."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

BCE_EPS = 1e-7


@dataclass
class MlpModel:
    """Stack of affine layers; ReLU on every layer but the last.

    ``split_index`` layers form the encoder ``g``; the remaining layers plus
    the output nonlinearity form the predictor head. ``output`` is
    ``"sigmoid"`` for classifiers, ``"identity"`` only for diagnostics.
    """

    weights: list
    biases: list
    split_index: int
    output: str = "sigmoid"
    seed: int | None = None
    layer_dims: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be non-empty and of equal length")
        dims = [self.weights[0].shape[0]]
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or w.shape[0] != dims[-1] or b.shape != (w.shape[1],):
                raise ValueError("layer dimensions do not chain")
            dims.append(w.shape[1])
        if not 0 <= self.split_index < len(self.weights):
            raise ValueError(f"split_index must be in [0, {len(self.weights)})")
        if self.output not in ("sigmoid", "identity"):
            raise ValueError(f"unknown output {self.output!r}")
        self.layer_dims = dims

    @classmethod
    def init(cls, seed, layer_dims, split_index=None, output="sigmoid"):
        layer_dims = [int(d) for d in layer_dims]
        if len(layer_dims) < 2 or layer_dims[-1] != 1 or min(layer_dims) < 1:
            raise ValueError(f"invalid layer_dims {layer_dims}: need >= 2 positive dims ending in 1")
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        if split_index is None:
            split_index = len(weights) - 1
        return cls(weights, biases, split_index, output=output, seed=seed)

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def latent_dim(self):
        return self.layer_dims[self.split_index]

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_parameters(self, params):
        params = [np.asarray(p, dtype=np.float64) for p in params]
        self.weights = params[0::2]
        self.biases = params[1::2]

    def copy(self):
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        self.split_index, self.output, self.seed)

    def _layers(self, params):
        if params is None:
            return list(zip(self.weights, self.biases))
        return list(zip(params[0::2], params[1::2]))

    def _run(self, h, layers, start):
        last = self.n_layers - 1
        for i, (w, b) in enumerate(layers, start=start):
            h = h @ w + b
            if i < last:
                h = ad.relu(h)
        return h

    def _check_input(self, X, width):
        if X.ndim != 2 or X.shape[1] != width:
            raise ValueError(f"expected input of shape (n, {width}), got {tuple(X.shape)}")

    def encode(self, X, params=None):
        self._check_input(X, self.layer_dims[0])
        return self._run(X, self._layers(params)[: self.split_index], 0)

    def logits_from_latent(self, Z, params=None):
        self._check_input(Z, self.latent_dim)
        return self._run(Z, self._layers(params)[self.split_index:], self.split_index)

    def predict_from_latent(self, Z, params=None):
        out = self.logits_from_latent(Z, params)
        if self.output == "sigmoid":
            out = ad.sigmoid(out)
        return ad.reshape(out, -1)

    def forward(self, X, params=None):
        """Scores for each row of ``X``; works on arrays, taped Vars and Duals."""
        return self.predict_from_latent(self.encode(X, params), params)

    __call__ = forward

    def to_dict(self):
        return {
            "layer_dims": self.layer_dims,
            "split_index": self.split_index,
            "output": self.output,
            "seed": self.seed,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d):
        model = cls([np.asarray(w, dtype=np.float64).reshape(a, b) for w, a, b in
                     zip(d["weights"], d["layer_dims"][:-1], d["layer_dims"][1:])],
                    [np.asarray(b, dtype=np.float64) for b in d["biases"]],
                    int(d["split_index"]), d.get("output", "sigmoid"), d.get("seed"))
        return model

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def bce_loss(scores, labels):
    """Mean binary cross-entropy, with scores clamped 1e-7 away from {0, 1}."""
    labels = np.asarray(labels, dtype=np.float64)
    s = ad.clip(scores, BCE_EPS, 1.0 - BCE_EPS)
    losses = labels * ad.log(s) + (1.0 - labels) * ad.log(1.0 - s)
    return -ad.mean(losses)
