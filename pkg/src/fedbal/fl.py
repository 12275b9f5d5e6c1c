"""Desk-scale federated averaging core.

The learner is multinomial logistic regression trained with full-batch
gradient steps, which keeps every run deterministic and fast while still
producing real accuracy/loss signals for the scheduling layer.  Data comes
from a seeded Gaussian-mixture generator (or a columnar text file) and is
split across clients either evenly per label or by Dirichlet proportions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FedbalError, InvalidDeviceError


@dataclass
class Model:
    """Flat weight vector for a (dims+1) x classes logistic regression."""

    weights: np.ndarray
    dims: int
    classes: int

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.size != (self.dims + 1) * self.classes:
            raise FedbalError("weight vector does not match dims/classes")
        if not np.all(np.isfinite(self.weights)):
            raise FedbalError("model weights must be finite")

    @property
    def parameter_count(self) -> int:
        return self.weights.size

    def matrix(self) -> np.ndarray:
        return self.weights.reshape(self.dims + 1, self.classes)


@dataclass
class ClientDataset:
    """Feature matrix plus integer class labels."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.labels) != len(self.features):
            raise FedbalError("features must be 2-D with one label per row")

    @property
    def size(self) -> int:
        return len(self.labels)


def init_model(dims: int, classes: int) -> Model:
    return Model(np.zeros((dims + 1) * classes), dims, classes)


def make_synthetic(samples: int, dims: int, classes: int, separation: float, seed) -> ClientDataset:
    """Gaussian blobs with unit noise around class means `separation` apart.

    Class means sit on randomly rotated +/- coordinate axes, so any two
    opposite classes are exactly `separation` apart and the task is linearly
    separable for separation well above ~2.
    """
    if classes > 2 * dims:
        raise FedbalError("need classes <= 2 * dims for distinct class means")
    rng = np.random.default_rng(seed)
    axes = np.zeros((classes, dims))
    for c in range(classes):
        axes[c, (c // 2) % dims] = separation / 2 * (1 if c % 2 == 0 else -1)
    q, _ = np.linalg.qr(rng.standard_normal((dims, dims)))
    means = axes @ q
    labels = rng.integers(0, classes, size=samples)
    features = means[labels] + rng.standard_normal((samples, dims))
    return ClientDataset(features, labels)


def load_columnar(path, delimiter=None) -> ClientDataset:
    """Read a whitespace- or delimiter-separated text table; last column = label."""
    table = np.loadtxt(path, delimiter=delimiter, ndmin=2)
    if table.shape[1] < 2:
        raise FedbalError(f"{path}: need at least one feature column plus labels")
    return ClientDataset(table[:, :-1], table[:, -1].astype(np.int64))


def partition_iid(data: ClientDataset, n: int, seed) -> list[ClientDataset]:
    """Even per-label round-robin split into n disjoint client shards."""
    if n < 1:
        raise FedbalError("need at least one client")
    if n > data.size:
        raise FedbalError(f"cannot split {data.size} samples across {n} clients")
    rng = np.random.default_rng(seed)
    shards = [[] for _ in range(n)]
    offset = 0
    for label in np.unique(data.labels):
        idx = np.flatnonzero(data.labels == label)
        rng.shuffle(idx)
        for j, sample in enumerate(idx):
            shards[(offset + j) % n].append(sample)
        offset += len(idx)  # rotate the dealing start so totals stay balanced
    return [
        ClientDataset(data.features[sorted(s)], data.labels[sorted(s)]) for s in shards
    ]


def partition_dirichlet(data: ClientDataset, n: int, concentration: float, seed) -> list[ClientDataset]:
    """Label-skewed split: per-label client proportions drawn from a Dirichlet.

    Redraws the whole assignment until every client holds at least one sample.
    """
    if concentration <= 0:
        raise FedbalError("concentration must be > 0")
    if n < 1:
        raise FedbalError("need at least one client")
    if n > data.size:
        raise FedbalError(f"cannot split {data.size} samples across {n} clients")
    rng = np.random.default_rng(seed)
    labels = np.unique(data.labels)
    for _ in range(1000):
        shards = [[] for _ in range(n)]
        for label in labels:
            idx = np.flatnonzero(data.labels == label)
            rng.shuffle(idx)
            props = rng.dirichlet(np.full(n, concentration))
            cuts = np.floor(np.cumsum(props) * len(idx)).astype(int)[:-1]
            for shard, part in zip(shards, np.split(idx, cuts)):
                shard.extend(part.tolist())
        if all(shards):
            return [
                ClientDataset(data.features[sorted(s)], data.labels[sorted(s)])
                for s in shards
            ]
    raise FedbalError("could not draw a partition with non-empty clients")


def _logits(model: Model, X: np.ndarray) -> np.ndarray:
    W = model.matrix()
    return X @ W[:-1] + W[-1]


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(model: Model, ds: ClientDataset) -> float:
    """Mean negative log-likelihood of the labels."""
    logp = _log_softmax(_logits(model, ds.features))
    return float(-logp[np.arange(ds.size), ds.labels].mean())


def ce_gradient(model: Model, ds: ClientDataset, prox_mu: float = 0.0,
                anchor: Model | None = None) -> np.ndarray:
    """Flat gradient of the mean cross-entropy, plus an optional proximal pull.

    With prox_mu > 0 the objective gains mu/2 * ||w - anchor||^2, which keeps
    local updates near the anchor (the current global model).
    """
    X, y = ds.features, ds.labels
    probs = np.exp(_log_softmax(_logits(model, X)))
    probs[np.arange(ds.size), y] -= 1.0
    probs /= ds.size
    # Flat layout matches Model.matrix(): feature rows first, bias row last.
    grad = np.vstack([X.T @ probs, probs.sum(axis=0)[None, :]]).ravel()
    if prox_mu > 0.0:
        ref = anchor.weights if anchor is not None else 0.0
        grad = grad + prox_mu * (model.weights - ref)
    return grad


def local_train(model: Model, ds: ClientDataset, iterations: int, lr: float,
                prox_mu: float = 0.0, anchor: Model | None = None) -> tuple[Model, float]:
    """Run full-batch gradient steps; returns the new model and its final loss."""
    if ds.size == 0:
        raise FedbalError("cannot train on an empty dataset")
    if iterations < 1:
        raise FedbalError("iterations must be >= 1")
    current = Model(model.weights.copy(), model.dims, model.classes)
    for _ in range(iterations):
        grad = ce_gradient(current, ds, prox_mu=prox_mu, anchor=anchor)
        current = Model(current.weights - lr * grad, model.dims, model.classes)
    return current, cross_entropy(current, ds)


def aggregate(models, sizes) -> Model:
    """Dataset-size-weighted average of client models."""
    models = list(models)
    sizes = np.asarray(list(sizes), dtype=float)
    if not models or len(models) != len(sizes):
        raise FedbalError("need one size per model")
    first = models[0]
    stack = []
    for m in models:
        if m.parameter_count != first.parameter_count:
            raise FedbalError("cannot aggregate models of different shapes")
        stack.append(m.weights)
    weights = sizes / sizes.sum()
    merged = np.einsum("i,ij->j", weights, np.asarray(stack))
    return Model(merged, first.dims, first.classes)


def evaluate(model: Model, ds: ClientDataset) -> tuple[float, float]:
    """(top-1 accuracy, mean cross-entropy) on a held-out set."""
    if ds.size == 0:
        raise FedbalError("cannot evaluate on an empty dataset")
    logp = _log_softmax(_logits(model, ds.features))
    accuracy = float((logp.argmax(axis=1) == ds.labels).mean())
    loss = float(-logp[np.arange(ds.size), ds.labels].mean())
    return accuracy, loss
