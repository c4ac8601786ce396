"""Learning substrate: model parameters, synthetic non-IID data, SGD and evaluation.

Models are small numpy classifiers (softmax regression or a one-hidden-layer
MLP) stored as an ordered tuple of named layers so per-layer similarity has
something to average over.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    """Raised when two models, or a model and a batch, have incompatible shapes."""


@dataclass(frozen=True)
class ModelParams:
    """Ordered named layers. Arrays are treated as immutable values."""

    layers: tuple[tuple[str, np.ndarray], ...]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.layers)

    @property
    def shapes(self) -> tuple[tuple[int, ...], ...]:
        return tuple(v.shape for _, v in self.layers)

    @property
    def num_params(self) -> int:
        return int(sum(v.size for _, v in self.layers))

    def __getitem__(self, name: str) -> np.ndarray:
        for layer_name, values in self.layers:
            if layer_name == name:
                return values
        raise KeyError(name)

    def same_shape(self, other: "ModelParams") -> bool:
        return self.names == other.names and self.shapes == other.shapes

    def check_shape(self, other: "ModelParams") -> None:
        if not self.same_shape(other):
            raise ShapeMismatch(
                f"model layout {list(zip(self.names, self.shapes))} != "
                f"{list(zip(other.names, other.shapes))}"
            )

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for _, v in self.layers])

    def replace(self, values: Iterable[np.ndarray]) -> "ModelParams":
        return ModelParams(tuple((name, v) for (name, _), v in zip(self.layers, values)))

    def allclose(self, other: "ModelParams", atol: float = 0.0) -> bool:
        if not self.same_shape(other):
            return False
        return all(np.allclose(a, b, rtol=0.0, atol=atol) for (_, a), (_, b) in zip(self.layers, other.layers))


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (m, dim) float64
    labels: np.ndarray  # (m,) int64
    num_classes: int

    def __post_init__(self):
        if len(self.labels) == 0:
            raise ValueError("dataset must be non-empty")
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be (m, dim) with one label per row")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, idx: Sequence[int] | np.ndarray) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class PartitionSpec:
    num_nodes: int
    alpha: float
    seed: int

    def __post_init__(self):
        if self.num_nodes < 2:
            raise ValueError("num_nodes must be >= 2")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

def generate_synthetic_dataset(
    num_classes: int,
    examples_per_class: int,
    feature_dim: int,
    cluster_spread: float,
    seed: int,
) -> Dataset:
    """Gaussian-cluster classification data, one isotropic cluster per class.

    Class means are drawn once from N(0, I); examples of class c are
    mean_c + cluster_spread * N(0, I). Rows are grouped by class.
    """
    if num_classes < 1 or examples_per_class < 1 or feature_dim < 1:
        raise ValueError("num_classes, examples_per_class and feature_dim must be >= 1")
    if not cluster_spread > 0:
        raise ValueError("cluster_spread must be > 0")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, feature_dim))
    noise = rng.standard_normal((num_classes, examples_per_class, feature_dim))
    features = (means[:, None, :] + cluster_spread * noise).reshape(-1, feature_dim)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), examples_per_class)
    return Dataset(features, labels, num_classes)


def train_test_split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split: every class keeps round(test_fraction * count) examples for test."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        rng.shuffle(idx)
        n_test = int(round(test_fraction * len(idx)))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    return dataset.subset(np.concatenate(train_idx)), dataset.subset(np.concatenate(test_idx))


def _largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort keeps lower node ids first on equal remainders
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(dataset: Dataset, spec: PartitionSpec) -> list[Dataset]:
    """Split ``dataset`` across ``spec.num_nodes`` shards with Dirichlet(alpha) class skew.

    For every class a proportion vector p ~ Dir(alpha * 1_n) is drawn and the
    class's (shuffled) examples are handed out with largest-remainder rounding.
    Empty shards then take one example from the currently largest shard.
    """
    n = spec.num_nodes
    if n > len(dataset):
        raise ValueError(f"cannot split {len(dataset)} examples across {n} nodes")
    rng = np.random.default_rng(spec.seed)
    shards: list[list[int]] = [[] for _ in range(n)]
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) == 0:
            continue
        rng.shuffle(idx)
        p = rng.dirichlet(np.full(n, spec.alpha))
        # tiny alpha can underflow to a NaN/zero vector
        if not np.all(np.isfinite(p)) or p.sum() <= 0:
            p = np.zeros(n)
            p[rng.integers(n)] = 1.0
        counts = _largest_remainder(len(idx), p / p.sum())
        start = 0
        for node, cnt in enumerate(counts):
            shards[node].extend(idx[start:start + cnt].tolist())
            start += cnt

    for node in range(n):
        if not shards[node]:
            donor = max(range(n), key=lambda j: (len(shards[j]), -j))
            shards[node].append(shards[donor].pop())
    return [dataset.subset(sorted(s)) for s in shards]


def save_dataset_csv(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{j}" for j in range(dataset.dim)] + ["label"])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def load_dataset_csv(path: str | Path, num_classes: int | None = None) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = list(reader)
    features = np.array([[float(v) for v in r[:-1]] for r in rows], dtype=np.float64)
    labels = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return Dataset(features, labels, num_classes)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

def init_model(
    feature_dim: int,
    num_classes: int,
    seed: int,
    hidden: int = 0,
    scale: float = 0.1,
) -> ModelParams:
    """Random small-normal initialisation.

    ``hidden == 0`` gives softmax regression (layers ``linear``, ``bias``);
    otherwise a tanh MLP (``hidden``, ``hidden_bias``, ``linear``, ``bias``).
    Biases are random too, so no layer starts with zero norm.
    """
    rng = np.random.default_rng(seed)
    if hidden <= 0:
        return ModelParams((
            ("linear", scale * rng.standard_normal((feature_dim, num_classes))),
            ("bias", scale * rng.standard_normal(num_classes)),
        ))
    return ModelParams((
        ("hidden", scale * rng.standard_normal((feature_dim, hidden))),
        ("hidden_bias", scale * rng.standard_normal(hidden)),
        ("linear", scale * rng.standard_normal((hidden, num_classes))),
        ("bias", scale * rng.standard_normal(num_classes)),
    ))


def _is_mlp(model: ModelParams) -> bool:
    return model.names[0] == "hidden"


def _input_dim(model: ModelParams) -> int:
    return int(model.layers[0][1].shape[0])


def _check_features(model: ModelParams, features: np.ndarray) -> None:
    if features.ndim != 2 or features.shape[1] != _input_dim(model):
        raise ShapeMismatch(
            f"features of shape {features.shape} do not match model input dim {_input_dim(model)}"
        )


def logits(model: ModelParams, features: np.ndarray) -> np.ndarray:
    _check_features(model, features)
    if _is_mlp(model):
        h = np.tanh(features @ model["hidden"] + model["hidden_bias"])
        return h @ model["linear"] + model["bias"]
    return features @ model["linear"] + model["bias"]


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(model: ModelParams, features: np.ndarray, labels: np.ndarray) -> float:
    logp = _log_softmax(logits(model, features))
    return float(-logp[np.arange(len(labels)), labels].mean())


def gradient(model: ModelParams, features: np.ndarray, labels: np.ndarray) -> list[np.ndarray]:
    """Gradient of the mean cross-entropy, one array per layer in layer order."""
    _check_features(model, features)
    m = len(labels)
    if _is_mlp(model):
        pre = features @ model["hidden"] + model["hidden_bias"]
        h = np.tanh(pre)
        z = h @ model["linear"] + model["bias"]
    else:
        h = features
        z = features @ model["linear"] + model["bias"]
    probs = np.exp(_log_softmax(z))
    probs[np.arange(m), labels] -= 1.0
    dz = probs / m
    g_linear = h.T @ dz
    g_bias = dz.sum(axis=0)
    if not _is_mlp(model):
        return [g_linear, g_bias]
    dh = (dz @ model["linear"].T) * (1.0 - h * h)
    return [features.T @ dh, dh.sum(axis=0), g_linear, g_bias]


def local_sgd_step(model: ModelParams, batch: Dataset, gamma: float) -> ModelParams:
    """One descent step ``x - gamma * grad`` on the batch's mean cross-entropy."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if gamma == 0:
        _check_features(model, batch.features)
        return model
    grads = gradient(model, batch.features, batch.labels)
    return model.replace(v - gamma * g for (_, v), g in zip(model.layers, grads))


def evaluate(model: ModelParams, testset: Dataset) -> tuple[float, float]:
    """Return (accuracy in [0, 1], mean cross-entropy)."""
    z = logits(model, testset.features)
    logp = _log_softmax(z)
    loss = float(-logp[np.arange(len(testset)), testset.labels].mean())
    acc = float(np.mean(z.argmax(axis=1) == testset.labels))
    return acc, loss


def average_models(own: ModelParams, received: Sequence[ModelParams]) -> ModelParams:
    """Uniform elementwise mean of ``own`` and every received model."""
    if not received:
        return own
    for other in received:
        own.check_shape(other)
    out = []
    for li, (_, v) in enumerate(own.layers):
        acc = v.copy()
        for other in received:
            acc += other.layers[li][1]
        out.append(acc / (len(received) + 1))
    return own.replace(out)


def weighted_average(models: Sequence[ModelParams], weights: Sequence[float]) -> ModelParams:
    """Convex combination sum_j w_j * model_j (weights are not renormalised)."""
    base = models[0]
    for other in models[1:]:
        base.check_shape(other)
    out = []
    for li in range(len(base.layers)):
        acc = np.zeros_like(base.layers[li][1])
        for w, m in zip(weights, models):
            acc += w * m.layers[li][1]
        out.append(acc)
    return base.replace(out)


class BatchSampler:
    """Sample batches without replacement, reshuffling at each epoch boundary."""

    def __init__(self, size: int, batch_size: int, rng: np.random.Generator):
        self.size = size
        self.batch_size = max(1, min(batch_size, size))
        self.rng = rng
        self._order = rng.permutation(size)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self.size:
            self._order = self.rng.permutation(self.size)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx
