"""Desk-scale models, SGD training, data partitioning, metrics and baselines.

Models are dense networks stored as one flat weight vector so they can be
encrypted and averaged without caring about their structure.  A single dense
layer with one output is logistic regression; hidden layers use tanh.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit, log_softmax, softmax
from scipy.stats import rankdata

logger = logging.getLogger(__name__)

WEIGHT_CLIP = 1e3


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Architecture:
    """Layer sizes of a dense network, e.g. ``(8, 16, 10)``."""

    sizes: tuple[int, ...]

    @property
    def n_classes(self) -> int:
        return 2 if self.sizes[-1] == 1 else self.sizes[-1]

    @property
    def n_weights(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.sizes[:-1], self.sizes[1:]))

    def layer_slices(self) -> list[slice]:
        """One slice per dense layer (kernel followed by bias)."""
        out, start = [], 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            out.append(slice(start, start + (a + 1) * b))
            start += (a + 1) * b
        return out


@dataclass
class ModelParams:
    weights: np.ndarray
    arch: Architecture
    task_id: str = ""

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.arch.n_weights,):
            raise ValueError(
                f"{self.weights.size} weights for an architecture needing {self.arch.n_weights}"
            )

    def copy(self) -> "ModelParams":
        return ModelParams(self.weights.copy(), self.arch, self.task_id)

    def with_weights(self, weights) -> "ModelParams":
        return ModelParams(np.array(weights, dtype=np.float64), self.arch, self.task_id)


@dataclass
class PeerDataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int = 2

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.X) != len(self.y):
            raise ValueError("features and labels differ in length")

    @property
    def k(self) -> int:
        return len(self.y)

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)

    def subset(self, idx) -> "PeerDataset":
        return PeerDataset(self.X[idx], self.y[idx], self.n_classes)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 1
    learning_rate: float = 0.1
    l1: float = 0.001
    l2: float = 0.0
    # centralized baseline early stopping
    max_epochs: int = 300
    patience: int = 10
    min_delta: float = 0.001

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError("batch_size, epochs and learning_rate must be positive")
        if self.l1 < 0 or self.l2 < 0:
            raise ValueError("regularization weights must be non-negative")


def init_model(arch: Architecture, rng: np.random.Generator, task_id: str = "") -> ModelParams:
    """Glorot-uniform kernels, zero biases."""
    parts = []
    for a, b in zip(arch.sizes[:-1], arch.sizes[1:]):
        limit = np.sqrt(6.0 / (a + b))
        parts.append(rng.uniform(-limit, limit, size=a * b))
        parts.append(np.zeros(b))
    return ModelParams(np.concatenate(parts), arch, task_id)


def _unflatten(weights: np.ndarray, arch: Architecture):
    layers, start = [], 0
    for a, b in zip(arch.sizes[:-1], arch.sizes[1:]):
        W = weights[start : start + a * b].reshape(a, b)
        start += a * b
        bias = weights[start : start + b]
        start += b
        layers.append((W, bias))
    return layers


def _forward(weights: np.ndarray, arch: Architecture, X: np.ndarray):
    acts = [X]
    layers = _unflatten(weights, arch)
    h = X
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        h = z if i == len(layers) - 1 else np.tanh(z)
        acts.append(h)
    return layers, acts


def predict_scores(model: ModelParams, X: np.ndarray) -> np.ndarray:
    """Class probabilities, shape (n, n_classes); binary models give (n, 2)."""
    _, acts = _forward(model.weights, model.arch, np.asarray(X, dtype=np.float64))
    logits = acts[-1]
    if model.arch.sizes[-1] == 1:
        p = expit(logits[:, 0])
        return np.column_stack([1 - p, p])
    return softmax(logits, axis=1)


def data_loss(model: ModelParams, X: np.ndarray, y: np.ndarray) -> float:
    _, acts = _forward(model.weights, model.arch, X)
    logits = acts[-1]
    if model.arch.sizes[-1] == 1:
        z = logits[:, 0]
        return float(np.mean(np.logaddexp(0, z) - y * z))
    return float(-np.mean(log_softmax(logits, axis=1)[np.arange(len(y)), y]))


def objective(model: ModelParams, X, y, l1: float = 0.0, l2: float = 0.0) -> float:
    w = model.weights
    return data_loss(model, X, y) + l1 * np.abs(w).sum() + l2 * np.dot(w, w)


def loss_and_grad(model: ModelParams, X, y, l1: float = 0.0, l2: float = 0.0):
    """Mean cross-entropy plus ``l1*|w|_1 + l2*|w|^2`` and its gradient."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    arch = model.arch
    layers, acts = _forward(model.weights, arch, X)
    n = len(y)
    logits = acts[-1]
    if arch.sizes[-1] == 1:
        z = logits[:, 0]
        loss = float(np.mean(np.logaddexp(0, z) - y * z))
        delta = ((expit(z) - y) / n)[:, None]
    else:
        logp = log_softmax(logits, axis=1)
        loss = float(-np.mean(logp[np.arange(n), y]))
        delta = np.exp(logp)
        delta[np.arange(n), y] -= 1.0
        delta /= n
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        h_in = acts[i]
        grads.append((h_in.T @ delta).ravel())
        grads.append(delta.sum(axis=0))
        if i > 0:
            delta = (delta @ W.T) * (1.0 - h_in**2)
    # grads were collected last layer first as (kernel, bias) pairs
    ordered = []
    for j in range(len(layers)):
        k = 2 * (len(layers) - 1 - j)
        ordered += [grads[k], grads[k + 1]]
    g = np.concatenate(ordered)
    w = model.weights
    loss += l1 * np.abs(w).sum() + l2 * np.dot(w, w)
    g = g + l1 * np.sign(w) + 2.0 * l2 * w
    return loss, g


def local_train(
    model: ModelParams, dataset: PeerDataset, cfg: TrainConfig, rng: np.random.Generator
) -> ModelParams:
    """Mini-batch SGD over ``cfg.epochs`` passes; empty shards return the model unchanged."""
    if dataset.k == 0 or cfg.epochs == 0:
        return model.copy()
    w = model.weights.copy()
    current = model.with_weights(w)
    for _ in range(cfg.epochs):
        order = rng.permutation(dataset.k)
        for start in range(0, dataset.k, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            current.weights = w
            loss, g = loss_and_grad(current, dataset.X[idx], dataset.y[idx], cfg.l1, cfg.l2)
            if not np.isfinite(loss) or not np.all(np.isfinite(g)):
                raise TrainingError(
                    f"non-finite loss {loss} (|w|max={np.abs(w).max():.3g}, batch={len(idx)})"
                )
            w = w - cfg.learning_rate * g
    return model.with_weights(w)


def clip_weights(weights: np.ndarray, limit: float = WEIGHT_CLIP) -> np.ndarray:
    if np.any(np.abs(weights) > limit):
        logger.warning("clipping %d weights to +-%g before encryption",
                       int(np.sum(np.abs(weights) > limit)), limit)
        return np.clip(weights, -limit, limit)
    return weights


# --------------------------------------------------------------------------
# metrics


def binary_auc(y_true: np.ndarray, scores: np.ndarray) -> float | None:
    """Rank-based AUC (Mann-Whitney), ties counted as one half."""
    y_true = np.asarray(y_true).astype(bool)
    n_pos = int(y_true.sum())
    n_neg = len(y_true) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[y_true].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc_score(y: np.ndarray, proba: np.ndarray) -> float | None:
    """Binary AUC, or macro one-vs-rest over classes present in ``y``."""
    y = np.asarray(y)
    if proba.shape[1] == 2:
        return binary_auc(y == 1, proba[:, 1])
    present = np.unique(y)
    if len(present) < 2:
        return None
    vals = [binary_auc(y == c, proba[:, c]) for c in present]
    return float(np.mean([v for v in vals if v is not None]))


def evaluate(model: ModelParams, dataset: PeerDataset) -> dict:
    if dataset.k == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    proba = predict_scores(model, dataset.X)
    p_true = np.clip(proba[np.arange(dataset.k), dataset.y], 1e-15, 1.0)
    return {
        "loss": float(-np.mean(np.log(p_true))),
        "accuracy": float(np.mean(proba.argmax(axis=1) == dataset.y)),
        "auc": auc_score(dataset.y, proba),
    }


# --------------------------------------------------------------------------
# synthetic tasks


@dataclass
class Task:
    task_id: str
    arch: Architecture
    train: PeerDataset
    test: PeerDataset
    acceptance_metric: str = "accuracy"
    meta: dict = field(default_factory=dict)


def make_blobs_task(
    rng: np.random.Generator,
    n_train: int = 12000,
    n_test: int = 2000,
    n_features: int = 8,
    n_classes: int = 10,
    hidden: int = 8,
    separation: float = 1.6,
) -> Task:
    """Ten Gaussian blobs classified by a one-hidden-layer MLP."""
    centers = rng.normal(0.0, separation, size=(n_classes, n_features))

    def draw(n):
        y = rng.integers(0, n_classes, size=n)
        X = centers[y] + rng.normal(size=(n, n_features))
        return PeerDataset(X, y, n_classes)

    arch = Architecture((n_features, hidden, n_classes))
    return Task("blobs", arch, draw(n_train), draw(n_test), "accuracy")


def make_imbalanced_task(
    rng: np.random.Generator,
    n_train: int = 20000,
    n_test: int = 5000,
    n_features: int = 16,
    positive_rate: float = 0.05,
    signal: float = 1.0,
) -> Task:
    """Imbalanced binary task for logistic regression (a click-through stand-in)."""
    true_w = rng.normal(0.0, signal, size=n_features) * np.sqrt(3.0 / n_features)
    probe = rng.normal(size=(20000, n_features)) @ true_w + rng.logistic(size=20000)
    bias = -np.quantile(probe, 1.0 - positive_rate)

    def draw(n):
        X = rng.normal(size=(n, n_features))
        y = (X @ true_w + bias + rng.logistic(size=n) > 0).astype(np.int64)
        return PeerDataset(X, y, 2)

    arch = Architecture((n_features, 1))
    return Task("imbalanced", arch, draw(n_train), draw(n_test), "auc")


TASKS = {"blobs": make_blobs_task, "imbalanced": make_imbalanced_task}


def make_task(task_id: str, rng: np.random.Generator, **kwargs) -> Task:
    try:
        factory = TASKS[task_id]
    except KeyError:
        raise ValueError(f"unknown task id {task_id!r}; choose from {sorted(TASKS)}") from None
    return factory(rng, **kwargs)


# --------------------------------------------------------------------------
# partitioning


def partition_data(
    data: PeerDataset,
    num_peers: int,
    mode: str,
    rng: np.random.Generator,
    classes_per_peer: int = 6,
    samples_per_peer: int | None = None,
    power_law_a: float = 2.0,
) -> list[PeerDataset]:
    """Split a dataset into peer shards.

    ``mode`` is ``"iid"`` (equal shards), ``"label_skew"`` (each peer holds
    ``classes_per_peer`` classes) or ``"size_skew"`` (shard sizes proportional
    to power-law draws; empty shards are possible).
    """
    from .sim import power_law_sample

    if num_peers < 1:
        raise ValueError("num_peers must be positive")
    if num_peers == 1 and samples_per_peer is None:
        return [data.subset(np.arange(data.k))]
    if mode == "iid":
        if data.k < num_peers:
            raise ValueError("dataset smaller than the number of peers")
        k = samples_per_peer or data.k // num_peers
        if k * num_peers > data.k:
            raise ValueError("not enough samples for the requested shard size")
        order = rng.permutation(data.k)
        return [data.subset(order[i * k : (i + 1) * k]) for i in range(num_peers)]
    if mode == "label_skew":
        if classes_per_peer > data.n_classes:
            raise ValueError(
                f"classes_per_peer={classes_per_peer} exceeds {data.n_classes} classes"
            )
        k = samples_per_peer or data.k // num_peers
        pools = [list(rng.permutation(np.flatnonzero(data.y == c))) for c in range(data.n_classes)]
        shards = []
        for _ in range(num_peers):
            classes = rng.choice(data.n_classes, size=classes_per_peer, replace=False)
            counts = np.full(classes_per_peer, k // classes_per_peer)
            counts[: k % classes_per_peer] += 1
            idx = []
            for c, cnt in zip(classes, counts):
                if len(pools[c]) < cnt:
                    raise ValueError(f"class {c} exhausted; generate more data")
                idx += pools[c][:cnt]
                del pools[c][:cnt]
            shards.append(data.subset(np.array(idx, dtype=np.int64)))
        return shards
    if mode == "size_skew":
        draws = np.array([power_law_sample(rng, power_law_a) for _ in range(num_peers)])
        total = samples_per_peer * num_peers if samples_per_peer else data.k
        total = min(total, data.k)
        sizes = np.floor(draws / draws.sum() * total).astype(int)
        order = rng.permutation(data.k)
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        return [data.subset(order[bounds[i] : bounds[i + 1]]) for i in range(num_peers)]
    raise ValueError(f"unknown partition mode {mode!r}")


# --------------------------------------------------------------------------
# baselines


def _split(data: PeerDataset, frac: float, rng: np.random.Generator):
    order = rng.permutation(data.k)
    cut = max(1, int(round(frac * data.k)))
    return data.subset(order[cut:]), data.subset(order[:cut])


def centralized_baseline(
    train: PeerDataset,
    test: PeerDataset,
    model: ModelParams,
    cfg: TrainConfig,
    rng: np.random.Generator,
    validation_fraction: float = 0.1,
):
    """Train on the union of all shards with early stopping on a validation split.

    Returns ``(model, test_metrics, epochs_run)``.
    """
    fit, val = _split(train, validation_fraction, rng)
    one_epoch = replace(cfg, epochs=1)
    best_loss = data_loss(model, val.X, val.y)
    best, current = model.copy(), model
    stale = epochs = 0
    while epochs < cfg.max_epochs:
        current = local_train(current, fit, one_epoch, rng)
        epochs += 1
        val_loss = data_loss(current, val.X, val.y)
        if val_loss < best_loss - cfg.min_delta:
            best_loss, best, stale = val_loss, current.copy(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best, evaluate(best, test), epochs


def fedavg(models: Sequence[ModelParams]) -> ModelParams:
    """Uniform average of participant weights."""
    stacked = np.stack([m.weights for m in models])
    return models[0].with_weights(stacked.mean(axis=0))


def fl_baseline(
    shards: Sequence[PeerDataset],
    model: ModelParams,
    cfg: TrainConfig,
    rounds: int,
    participants_per_round: int,
    rng: np.random.Generator,
    selection_weights: np.ndarray | None = None,
    test: PeerDataset | None = None,
):
    """Server-side federated averaging.

    Each round samples participants (proportionally to ``selection_weights``
    when given), trains them locally from the global model and averages the
    results uniformly.  Returns ``(model, per_round_metrics)``.
    """
    num_peers = len(shards)
    if participants_per_round > num_peers:
        raise ValueError("participants_per_round exceeds the number of peers")
    p = None
    if selection_weights is not None:
        p = np.asarray(selection_weights, dtype=np.float64)
        p = p / p.sum()
    history = []
    for r in range(rounds):
        if participants_per_round == num_peers:
            chosen = np.arange(num_peers)
        else:
            chosen = np.sort(rng.choice(num_peers, size=participants_per_round, replace=False, p=p))
        updates = [local_train(model, shards[i], cfg, rng) for i in chosen]
        model = fedavg(updates)
        if test is not None:
            history.append({"round": r + 1, **evaluate(model, test)})
    return model, history
