"""Desk-scale stand-in for the task model: a hashed bag-of-words multinomial
logistic regression trained by mini-batch gradient descent.

Emits per-epoch prediction logs (the substrate for all cartography math) and
per-example feature vectors that double as embeddings for exemplar search.
Training is single-threaded and fully deterministic given the config seed.
"""

from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass, field

import numpy as np

from .corpus import Dataset, Example
from .dynamics import EpochPredictionLog

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class TrainerError(ValueError):
    pass


@dataclass
class ToyModelConfig:
    epochs: int = 5
    learning_rate: float = 0.1
    batch_size: int = 32
    hash_dims: int = 256
    rng_seed: int = 0
    l2: float = 0.0

    def __post_init__(self) -> None:
        if self.epochs < 2:
            raise TrainerError(f"epochs must be >= 2, got {self.epochs}")
        if self.hash_dims < 8:
            raise TrainerError(f"hash_dims must be >= 8, got {self.hash_dims}")
        if self.learning_rate <= 0:
            raise TrainerError("learning_rate must be positive")


@dataclass
class ToyModelState:
    """Per-epoch weight snapshots, one (Y, D) matrix per completed epoch."""

    label_names: list[str]
    hash_dims: int
    snapshots: list[np.ndarray] = field(default_factory=list)

    @property
    def epochs(self) -> int:
        return len(self.snapshots)


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def featurize(example: Example, hash_dims: int) -> np.ndarray:
    """Hashed term-frequency vector, L2-normalized.

    Premise tokens hash into the first half of the feature space and
    hypothesis tokens into the second half, so the two sides never collide.
    Empty text yields the zero vector.
    """
    half = hash_dims // 2
    vec = np.zeros(hash_dims, dtype=np.float64)
    for token in tokenize(example.premise):
        vec[zlib.crc32(token.encode("utf-8")) % half] += 1.0
    for token in tokenize(example.hypothesis):
        vec[half + zlib.crc32(token.encode("utf-8")) % (hash_dims - half)] += 1.0
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec


def featurize_dataset(ds: Dataset, hash_dims: int) -> np.ndarray:
    return np.stack([featurize(ex, hash_dims) for ex in ds.examples]) if len(ds) else np.zeros(
        (0, hash_dims)
    )


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def ce_loss_and_grad(
    weights: np.ndarray, x: np.ndarray, targets: np.ndarray, l2: float = 0.0
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(weights @ x.T) against (soft) targets,
    with its analytic gradient w.r.t. the weights."""
    probs = _softmax(x @ weights.T)  # (B, Y)
    eps = 1e-12
    loss = float(-(targets * np.log(probs + eps)).sum(axis=1).mean())
    loss += 0.5 * l2 * float((weights**2).sum())
    grad = (probs - targets).T @ x / x.shape[0] + l2 * weights
    return loss, grad


def train(
    ds: Dataset, cfg: ToyModelConfig, label_names: list[str] | None = None
) -> tuple[ToyModelState, EpochPredictionLog]:
    """Mini-batch softmax regression; after each epoch the weights are
    snapshotted and predictions on the full training set are logged."""
    if label_names is None:
        label_names = sorted({ex.label for ex in ds.examples if ex.label is not None})
    label_idx = {name: i for i, name in enumerate(label_names)}
    for ex in ds.examples:
        if ex.label is None:
            raise TrainerError(f"example {ex.id!r} is unlabeled")
        if ex.label not in label_idx:
            raise TrainerError(f"example {ex.id!r} has unknown label {ex.label!r}")
    if len(ds) < cfg.batch_size:
        raise TrainerError(
            f"dataset of {len(ds)} examples is smaller than batch_size {cfg.batch_size}"
        )

    x = featurize_dataset(ds, cfg.hash_dims)
    y = np.array([label_idx[ex.label] for ex in ds.examples])
    onehot = np.eye(len(label_names))[y]
    n = len(ds)

    rng = np.random.default_rng(cfg.rng_seed)
    weights = np.zeros((len(label_names), cfg.hash_dims))
    snapshots: list[np.ndarray] = []
    epoch_probs: list[np.ndarray] = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            _, grad = ce_loss_and_grad(weights, x[batch], onehot[batch], cfg.l2)
            weights -= cfg.learning_rate * grad
        snapshots.append(weights.copy())
        epoch_probs.append(_softmax(x @ weights.T))

    state = ToyModelState(
        label_names=list(label_names), hash_dims=cfg.hash_dims, snapshots=snapshots
    )
    log = EpochPredictionLog(
        example_ids=ds.ids(),
        labels=[label_idx[ex.label] for ex in ds.examples],
        label_names=list(label_names),
        probs=np.stack(epoch_probs),
    )
    return state, log


def predict_over_epochs(state: ToyModelState, example: Example) -> np.ndarray:
    """The (E, Y) matrix of softmax predictions for one example, one row per
    weight snapshot. A zero feature vector yields the uniform row."""
    vec = featurize(example, state.hash_dims)
    logits = np.stack([w @ vec for w in state.snapshots])
    return _softmax(logits)


def accuracy(state: ToyModelState, ds: Dataset, epoch: int = -1) -> float:
    label_idx = {name: i for i, name in enumerate(state.label_names)}
    x = featurize_dataset(ds, state.hash_dims)
    preds = (x @ state.snapshots[epoch].T).argmax(axis=1)
    gold = np.array([label_idx[ex.label] for ex in ds.examples])
    return float((preds == gold).mean())


@dataclass
class GradientCheckReport:
    max_rel_error: float
    worst_coordinate: tuple[int, int]
    passed: bool
    tolerance: float


def gradient_check(
    cfg: ToyModelConfig,
    n_labels: int = 3,
    batch: int = 16,
    tolerance: float = 1e-4,
) -> GradientCheckReport:
    """Analytic gradient vs central finite differences on one random batch.

    Checks every weight coordinate; fails if any relative error exceeds the
    tolerance, reporting the worst coordinate.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    weights = rng.normal(scale=0.1, size=(n_labels, cfg.hash_dims))
    x = rng.normal(size=(batch, cfg.hash_dims))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    targets = np.eye(n_labels)[rng.integers(0, n_labels, size=batch)]

    _, analytic = ce_loss_and_grad(weights, x, targets, cfg.l2)
    h = 1e-5
    numeric = np.zeros_like(weights)
    for i in range(weights.shape[0]):
        for j in range(weights.shape[1]):
            w_plus = weights.copy()
            w_plus[i, j] += h
            w_minus = weights.copy()
            w_minus[i, j] -= h
            lp, _ = ce_loss_and_grad(w_plus, x, targets, cfg.l2)
            lm, _ = ce_loss_and_grad(w_minus, x, targets, cfg.l2)
            numeric[i, j] = (lp - lm) / (2 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    rel = np.abs(analytic - numeric) / denom
    worst_flat = int(rel.argmax())
    worst = (worst_flat // weights.shape[1], worst_flat % weights.shape[1])
    max_rel = float(rel.max())
    return GradientCheckReport(
        max_rel_error=max_rel,
        worst_coordinate=worst,
        passed=max_rel < tolerance,
        tolerance=tolerance,
    )


def write_embeddings(ds: Dataset, hash_dims: int, path) -> None:
    """Embeddings file: a {"dim": d} header, then one {"id", "vec"} per line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"dim": hash_dims}) + "\n")
        for ex in ds.examples:
            vec = featurize(ex, hash_dims)
            fh.write(json.dumps({"id": ex.id, "vec": vec.tolist()}) + "\n")
