"""Dataset-artifact audits: partial-input baselines, single-word lexical
correlation detection, and premise-hypothesis semantic similarity overlap.

The partial-input baseline reuses the built-in linear classifier; its
contract is "a simple linear model on one field", so absolute accuracies from
other toolchains are reference points, not targets.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from statistics import NormalDist

import numpy as np

from .corpus import Dataset
from .exemplars import EmbeddingTable, cosine
from .toytrainer import ToyModelConfig, accuracy, tokenize, train


class AuditError(ValueError):
    pass


def balance_by_label(ds: Dataset, rng_seed: int) -> Dataset:
    """Downsample every class to the minority-class count, seeded; survivors
    keep their original order."""
    by_label: dict[str, list[str]] = {}
    for ex in ds.examples:
        if ex.label is None:
            raise AuditError(f"example {ex.id!r} is unlabeled")
        by_label.setdefault(ex.label, []).append(ex.id)
    if not by_label:
        return Dataset(name=f"{ds.name}.balanced", examples=[])
    target = min(len(ids) for ids in by_label.values())
    rng = random.Random(rng_seed)
    keep: set[str] = set()
    for label in sorted(by_label):
        keep.update(rng.sample(by_label[label], target))
    return Dataset(
        name=f"{ds.name}.balanced",
        examples=[ex for ex in ds.examples if ex.id in keep],
    )


def partial_input_accuracy(
    train_ds: Dataset,
    test_ds: Dataset,
    input_field: str,
    cfg: ToyModelConfig | None = None,
) -> float:
    """Test accuracy of the linear classifier trained on one field only; the
    other field is blanked before featurization in both splits."""
    if input_field not in ("premise", "hypothesis"):
        raise AuditError(f"field must be premise or hypothesis, got {input_field!r}")
    if not len(train_ds) or not len(test_ds):
        raise AuditError("train and test sets must be non-empty")

    def strip(ds: Dataset, name: str) -> Dataset:
        blanked = []
        for ex in ds.examples:
            if input_field == "premise":
                blanked.append(replace(ex, hypothesis=""))
            else:
                blanked.append(replace(ex, premise=""))
        return Dataset(name=name, examples=blanked)

    cfg = cfg or ToyModelConfig(rng_seed=0)
    labels = sorted({ex.label for ex in train_ds.examples if ex.label is not None})
    state, _ = train(strip(train_ds, "partial.train"), cfg, label_names=labels)
    return accuracy(state, strip(test_ds, "partial.test"))


@dataclass
class WordLabelStat:
    word: str
    label: str
    n: int
    p_hat: float
    z: float
    detectable: bool


def lexical_correlations(
    ds: Dataset, alpha: float = 0.01, min_count: int = 20
) -> list[WordLabelStat]:
    """One-sided z-statistics for P(label | word present) against the uniform
    null, Bonferroni-corrected over all tested (word, label) pairs.

    The input must already be label-balanced (use balance_by_label), else the
    uniform null p0 = 1/|labels| is wrong by construction.
    """
    if min_count < 1:
        raise AuditError("min_count must be >= 1")
    label_counts: dict[str, int] = {}
    for ex in ds.examples:
        if ex.label is None:
            raise AuditError(f"example {ex.id!r} is unlabeled")
        label_counts[ex.label] = label_counts.get(ex.label, 0) + 1
    if len(set(label_counts.values())) > 1:
        raise AuditError(f"dataset is not label-balanced: {label_counts}")
    labels = sorted(label_counts)
    n_labels = len(labels)
    p0 = 1.0 / n_labels

    word_total: dict[str, int] = {}
    word_label: dict[tuple[str, str], int] = {}
    for ex in ds.examples:
        words = set(tokenize(ex.premise)) | set(tokenize(ex.hypothesis))
        for word in words:
            word_total[word] = word_total.get(word, 0) + 1
            key = (word, ex.label)
            word_label[key] = word_label.get(key, 0) + 1

    tested_words = [w for w, n in word_total.items() if n >= min_count]
    if not tested_words:
        return []
    comparisons = len(tested_words) * n_labels
    threshold = NormalDist().inv_cdf(1.0 - alpha / comparisons)

    stats = []
    for word in sorted(tested_words):
        n = word_total[word]
        for label in labels:
            p_hat = word_label.get((word, label), 0) / n
            z = (p_hat - p0) / ((p0 * (1 - p0) / n) ** 0.5)
            stats.append(
                WordLabelStat(
                    word=word,
                    label=label,
                    n=n,
                    p_hat=p_hat,
                    z=z,
                    detectable=z > threshold,
                )
            )
    return stats


@dataclass
class SimilarityDistribution:
    per_label: dict[str, list[float]]
    means: dict[str, float]
    stds: dict[str, float]
    overlap: dict[str, float] = field(default_factory=dict)  # "a|b" -> coefficient
    bins: int = 50


def _histogram(values: list[float], bins: int) -> np.ndarray:
    hist, _ = np.histogram(values, bins=bins, range=(-1.0, 1.0))
    total = hist.sum()
    return hist / total if total else hist.astype(float)


def similarity_distributions(
    ds: Dataset, sentence_embeddings: EmbeddingTable, bins: int = 50
) -> SimilarityDistribution:
    """Premise-hypothesis cosine per example, grouped by label, plus the
    pairwise histogram-overlap coefficient between label classes.

    Embeddings are keyed "<id>#premise" and "<id>#hypothesis".
    """
    per_label: dict[str, list[float]] = {}
    for ex in ds.examples:
        if ex.label is None:
            raise AuditError(f"example {ex.id!r} is unlabeled")
        p_key, h_key = f"{ex.id}#premise", f"{ex.id}#hypothesis"
        for key in (p_key, h_key):
            if key not in sentence_embeddings:
                raise AuditError(f"missing sentence embedding {key!r}")
        sim = cosine(sentence_embeddings[p_key], sentence_embeddings[h_key])
        per_label.setdefault(ex.label, []).append(sim)

    means = {lbl: float(np.mean(v)) for lbl, v in per_label.items()}
    stds = {lbl: float(np.std(v)) for lbl, v in per_label.items()}
    overlap = {}
    labels = sorted(per_label)
    for i, a in enumerate(labels):
        for b in labels[i + 1 :]:
            ha, hb = _histogram(per_label[a], bins), _histogram(per_label[b], bins)
            overlap[f"{a}|{b}"] = float(np.minimum(ha, hb).sum())
    return SimilarityDistribution(
        per_label=per_label, means=means, stds=stds, overlap=overlap, bins=bins
    )
