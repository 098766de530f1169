"""Training-dynamics cartography over per-epoch prediction logs.

Computes the confidence / variability / correctness map for gold-labeled
training examples, and the estimated max variability score (the worst-case
per-label spread of predictions across epoch checkpoints) that stands in for
true variability on unlabeled or held-out examples.

All spreads are population standard deviations (divide by E): the epoch
checkpoints are the entire population being summarized, not a sample.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .corpus import Dataset

ROW_SUM_TOL = 1e-6


class DynamicsError(ValueError):
    pass


@dataclass
class EpochPredictionLog:
    """Per-example, per-epoch probability vectors over a fixed label set.

    probs has shape (E, N, Y). labels[i] is the gold label index of example i
    or None when unknown (candidates scored via estimated max variability
    need no gold label).
    """

    example_ids: list[str]
    labels: list[int | None]
    label_names: list[str]
    probs: np.ndarray

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 3:
            raise DynamicsError(f"probs must be E x N x Y, got shape {self.probs.shape}")
        epochs, n, n_labels = self.probs.shape
        if epochs < 2:
            raise DynamicsError(f"need at least 2 epochs, got {epochs}")
        if n != len(self.example_ids):
            raise DynamicsError(
                f"probs has {n} examples but {len(self.example_ids)} ids given"
            )
        if n_labels != len(self.label_names):
            raise DynamicsError(
                f"probs has {n_labels} labels but {len(self.label_names)} names given"
            )
        if len(self.labels) != len(self.example_ids):
            raise DynamicsError("labels and example_ids must align")
        if self.probs.size:
            if self.probs.min() < -ROW_SUM_TOL or self.probs.max() > 1 + ROW_SUM_TOL:
                raise DynamicsError("probabilities must lie in [0, 1]")
            self.probs = _renormalize_rows(self.probs)

    @property
    def epochs(self) -> int:
        return self.probs.shape[0]

    def probs_for(self, example_id: str) -> np.ndarray:
        """The (E, Y) probability matrix of one example."""
        idx = self.example_ids.index(example_id)
        return self.probs[:, idx, :]


def _renormalize_rows(probs: np.ndarray) -> np.ndarray:
    sums = probs.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > ROW_SUM_TOL):
        bad = np.argwhere(np.abs(sums - 1.0) > ROW_SUM_TOL)[0]
        raise DynamicsError(
            f"probability row {tuple(bad)} sums to {sums[tuple(bad)]:.8f}, beyond tolerance"
        )
    return probs / sums[..., None]


def _population_std(columns: np.ndarray) -> np.ndarray:
    """Population std over axis 0, exactly zero for constant columns.

    Shifting by the first row is a no-op mathematically but avoids the
    float rounding that makes np.std of identical values come out ~1e-16.
    """
    return (columns - columns[0]).std(axis=0)


@dataclass
class DataMapPoint:
    example_id: str
    confidence: float
    variability: float
    correctness: float
    est_max_variability: float


def compute_data_map(log: EpochPredictionLog) -> list[DataMapPoint]:
    """Per-example cartography statistics over the log's epochs.

    confidence: mean gold-label probability; variability: population std of
    the gold-label probability; correctness: fraction of epochs whose argmax
    (ties to the lowest label index) equals the gold label.
    """
    points = []
    for i, ex_id in enumerate(log.example_ids):
        gold = log.labels[i]
        if gold is None:
            raise DynamicsError(f"example {ex_id!r} has no gold label")
        mat = log.probs[:, i, :]  # (E, Y)
        gold_col = mat[:, gold]
        confidence = float(gold_col.mean())
        variability = float(_population_std(gold_col[:, None])[0])
        # np.argmax already resolves ties to the lowest index.
        correctness = float((mat.argmax(axis=1) == gold).mean())
        points.append(
            DataMapPoint(
                example_id=ex_id,
                confidence=confidence,
                variability=variability,
                correctness=correctness,
                est_max_variability=float(_population_std(mat).max()),
            )
        )
    return points


def estimated_max_variability(probs_over_epochs: np.ndarray) -> float:
    """Worst-case spread of predictions: max over labels of the population
    std of that label's probability across epochs.

    Needs no gold label; an example is ambiguous as long as the model is
    undecided on any label.
    """
    mat = np.asarray(probs_over_epochs, dtype=np.float64)
    if mat.ndim != 2:
        raise DynamicsError(f"expected an E x Y matrix, got shape {mat.shape}")
    if mat.shape[0] < 2:
        raise DynamicsError("estimated max variability needs at least 2 epochs")
    mat = _renormalize_rows(mat)
    return float(_population_std(mat).max())


def select_top_ambiguous(
    points: list[DataMapPoint],
    fraction: float,
    per_label: bool,
    exclude_genres: set[str],
    dataset: Dataset,
) -> list[str]:
    """Ids of the top-variability fraction, per label class when per_label.

    Excluded genres are removed before taking the top floor(fraction * N_c)
    of each class; ties break by id ascending. Output lists classes in label
    order, each class sorted by descending variability.
    """
    if not 0 < fraction <= 1:
        raise DynamicsError(f"fraction must be in (0, 1], got {fraction}")
    by_id = dataset.by_id()
    eligible = []
    for pt in points:
        ex = by_id.get(pt.example_id)
        if ex is None:
            raise DynamicsError(f"point {pt.example_id!r} not present in dataset")
        if ex.genre in exclude_genres:
            continue
        eligible.append((pt, ex))

    def top_slice(pts: list[DataMapPoint], quota: int) -> list[str]:
        ranked = sorted(pts, key=lambda p: (-p.variability, p.example_id))
        return [p.example_id for p in ranked[:quota]]

    if not per_label:
        pts = [pt for pt, _ in eligible]
        return top_slice(pts, int(fraction * len(pts)))

    classes: dict[str, list[DataMapPoint]] = {}
    for pt, ex in eligible:
        if ex.label is None:
            raise DynamicsError(f"example {ex.id!r} is unlabeled; cannot group by label")
        classes.setdefault(ex.label, []).append(pt)
    selected: list[str] = []
    for label in sorted(classes):
        pts = classes[label]
        selected.extend(top_slice(pts, int(fraction * len(pts))))
    return selected


def export_datamap(points: list[DataMapPoint], path) -> None:
    """CSV export of the map, one row per point, ordered by example id."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["example_id", "confidence", "variability", "correctness", "est_max_variability"]
        )
        for pt in sorted(points, key=lambda p: p.example_id):
            writer.writerow(
                [
                    pt.example_id,
                    repr(pt.confidence),
                    repr(pt.variability),
                    repr(pt.correctness),
                    repr(pt.est_max_variability),
                ]
            )


def read_datamap(path) -> list[DataMapPoint]:
    points = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            points.append(
                DataMapPoint(
                    example_id=row["example_id"],
                    confidence=float(row["confidence"]),
                    variability=float(row["variability"]),
                    correctness=float(row["correctness"]),
                    est_max_variability=float(row["est_max_variability"]),
                )
            )
    return points


def write_prediction_log(log: EpochPredictionLog, path) -> None:
    """JSONL log: a header record with the label order and epoch count, then
    one record per example with its (E, Y) probability rows."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {"labels": list(log.label_names), "epochs": log.epochs}
        fh.write(json.dumps(header) + "\n")
        for i, ex_id in enumerate(log.example_ids):
            gold = log.labels[i]
            rec = {
                "id": ex_id,
                "label": log.label_names[gold] if gold is not None else None,
                "probs": log.probs[:, i, :].tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def read_prediction_log(path) -> EpochPredictionLog:
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or "labels" not in lines[0]:
        raise DynamicsError(f"{path}: missing header record with label order")
    header, records = lines[0], lines[1:]
    label_names = list(header["labels"])
    name_to_idx = {name: i for i, name in enumerate(label_names)}
    ids, labels, mats = [], [], []
    for rec in records:
        ids.append(rec["id"])
        labels.append(name_to_idx[rec["label"]] if rec.get("label") is not None else None)
        mats.append(rec["probs"])
    probs = np.transpose(np.asarray(mats, dtype=np.float64), (1, 0, 2)) if mats else np.zeros(
        (header["epochs"], 0, len(label_names))
    )
    return EpochPredictionLog(
        example_ids=ids, labels=labels, label_names=label_names, probs=probs
    )
