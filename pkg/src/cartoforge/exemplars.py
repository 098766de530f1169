"""Stage 1: per-seed exemplar groups via exact same-label nearest neighbors.

Brute-force cosine search; pipeline scale never justifies an ANN index and
exactness keeps the oracle tests trivial. Genre exclusions apply to the
neighbor pool as well as to seeds, since a prompt built from excluded-genre
neighbors reintroduces the problem the exclusion exists to avoid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import Dataset


class ExemplarError(ValueError):
    pass


@dataclass
class EmbeddingTable:
    """id -> vector map; all vectors share one dimension."""

    dim: int
    vectors: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, example_id: str, vec) -> None:
        arr = np.asarray(vec, dtype=np.float64)
        if arr.shape != (self.dim,):
            raise ExemplarError(
                f"vector for {example_id!r} has shape {arr.shape}, expected ({self.dim},)"
            )
        self.vectors[example_id] = arr

    def __contains__(self, example_id: str) -> bool:
        return example_id in self.vectors

    def __getitem__(self, example_id: str) -> np.ndarray:
        return self.vectors[example_id]

    def __len__(self) -> int:
        return len(self.vectors)


@dataclass
class ExemplarGroup:
    """A seed plus its k same-label nearest neighbors.

    neighbor_ids and similarities are stored in prompt order: increasing
    similarity to the seed, so the most similar neighbor is last.
    """

    seed_id: str
    neighbor_ids: list[str]
    label: str
    similarities: list[float]


@dataclass
class BuildReport:
    groups: list[ExemplarGroup]
    skipped: list[tuple[str, str]]  # (seed_id, reason)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ExemplarError("zero-norm vector in cosine similarity")
    return float(a @ b / (na * nb))


def knn_same_label(
    seed_id: str,
    table: EmbeddingTable,
    dataset: Dataset,
    k: int,
    exclude_genres: set[str] = frozenset(),
) -> ExemplarGroup:
    """The k highest-cosine same-label neighbors of the seed, ties broken by
    id ascending. Zero-norm vectors are rejected rather than given cosine 0,
    to surface upstream featurization bugs."""
    by_id = dataset.by_id()
    if seed_id not in by_id:
        raise ExemplarError(f"seed {seed_id!r} not in dataset")
    seed = by_id[seed_id]
    if seed.label is None:
        raise ExemplarError(f"seed {seed_id!r} has no label")
    if seed_id not in table:
        raise ExemplarError(f"seed {seed_id!r} has no embedding")
    seed_vec = table[seed_id]
    if np.linalg.norm(seed_vec) == 0:
        raise ExemplarError(f"seed {seed_id!r} has a zero-norm embedding")

    scored: list[tuple[float, str]] = []
    for ex in dataset.examples:
        if ex.id == seed_id or ex.label != seed.label:
            continue
        if ex.genre in exclude_genres:
            continue
        if ex.id not in table:
            raise ExemplarError(f"example {ex.id!r} has no embedding")
        vec = table[ex.id]
        if np.linalg.norm(vec) == 0:
            raise ExemplarError(f"example {ex.id!r} has a zero-norm embedding")
        scored.append((cosine(seed_vec, vec), ex.id))

    if len(scored) < k:
        raise ExemplarError(
            f"seed {seed_id!r}: only {len(scored)} same-label candidates, need {k}"
        )
    scored.sort(key=lambda pair: (-pair[0], pair[1]))
    top = scored[:k]
    # Prompt order: increasing similarity, most similar neighbor last.
    top.reverse()
    return ExemplarGroup(
        seed_id=seed_id,
        neighbor_ids=[ex_id for _, ex_id in top],
        label=seed.label,
        similarities=[sim for sim, _ in top],
    )


def build_groups(
    seed_ids: list[str],
    table: EmbeddingTable,
    dataset: Dataset,
    k: int,
    exclude_genres: set[str] = frozenset(),
) -> BuildReport:
    """One group per seed; per-seed failures go into the skip report instead
    of aborting the run."""
    groups, skipped = [], []
    for seed_id in seed_ids:
        try:
            groups.append(knn_same_label(seed_id, table, dataset, k, exclude_genres))
        except ExemplarError as exc:
            skipped.append((seed_id, str(exc)))
    return BuildReport(groups=groups, skipped=skipped)


def write_embedding_table(table: EmbeddingTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"dim": table.dim}) + "\n")
        for ex_id in table.vectors:
            fh.write(json.dumps({"id": ex_id, "vec": table.vectors[ex_id].tolist()}) + "\n")


def read_embedding_table(path) -> EmbeddingTable:
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or "dim" not in lines[0]:
        raise ExemplarError(f"{path}: missing header record with dimension")
    table = EmbeddingTable(dim=int(lines[0]["dim"]))
    for rec in lines[1:]:
        table.add(rec["id"], rec["vec"])
    return table
