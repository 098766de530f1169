"""Canonical data model and JSONL file I/O for datasets at every pipeline stage.

One record per line; the same schema is used for the original corpus, raw
generations, filter survivors, and the final reviewed dataset, so any stage
output can be re-read by any downstream tool.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

DEFAULT_LABELS: tuple[str, ...] = ("entailment", "neutral", "contradiction")

SOURCES = ("original", "generated", "revised")


class CorpusError(ValueError):
    """Raised for malformed dataset files or invariant violations."""


@dataclass
class Example:
    """One premise-hypothesis pair with provenance metadata.

    ``label`` is None for unlabeled examples (e.g. filter survivors awaiting
    human review). ``seed_id`` links generated/revised examples back to the
    seed that anchored their prompt.
    """

    id: str
    premise: str
    hypothesis: str
    label: str | None = None
    genre: str | None = None
    source: str = "original"
    seed_id: str | None = None
    meta: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        rec = {
            "id": self.id,
            "premise": self.premise,
            "hypothesis": self.hypothesis,
            "label": self.label,
            "genre": self.genre,
            "source": self.source,
            "seed_id": self.seed_id,
            "meta": self.meta,
        }
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Example":
        known = {"id", "premise", "hypothesis", "label", "genre", "source", "seed_id", "meta"}
        meta = dict(rec.get("meta") or {})
        # Unknown top-level fields survive the round trip inside meta.
        for key, value in rec.items():
            if key not in known:
                meta[key] = value
        return cls(
            id=str(rec["id"]),
            premise=rec["premise"],
            hypothesis=rec["hypothesis"],
            label=rec.get("label"),
            genre=rec.get("genre"),
            source=rec.get("source", "original"),
            seed_id=rec.get("seed_id"),
            meta=meta,
        )


@dataclass
class Dataset:
    name: str
    examples: list[Example] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def by_id(self) -> dict[str, Example]:
        return {ex.id: ex for ex in self.examples}

    def ids(self) -> list[str]:
        return [ex.id for ex in self.examples]


def read_dataset(path, name: str | None = None) -> Dataset:
    """Read a JSONL dataset, preserving file order.

    Raises CorpusError naming the offending line for malformed records and
    the offending id for duplicates.
    """
    examples: list[Example] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise CorpusError(f"{path}: line {lineno}: record is not an object")
            for required in ("id", "premise", "hypothesis"):
                if required not in rec:
                    raise CorpusError(f"{path}: line {lineno}: missing field {required!r}")
            ex = Example.from_record(rec)
            if ex.id in seen:
                raise CorpusError(f"{path}: duplicate id {ex.id!r} at line {lineno}")
            seen.add(ex.id)
            examples.append(ex)
    return Dataset(name=name or str(path), examples=examples)


def write_dataset(ds: Dataset, path) -> None:
    """Write a dataset as JSONL; round-trips field-for-field via read_dataset."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in ds.examples:
            fh.write(json.dumps(ex.to_record(), ensure_ascii=False) + "\n")


def split_train_test(ds: Dataset, test_count: int, rng_seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint random partition with an exact test size, deterministic per seed.

    Both splits keep the dataset's original relative order.
    """
    if test_count < 0 or test_count > len(ds):
        raise CorpusError(
            f"test_count {test_count} out of range for dataset of size {len(ds)}"
        )
    rng = random.Random(rng_seed)
    test_idx = set(rng.sample(range(len(ds)), test_count))
    train = [ex for i, ex in enumerate(ds.examples) if i not in test_idx]
    test = [ex for i, ex in enumerate(ds.examples) if i in test_idx]
    return (
        Dataset(name=f"{ds.name}.train", examples=train),
        Dataset(name=f"{ds.name}.test", examples=test),
    )


def default_test_count(n: int) -> int:
    """Default held-out size: 5000, capped at 10% of the dataset."""
    return min(5000, n // 10)
