"""Stage 4 logic: dual-annotation aggregation, inter-annotator agreement,
revision analytics, and final dataset assembly.

Aggregation rules, in order: an example is discarded if either annotator
discarded it; a revision is kept only when both annotators revised (one of
the two picked uniformly at random, carrying its annotator's label); when
exactly one revised, the original text is kept and the label resolves as in
the both-label case; when both labeled as-is, agreement stands and
disagreement is resolved by a uniform random pick of the two labels.

Every random draw comes from an RNG keyed by (pipeline seed, candidate id),
so aggregation is reproducible and independent of processing order, and
swapping the two records never changes the outcome.
"""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass, field

from .corpus import Dataset, Example
from .toytrainer import tokenize

ACTIONS = ("label_as_is", "revise", "discard")

PRONOUNS = frozenset(
    "i me my mine we us our ours you your yours he him his she her hers it its "
    "they them their theirs".split()
)


class ReviewError(ValueError):
    pass


@dataclass
class AnnotationRecord:
    candidate_id: str
    worker_id: str
    action: str
    label: str | None = None
    revised_premise: str | None = None
    revised_hypothesis: str | None = None
    timestamp: float = 0.0

    def to_record(self) -> dict:
        return {
            "candidate_id": self.candidate_id,
            "worker_id": self.worker_id,
            "action": self.action,
            "label": self.label,
            "revised_premise": self.revised_premise,
            "revised_hypothesis": self.revised_hypothesis,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "AnnotationRecord":
        return cls(
            candidate_id=rec["candidate_id"],
            worker_id=rec["worker_id"],
            action=rec["action"],
            label=rec.get("label"),
            revised_premise=rec.get("revised_premise"),
            revised_hypothesis=rec.get("revised_hypothesis"),
            timestamp=rec.get("timestamp", 0.0),
        )


def validate_record(
    record: AnnotationRecord, original_premise: str, original_hypothesis: str
) -> None:
    """Raises ReviewError naming the offending field on invariant violations."""
    if record.action not in ACTIONS:
        raise ReviewError(f"action: unknown action {record.action!r}")
    if record.action != "discard" and record.label is None:
        raise ReviewError("label: required unless the example is discarded")
    if record.action == "revise":
        if record.revised_premise is None or record.revised_hypothesis is None:
            raise ReviewError("revised_premise/revised_hypothesis: required for revisions")
        if (
            record.revised_premise == original_premise
            and record.revised_hypothesis == original_hypothesis
        ):
            raise ReviewError(
                "revised_premise/revised_hypothesis: revision must change at least one field"
            )
    if record.action != "revise" and (
        record.revised_premise is not None or record.revised_hypothesis is not None
    ):
        raise ReviewError("revised_premise/revised_hypothesis: only allowed for revisions")


@dataclass
class AggregationOutcome:
    candidate_id: str
    status: str  # kept | discarded
    final_premise: str | None = None
    final_hypothesis: str | None = None
    final_label: str | None = None
    used_revision: bool = False
    label_disagreement: bool = False

    def to_record(self) -> dict:
        return {
            "candidate_id": self.candidate_id,
            "status": self.status,
            "final_premise": self.final_premise,
            "final_hypothesis": self.final_hypothesis,
            "final_label": self.final_label,
            "used_revision": self.used_revision,
            "label_disagreement": self.label_disagreement,
        }


def _candidate_rng(rng_seed: int, candidate_id: str) -> random.Random:
    # Seeding with a string hashes it via SHA-512, stable across runs.
    return random.Random(f"{rng_seed}:{candidate_id}")


def aggregate(
    a1: AnnotationRecord,
    a2: AnnotationRecord,
    *,
    original_premise: str,
    original_hypothesis: str,
    rng_seed: int,
) -> AggregationOutcome:
    """Combine the two annotations of one candidate into a final outcome."""
    if a1.candidate_id != a2.candidate_id:
        raise ReviewError(
            f"annotations refer to different candidates: {a1.candidate_id!r} vs {a2.candidate_id!r}"
        )
    if a1.worker_id == a2.worker_id:
        raise ReviewError(f"both annotations come from worker {a1.worker_id!r}")
    # Order by worker id so the outcome is symmetric in the arguments.
    first, second = sorted((a1, a2), key=lambda r: r.worker_id)
    candidate_id = first.candidate_id
    rng = _candidate_rng(rng_seed, candidate_id)

    if first.action == "discard" or second.action == "discard":
        return AggregationOutcome(candidate_id=candidate_id, status="discarded")

    disagreement = first.label != second.label

    if first.action == "revise" and second.action == "revise":
        chosen = first if rng.random() < 0.5 else second
        return AggregationOutcome(
            candidate_id=candidate_id,
            status="kept",
            final_premise=chosen.revised_premise,
            final_hypothesis=chosen.revised_hypothesis,
            final_label=chosen.label,
            used_revision=True,
            label_disagreement=disagreement,
        )

    # At most one revised: the original text stands, and the label resolves
    # as if both had labeled the original.
    if disagreement:
        label = first.label if rng.random() < 0.5 else second.label
    else:
        label = first.label
    return AggregationOutcome(
        candidate_id=candidate_id,
        status="kept",
        final_premise=original_premise,
        final_hypothesis=original_hypothesis,
        final_label=label,
        used_revision=False,
        label_disagreement=disagreement,
    )


def aggregate_all(
    records: list[AnnotationRecord],
    candidates: dict[str, tuple[str, str]],
    rng_seed: int,
) -> list[AggregationOutcome]:
    """Pair up records per candidate and aggregate each pair.

    candidates maps candidate_id -> (premise, hypothesis). Candidates with
    other than exactly two records are an error: the review service only
    exports done tasks.
    """
    by_candidate: dict[str, list[AnnotationRecord]] = {}
    for rec in records:
        by_candidate.setdefault(rec.candidate_id, []).append(rec)
    outcomes = []
    for candidate_id in sorted(by_candidate):
        pair = by_candidate[candidate_id]
        if len(pair) != 2:
            raise ReviewError(
                f"candidate {candidate_id!r} has {len(pair)} annotations, expected 2"
            )
        if candidate_id not in candidates:
            raise ReviewError(f"annotations reference unknown candidate {candidate_id!r}")
        premise, hypothesis = candidates[candidate_id]
        outcomes.append(
            aggregate(
                pair[0],
                pair[1],
                original_premise=premise,
                original_hypothesis=hypothesis,
                rng_seed=rng_seed,
            )
        )
    return outcomes


def cohens_kappa(pairs: list[tuple[str, str]]) -> float:
    """Chance-corrected agreement between two annotators' label sequences.

    Expected agreement comes from the product of the two annotators'
    marginal label distributions.
    """
    if not pairs:
        raise ReviewError("cannot compute kappa over zero pairs")
    n = len(pairs)
    observed = sum(1 for a, b in pairs if a == b) / n
    first = Counter(a for a, _ in pairs)
    second = Counter(b for _, b in pairs)
    labels = set(first) | set(second)
    expected = sum((first[lbl] / n) * (second[lbl] / n) for lbl in labels)
    if expected == 1.0:
        # Both marginals are degenerate on the same label; agreement is total.
        return 1.0
    return (observed - expected) / (1.0 - expected)


def kappa_pairs(records: list[AnnotationRecord]) -> list[tuple[str, str]]:
    """Label pairs for agreement: only candidates both workers labeled
    without revision, ordered by (candidate, worker) for determinism."""
    by_candidate: dict[str, list[AnnotationRecord]] = {}
    for rec in records:
        by_candidate.setdefault(rec.candidate_id, []).append(rec)
    pairs = []
    for candidate_id in sorted(by_candidate):
        recs = sorted(by_candidate[candidate_id], key=lambda r: r.worker_id)
        if len(recs) == 2 and all(r.action == "label_as_is" for r in recs):
            pairs.append((recs[0].label, recs[1].label))
    return pairs


@dataclass
class DatasetStats:
    annotated: int
    kept: int
    discarded: int
    kept_rate: float
    revised: int
    revised_rate: float
    label_distribution: dict[str, int]
    label_disagreements: int
    mean_premise_tokens: float
    mean_hypothesis_tokens: float
    unique_seeds: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def assemble(
    outcomes: list[AggregationOutcome], candidates: dict[str, Example]
) -> tuple[Dataset, DatasetStats]:
    """Kept outcomes become labeled examples; revised ones are marked
    source=revised and keep the candidate id."""
    examples = []
    revised = 0
    disagreements = 0
    label_counts: Counter[str] = Counter()
    seeds = set()
    for outcome in sorted(outcomes, key=lambda o: o.candidate_id):
        if outcome.candidate_id not in candidates:
            raise ReviewError(f"outcome references unknown candidate {outcome.candidate_id!r}")
        if outcome.status != "kept":
            continue
        cand = candidates[outcome.candidate_id]
        examples.append(
            Example(
                id=outcome.candidate_id,
                premise=outcome.final_premise,
                hypothesis=outcome.final_hypothesis,
                label=outcome.final_label,
                source="revised" if outcome.used_revision else "generated",
                seed_id=cand.seed_id,
                meta={"label_disagreement": outcome.label_disagreement},
            )
        )
        label_counts[outcome.final_label] += 1
        revised += outcome.used_revision
        disagreements += outcome.label_disagreement
        if cand.seed_id:
            seeds.add(cand.seed_id)

    kept = len(examples)
    premise_tokens = [len(ex.premise.split()) for ex in examples]
    hypothesis_tokens = [len(ex.hypothesis.split()) for ex in examples]
    stats = DatasetStats(
        annotated=len(outcomes),
        kept=kept,
        discarded=len(outcomes) - kept,
        kept_rate=kept / len(outcomes) if outcomes else 0.0,
        revised=revised,
        revised_rate=revised / kept if kept else 0.0,
        label_distribution=dict(sorted(label_counts.items())),
        label_disagreements=disagreements,
        mean_premise_tokens=sum(premise_tokens) / kept if kept else 0.0,
        mean_hypothesis_tokens=sum(hypothesis_tokens) / kept if kept else 0.0,
        unique_seeds=len(seeds),
    )
    return Dataset(name="collab", examples=examples), stats


def _pronoun_set(text: str) -> frozenset[str]:
    return frozenset(tok for tok in tokenize(text) if tok in PRONOUNS)


@dataclass
class FieldRevisionStats:
    revisions: int
    delta_histogram: dict[int, int] = field(default_factory=dict)
    fraction_delta_minus1_plus2: float = 0.0
    fraction_pronoun_set_changed: float = 0.0


def revision_stats(
    records: list[AnnotationRecord], originals: dict[str, tuple[str, str]]
) -> dict[str, FieldRevisionStats]:
    """Word-count deltas and pronoun-set changes for revised fields.

    A field counts as revised only when its text actually differs from the
    original. Deltas are whitespace token counts (revised minus original).
    """
    out = {}
    for which, idx in (("premise", 0), ("hypothesis", 1)):
        deltas: list[int] = []
        pronoun_changes = 0
        for rec in records:
            if rec.action != "revise":
                continue
            if rec.candidate_id not in originals:
                raise ReviewError(f"revision references unknown candidate {rec.candidate_id!r}")
            original = originals[rec.candidate_id][idx]
            revised = (rec.revised_premise, rec.revised_hypothesis)[idx]
            if revised is None or revised == original:
                continue
            deltas.append(len(revised.split()) - len(original.split()))
            pronoun_changes += _pronoun_set(revised) != _pronoun_set(original)
        histogram: dict[int, int] = {}
        for delta in deltas:
            histogram[delta] = histogram.get(delta, 0) + 1
        n = len(deltas)
        out[which] = FieldRevisionStats(
            revisions=n,
            delta_histogram=dict(sorted(histogram.items())),
            fraction_delta_minus1_plus2=(
                sum(1 for d in deltas if -1 <= d <= 2) / n if n else 0.0
            ),
            fraction_pronoun_set_changed=pronoun_changes / n if n else 0.0,
        )
    return out


def write_annotations(records: list[AnnotationRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_record(), ensure_ascii=False) + "\n")


def read_annotations(path) -> list[AnnotationRecord]:
    with open(path, encoding="utf-8") as fh:
        return [AnnotationRecord.from_record(json.loads(line)) for line in fh if line.strip()]


def write_outcomes(outcomes: list[AggregationOutcome], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for outcome in outcomes:
            fh.write(json.dumps(outcome.to_record(), ensure_ascii=False) + "\n")
