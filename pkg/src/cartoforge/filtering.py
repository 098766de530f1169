"""Stage 3: heuristic rejection of degenerate generations, ambiguity scoring,
and per-intended-label balanced selection of the top fraction.

Rule precedence is fixed: identical pair, then in-context copy, then
instruction leakage, then length; a candidate triggering several reports the
first. Copy detection compares normalized text (lowercased, punctuation
stripped, whitespace collapsed) so trivial edits do not evade it.
"""

from __future__ import annotations

import json
import re
import unicodedata
from dataclasses import dataclass, field

from .corpus import Dataset, Example
from .dynamics import estimated_max_variability
from .prompting import GeneratedCandidate
from .toytrainer import ToyModelState, predict_over_epochs

RULES = ("identical_pair", "copied_incontext", "instruction_phrase", "too_short", "low_variability")

_WS_RE = re.compile(r"\s+")


class FilterError(ValueError):
    pass


@dataclass
class FilterConfig:
    q: float = 0.5
    min_chars: int = 5
    instruction_phrases: list[str] = field(
        default_factory=lambda: ["pair of sentences", "same relationship", "previous examples"]
    )

    def __post_init__(self) -> None:
        if not 0 < self.q <= 1:
            raise FilterError(f"retained fraction q must be in (0, 1], got {self.q}")


@dataclass
class FilterVerdict:
    candidate_id: str
    kept: bool
    rule: str | None = None
    score: float | None = None

    def to_record(self) -> dict:
        return {
            "candidate_id": self.candidate_id,
            "kept": self.kept,
            "rule": self.rule,
            "score": self.score,
        }


def normalize_for_compare(text: str) -> str:
    """Lowercase, drop punctuation, collapse whitespace runs, trim."""
    lowered = text.lower()
    without_punct = "".join(
        ch for ch in lowered if not unicodedata.category(ch).startswith("P")
    )
    return _WS_RE.sub(" ", without_punct).strip()


def apply_heuristics(
    cand: GeneratedCandidate,
    group_examples: list[tuple[str, str]],
    cfg: FilterConfig,
) -> FilterVerdict:
    """First matching discard rule wins; survivors come back kept=True with
    the score left for the scoring pass.

    group_examples are the (premise, hypothesis) pairs of the candidate's
    in-context items.
    """
    if not cand.parse_ok or cand.premise is None or cand.hypothesis is None:
        raise FilterError(f"candidate {cand.id!r} was not successfully parsed")
    norm_p = normalize_for_compare(cand.premise)
    norm_h = normalize_for_compare(cand.hypothesis)

    if norm_p == norm_h:
        return FilterVerdict(cand.id, kept=False, rule="identical_pair")

    incontext = {
        (normalize_for_compare(p), normalize_for_compare(h)) for p, h in group_examples
    }
    if (norm_p, norm_h) in incontext:
        return FilterVerdict(cand.id, kept=False, rule="copied_incontext")

    lowered_p, lowered_h = cand.premise.lower(), cand.hypothesis.lower()
    for phrase in cfg.instruction_phrases:
        if phrase.lower() in lowered_p or phrase.lower() in lowered_h:
            return FilterVerdict(cand.id, kept=False, rule="instruction_phrase")

    if len(cand.premise.strip()) < cfg.min_chars or len(cand.hypothesis.strip()) < cfg.min_chars:
        return FilterVerdict(cand.id, kept=False, rule="too_short")

    return FilterVerdict(cand.id, kept=True)


def score_candidates(
    cands: list[GeneratedCandidate], state: ToyModelState
) -> dict[str, float]:
    """Estimated max variability per candidate from the model's per-epoch
    snapshots."""
    scores = {}
    for cand in cands:
        ex = Example(id=cand.id, premise=cand.premise or "", hypothesis=cand.hypothesis or "")
        scores[cand.id] = estimated_max_variability(predict_over_epochs(state, ex))
    return scores


def score_candidates_from_probs(
    cands: list[GeneratedCandidate], probs_by_id: dict
) -> dict[str, float]:
    """Same scoring from externally supplied per-epoch prediction matrices."""
    scores = {}
    for cand in cands:
        if cand.id not in probs_by_id:
            raise FilterError(f"no per-epoch predictions for candidate {cand.id!r}")
        scores[cand.id] = estimated_max_variability(probs_by_id[cand.id])
    return scores


@dataclass
class SelectionResult:
    dataset: Dataset
    shortfalls: dict[str, int]  # label -> missing count vs quota
    per_class_quota: int
    slack: int  # examples lost to per-class flooring, < |labels|


def select_balanced_top(
    cands: list[GeneratedCandidate],
    scores: dict[str, float],
    q: float,
    label_names: list[str],
) -> SelectionResult:
    """Per intended label, the quota = floor(floor(q*|kept|) / |labels|)
    highest-scoring candidates, ties by id ascending.

    Classes short of quota contribute what they have; no backfilling from
    other classes, so the equal-count contract survives at the cost of
    output size. Selected examples are emitted unlabeled.
    """
    if not 0 < q <= 1:
        raise FilterError(f"retained fraction q must be in (0, 1], got {q}")
    for cand in cands:
        if cand.id not in scores:
            raise FilterError(f"no score for candidate {cand.id!r}")
    total = int(q * len(cands))
    quota = total // len(label_names) if label_names else 0

    by_label: dict[str, list[GeneratedCandidate]] = {name: [] for name in label_names}
    for cand in cands:
        if cand.intended_label not in by_label:
            raise FilterError(
                f"candidate {cand.id!r} has unknown intended label {cand.intended_label!r}"
            )
        by_label[cand.intended_label].append(cand)

    chosen: list[GeneratedCandidate] = []
    shortfalls: dict[str, int] = {}
    for label in label_names:
        ranked = sorted(by_label[label], key=lambda c: (-scores[c.id], c.id))
        take = ranked[:quota]
        if len(take) < quota:
            shortfalls[label] = quota - len(take)
        chosen.extend(take)

    examples = [
        Example(
            id=c.id,
            premise=c.premise or "",
            hypothesis=c.hypothesis or "",
            label=None,
            source="generated",
            seed_id=c.seed_id,
            meta={"intended_label": c.intended_label, "score": scores[c.id]},
        )
        for c in sorted(chosen, key=lambda c: c.id)
    ]
    return SelectionResult(
        dataset=Dataset(name="filtered", examples=examples),
        shortfalls=shortfalls,
        per_class_quota=quota,
        slack=total - quota * len(label_names),
    )


@dataclass
class FilterReport:
    input_count: int
    discarded_by_rule: dict[str, int]
    heuristic_kept: int
    selected: int

    def to_dict(self) -> dict:
        return {
            "input": self.input_count,
            "discarded_by_rule": self.discarded_by_rule,
            "heuristic_kept": self.heuristic_kept,
            "selected": self.selected,
        }


def stage_report(verdicts: list[FilterVerdict]) -> FilterReport:
    """Counts per rule plus the kept/selected sizes; input always equals
    kept plus the sum of discards."""
    discarded: dict[str, int] = {rule: 0 for rule in RULES}
    kept = 0
    for verdict in verdicts:
        if verdict.kept:
            kept += 1
        else:
            if verdict.rule is None:
                raise FilterError(f"discarded {verdict.candidate_id!r} without a rule")
            discarded[verdict.rule] += 1
    heuristic_rules = [r for r in RULES if r != "low_variability"]
    heuristic_discards = sum(discarded[r] for r in heuristic_rules)
    return FilterReport(
        input_count=len(verdicts),
        discarded_by_rule=discarded,
        heuristic_kept=len(verdicts) - heuristic_discards,
        selected=kept,
    )


def run_filter(
    cands: list[GeneratedCandidate],
    group_examples_by_seed: dict[str, list[tuple[str, str]]],
    cfg: FilterConfig,
    state: ToyModelState,
    label_names: list[str],
) -> tuple[SelectionResult, list[FilterVerdict]]:
    """Full stage: heuristics, then scoring of survivors, then balanced
    selection; non-selected survivors get a low_variability verdict so the
    accounting identity (input = kept + sum of discards) closes."""
    verdicts: dict[str, FilterVerdict] = {}
    survivors: list[GeneratedCandidate] = []
    for cand in cands:
        verdict = apply_heuristics(cand, group_examples_by_seed.get(cand.seed_id, []), cfg)
        verdicts[cand.id] = verdict
        if verdict.kept:
            survivors.append(cand)

    scores = score_candidates(survivors, state)
    selection = select_balanced_top(survivors, scores, cfg.q, label_names)
    selected_ids = {ex.id for ex in selection.dataset.examples}
    for cand in survivors:
        if cand.id in selected_ids:
            verdicts[cand.id] = FilterVerdict(cand.id, kept=True, score=scores[cand.id])
        else:
            verdicts[cand.id] = FilterVerdict(
                cand.id, kept=False, rule="low_variability", score=scores[cand.id]
            )
    return selection, [verdicts[c.id] for c in cands]


def write_verdicts(verdicts: list[FilterVerdict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for verdict in verdicts:
            fh.write(json.dumps(verdict.to_record()) + "\n")
