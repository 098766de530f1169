"""Stage orchestration: each stage reads and writes declared files inside a
run directory and records a manifest (config hash, input hashes, output
hashes, counts), so a full run is auditable and byte-reproducible under the
mock backend.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import audit as audit_mod
from .corpus import (
    DEFAULT_LABELS,
    Dataset,
    Example,
    default_test_count,
    read_dataset,
    split_train_test,
    write_dataset,
)
from .dynamics import (
    compute_data_map,
    export_datamap,
    read_datamap,
    read_prediction_log,
    select_top_ambiguous,
    write_prediction_log,
)
from .exemplars import (
    EmbeddingTable,
    ExemplarGroup,
    build_groups,
    read_embedding_table,
    write_embedding_table,
)
from .filtering import FilterConfig, run_filter, stage_report, write_verdicts
from .prompting import (
    DecodingConfig,
    HttpLMEndpoint,
    MockLM,
    PromptConfig,
    overgenerate,
    read_candidates,
    write_candidates,
)
from .review_core import (
    AnnotationRecord,
    aggregate_all,
    assemble,
    cohens_kappa,
    kappa_pairs,
    read_annotations,
    revision_stats,
    write_annotations,
    write_outcomes,
)
from .toytrainer import ToyModelConfig, ToyModelState, featurize, train

STAGES = (
    "train-toy",
    "cartography",
    "exemplars",
    "generate",
    "filter",
    "simulate-review",
    "aggregate",
    "audit",
)


class PipelineError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    d0_path: str = "data/seed_corpus.jsonl"
    run_dir: str = "run"
    rng_seed: int = 7
    p: float = 0.25
    k: int = 4
    q: float = 0.5
    exclude_genres: list[str] = field(default_factory=lambda: ["telephone"])
    label_names: list[str] = field(default_factory=lambda: list(DEFAULT_LABELS))
    trainer: ToyModelConfig = field(default_factory=ToyModelConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    decoding: DecodingConfig = field(default_factory=DecodingConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    lm_mode: str = "mock"  # mock | http
    lm_url: str = ""
    lm_api_key_header: str = ""
    lm_api_key: str = ""
    lm_rps: float = 5.0
    audit_alpha: float = 0.01
    audit_min_count: int = 20
    sim_revise_rate: float = 0.12
    sim_discard_rate: float = 0.08

    def __post_init__(self) -> None:
        if not 0 < self.p <= 1:
            raise PipelineError(f"p must be in (0, 1], got {self.p}")
        if self.k < 1:
            raise PipelineError(f"k must be >= 1, got {self.k}")
        if self.prompt.samples_per_context < 1:
            raise PipelineError("n (samples per context) must be >= 1")

    def to_dict(self) -> dict:
        return {
            "d0_path": self.d0_path,
            "rng_seed": self.rng_seed,
            "p": self.p,
            "k": self.k,
            "n": self.prompt.samples_per_context,
            "q": self.q,
            "exclude_genres": self.exclude_genres,
            "label_names": self.label_names,
            "trainer": self.trainer.__dict__,
            "prompt": {
                "relation_words": self.prompt.relation_words,
                "instruction": self.prompt.instruction,
                "samples_per_context": self.prompt.samples_per_context,
            },
            "decoding": self.decoding.__dict__,
            "filter": {
                "q": self.filter.q,
                "min_chars": self.filter.min_chars,
                "instruction_phrases": self.filter.instruction_phrases,
            },
            "lm_mode": self.lm_mode,
            "lm_url": self.lm_url,
            "audit_alpha": self.audit_alpha,
            "audit_min_count": self.audit_min_count,
            "sim_revise_rate": self.sim_revise_rate,
            "sim_discard_rate": self.sim_discard_rate,
        }


def load_config(path: str | None, overrides: dict[str, str] | None = None) -> PipelineConfig:
    """INI config with dotted-key overrides (e.g. {"pipeline.p": "0.5"})."""
    parser = configparser.ConfigParser()
    if path:
        if not Path(path).exists():
            raise PipelineError(f"config file not found: {path}")
        parser.read(path)
    for key, value in (overrides or {}).items():
        section, _, option = key.partition(".")
        if not option:
            section, option = "pipeline", section
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, option, value)

    def get(section: str, option: str, cast, default):
        if parser.has_option(section, option):
            raw = parser.get(section, option)
            if cast is bool:
                return raw.lower() in ("1", "true", "yes")
            return cast(raw)
        return default

    cfg = PipelineConfig(
        d0_path=get("pipeline", "d0", str, "data/seed_corpus.jsonl"),
        run_dir=get("pipeline", "run_dir", str, "run"),
        rng_seed=get("pipeline", "rng_seed", int, 7),
        p=get("pipeline", "p", float, 0.25),
        k=get("pipeline", "k", int, 4),
        q=get("pipeline", "q", float, 0.5),
        exclude_genres=[
            g for g in get("pipeline", "exclude_genres", str, "telephone").split(",") if g
        ],
        trainer=ToyModelConfig(
            epochs=get("trainer", "epochs", int, 5),
            learning_rate=get("trainer", "learning_rate", float, 0.1),
            batch_size=get("trainer", "batch_size", int, 32),
            hash_dims=get("trainer", "hash_dims", int, 256),
            rng_seed=get("pipeline", "rng_seed", int, 7),
            l2=get("trainer", "l2", float, 0.0),
        ),
        prompt=PromptConfig(
            samples_per_context=get("pipeline", "n", int, 5),
        ),
        decoding=DecodingConfig(
            top_p=get("decoding", "top_p", float, 0.5),
            temperature=get("decoding", "temperature", float, 1.0),
            max_tokens=get("decoding", "max_tokens", int, 120),
            stop=get("decoding", "stop", str, "\\n\\n").replace("\\n", "\n"),
            presence_penalty=get("decoding", "presence_penalty", float, 0.0),
            frequency_penalty=get("decoding", "frequency_penalty", float, 0.0),
        ),
        filter=FilterConfig(
            q=get("pipeline", "q", float, 0.5),
            min_chars=get("filter", "min_chars", int, 5),
            instruction_phrases=get(
                "filter",
                "instruction_phrases",
                str,
                "pair of sentences|same relationship|previous examples",
            ).split("|"),
        ),
        lm_mode=get("lm", "mode", str, "mock"),
        lm_url=get("lm", "url", str, ""),
        lm_api_key_header=get("lm", "api_key_header", str, ""),
        lm_api_key=get("lm", "api_key", str, ""),
        lm_rps=get("lm", "rps", float, 5.0),
        audit_alpha=get("audit", "alpha", float, 0.01),
        audit_min_count=get("audit", "min_count", int, 20),
    )
    return cfg


# ----------------------------------------------------------------------
# Manifests

def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _config_hash(cfg: PipelineConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()


def _require(path: Path) -> Path:
    if not path.exists():
        raise PipelineError(f"missing upstream artifact: {path}")
    return path


def _write_manifest(
    run_dir: Path,
    stage: str,
    cfg: PipelineConfig,
    inputs: list[Path],
    outputs: list[Path],
    counts: dict,
) -> None:
    manifest = {
        "stage": stage,
        "config_hash": _config_hash(cfg),
        "inputs": {p.name if p.parent == run_dir else str(p): _sha256(p) for p in inputs},
        "outputs": {p.name: _sha256(p) for p in outputs},
        "counts": counts,
    }
    with open(run_dir / f"manifest_{stage}.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def validate_chain(run_dir) -> list[str]:
    """Cross-check manifests: every consumed artifact's recorded input hash
    must equal the hash recorded by the stage that produced it."""
    run_dir = Path(run_dir)
    produced: dict[str, str] = {}
    problems: list[str] = []
    for stage in STAGES:
        path = run_dir / f"manifest_{stage}.json"
        if not path.exists():
            continue
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        for name, digest in manifest["inputs"].items():
            if name in produced and produced[name] != digest:
                problems.append(
                    f"{stage}: input {name} hash {digest[:12]} != produced {produced[name][:12]}"
                )
        for name, digest in manifest["outputs"].items():
            produced[name] = digest
    return problems


# ----------------------------------------------------------------------
# Model state persistence

def write_model_state(state: ToyModelState, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "label_names": state.label_names,
                "hash_dims": state.hash_dims,
                "snapshots": [w.tolist() for w in state.snapshots],
            },
            fh,
        )
        fh.write("\n")


def read_model_state(path) -> ToyModelState:
    with open(path, encoding="utf-8") as fh:
        blob = json.load(fh)
    return ToyModelState(
        label_names=blob["label_names"],
        hash_dims=blob["hash_dims"],
        snapshots=[np.asarray(w) for w in blob["snapshots"]],
    )


def write_sentence_embeddings(ds: Dataset, hash_dims: int, path) -> None:
    """Per-side embeddings keyed "<id>#premise" / "<id>#hypothesis", built
    with the hashed featurizer as the stand-in sentence encoder.

    Both sides go through the premise slot so they share one bucket space;
    routing them through their own slots would make every pair orthogonal by
    construction."""
    table = EmbeddingTable(dim=hash_dims)
    for ex in ds.examples:
        for side, text in (("premise", ex.premise), ("hypothesis", ex.hypothesis)):
            vec = featurize(Example(id="", premise=text, hypothesis=""), hash_dims)
            table.add(f"{ex.id}#{side}", vec)
    write_embedding_table(table, path)


# ----------------------------------------------------------------------
# Stages

def stage_train_toy(cfg: PipelineConfig) -> dict:
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    d0 = read_dataset(_require(Path(cfg.d0_path)), name="d0")
    state, log = train(d0, cfg.trainer, label_names=cfg.label_names)
    model_path = run_dir / "model.json"
    log_path = run_dir / "log.jsonl"
    emb_path = run_dir / "emb.jsonl"
    write_model_state(state, model_path)
    write_prediction_log(log, log_path)
    table = EmbeddingTable(dim=cfg.trainer.hash_dims)
    for ex in d0.examples:
        table.add(ex.id, featurize(ex, cfg.trainer.hash_dims))
    write_embedding_table(table, emb_path)
    counts = {"examples": len(d0), "epochs": cfg.trainer.epochs}
    _write_manifest(
        run_dir, "train-toy", cfg, [Path(cfg.d0_path)], [model_path, log_path, emb_path], counts
    )
    return counts


def stage_cartography(cfg: PipelineConfig) -> dict:
    run_dir = Path(cfg.run_dir)
    log = read_prediction_log(_require(run_dir / "log.jsonl"))
    points = compute_data_map(log)
    out = run_dir / "datamap.csv"
    export_datamap(points, out)
    counts = {"points": len(points)}
    _write_manifest(run_dir, "cartography", cfg, [run_dir / "log.jsonl"], [out], counts)
    return counts


def stage_exemplars(cfg: PipelineConfig) -> dict:
    run_dir = Path(cfg.run_dir)
    d0 = read_dataset(_require(Path(cfg.d0_path)), name="d0")
    points = read_datamap(_require(run_dir / "datamap.csv"))
    table = read_embedding_table(_require(run_dir / "emb.jsonl"))
    seed_ids = select_top_ambiguous(
        points, cfg.p, per_label=True, exclude_genres=set(cfg.exclude_genres), dataset=d0
    )
    report = build_groups(seed_ids, table, d0, cfg.k, exclude_genres=set(cfg.exclude_genres))
    groups_path = run_dir / "groups.jsonl"
    with open(groups_path, "w", encoding="utf-8") as fh:
        for group in report.groups:
            fh.write(
                json.dumps(
                    {
                        "seed_id": group.seed_id,
                        "neighbor_ids": group.neighbor_ids,
                        "label": group.label,
                        "similarities": group.similarities,
                    }
                )
                + "\n"
            )
    skips_path = run_dir / "group_skips.json"
    with open(skips_path, "w", encoding="utf-8") as fh:
        json.dump([{"seed_id": s, "reason": r} for s, r in report.skipped], fh, indent=2)
        fh.write("\n")
    counts = {"seeds": len(seed_ids), "groups": len(report.groups), "skipped": len(report.skipped)}
    _write_manifest(
        run_dir,
        "exemplars",
        cfg,
        [Path(cfg.d0_path), run_dir / "datamap.csv", run_dir / "emb.jsonl"],
        [groups_path, skips_path],
        counts,
    )
    return counts


def read_groups(path) -> list[ExemplarGroup]:
    groups = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            groups.append(
                ExemplarGroup(
                    seed_id=rec["seed_id"],
                    neighbor_ids=rec["neighbor_ids"],
                    label=rec["label"],
                    similarities=rec["similarities"],
                )
            )
    return groups


def make_endpoint(cfg: PipelineConfig):
    if cfg.lm_mode == "mock":
        return MockLM(seed=cfg.rng_seed)
    if cfg.lm_mode == "http":
        if not cfg.lm_url:
            raise PipelineError("lm.url required for http mode")
        return HttpLMEndpoint(
            cfg.lm_url,
            api_key_header=cfg.lm_api_key_header or None,
            api_key=cfg.lm_api_key or None,
            rps=cfg.lm_rps,
        )
    raise PipelineError(f"unknown lm mode {cfg.lm_mode!r}")


def stage_generate(cfg: PipelineConfig) -> dict:
    run_dir = Path(cfg.run_dir)
    d0 = read_dataset(_require(Path(cfg.d0_path)), name="d0")
    groups = read_groups(_require(run_dir / "groups.jsonl"))
    endpoint = make_endpoint(cfg)
    run = overgenerate(groups, d0, cfg.prompt, cfg.decoding, endpoint)
    cands_path = run_dir / "candidates.jsonl"
    write_candidates(run.candidates, cands_path)
    report_path = run_dir / "generation_report.json"
    parsed = len(run.parsed())
    counts = {
        "contexts": len(groups),
        "requested": len(groups) * cfg.prompt.samples_per_context,
        "completions": len(run.candidates),
        "parsed": parsed,
        "parse_failures": len(run.candidates) - parsed,
        "endpoint_errors": len(run.endpoint_errors),
    }
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(
            {**counts, "errors": [list(e) for e in run.endpoint_errors]}, fh, indent=2
        )
        fh.write("\n")
    _write_manifest(
        run_dir,
        "generate",
        cfg,
        [Path(cfg.d0_path), run_dir / "groups.jsonl"],
        [cands_path, report_path],
        counts,
    )
    return counts


def stage_filter(cfg: PipelineConfig) -> dict:
    run_dir = Path(cfg.run_dir)
    d0 = read_dataset(_require(Path(cfg.d0_path)), name="d0")
    candidates = read_candidates(_require(run_dir / "candidates.jsonl"))
    groups = read_groups(_require(run_dir / "groups.jsonl"))
    state = read_model_state(_require(run_dir / "model.json"))
    by_id = d0.by_id()
    group_pairs = {
        g.seed_id: [
            (by_id[m].premise, by_id[m].hypothesis) for m in g.neighbor_ids + [g.seed_id]
        ]
        for g in groups
    }
    parsed = [c for c in candidates if c.parse_ok]
    selection, verdicts = run_filter(parsed, group_pairs, cfg.filter, state, cfg.label_names)
    filtered_path = run_dir / "filtered.jsonl"
    write_dataset(selection.dataset, filtered_path)
    verdicts_path = run_dir / "verdicts.jsonl"
    write_verdicts(verdicts, verdicts_path)
    report = stage_report(verdicts)
    report_path = run_dir / "filter_report.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                **report.to_dict(),
                "shortfalls": selection.shortfalls,
                "per_class_quota": selection.per_class_quota,
                "flooring_slack": selection.slack,
            },
            fh,
            indent=2,
        )
        fh.write("\n")
    counts = {
        "input": report.input_count,
        "heuristic_kept": report.heuristic_kept,
        "selected": report.selected,
    }
    _write_manifest(
        run_dir,
        "filter",
        cfg,
        [Path(cfg.d0_path), run_dir / "candidates.jsonl", run_dir / "groups.jsonl", run_dir / "model.json"],
        [filtered_path, verdicts_path, report_path],
        counts,
    )
    return counts


def simulate_review(
    filtered: Dataset,
    rng_seed: int,
    label_names: list[str],
    revise_rate: float = 0.12,
    discard_rate: float = 0.08,
) -> list[AnnotationRecord]:
    """Two deterministic bot workers per candidate, for desk-scale runs with
    nobody at the keyboard. Bots mostly confirm the intended label, sometimes
    pick another, occasionally revise the hypothesis or discard."""
    records = []
    for ex in filtered.examples:
        intended = ex.meta.get("intended_label") or label_names[0]
        for worker in ("sim-a", "sim-b"):
            rng = random.Random(f"{rng_seed}:sim:{ex.id}:{worker}")
            roll = rng.random()
            if roll < discard_rate:
                records.append(
                    AnnotationRecord(
                        candidate_id=ex.id, worker_id=worker, action="discard", timestamp=0.0
                    )
                )
                continue
            label = intended if rng.random() < 0.7 else rng.choice(label_names)
            if roll < discard_rate + revise_rate:
                tokens = ex.hypothesis.split()
                tokens.insert(rng.randrange(len(tokens) + 1), rng.choice(["really", "quite", "simply"]))
                records.append(
                    AnnotationRecord(
                        candidate_id=ex.id,
                        worker_id=worker,
                        action="revise",
                        label=label,
                        revised_premise=ex.premise,
                        revised_hypothesis=" ".join(tokens),
                        timestamp=0.0,
                    )
                )
            else:
                records.append(
                    AnnotationRecord(
                        candidate_id=ex.id,
                        worker_id=worker,
                        action="label_as_is",
                        label=label,
                        timestamp=0.0,
                    )
                )
    return records


def stage_simulate_review(cfg: PipelineConfig) -> dict:
    run_dir = Path(cfg.run_dir)
    filtered = read_dataset(_require(run_dir / "filtered.jsonl"), name="filtered")
    records = simulate_review(
        filtered, cfg.rng_seed, cfg.label_names, cfg.sim_revise_rate, cfg.sim_discard_rate
    )
    out = run_dir / "annotations.jsonl"
    write_annotations(records, out)
    counts = {"tasks": len(filtered), "annotations": len(records)}
    _write_manifest(run_dir, "simulate-review", cfg, [run_dir / "filtered.jsonl"], [out], counts)
    return counts


def stage_aggregate(cfg: PipelineConfig) -> dict:
    run_dir = Path(cfg.run_dir)
    filtered = read_dataset(_require(run_dir / "filtered.jsonl"), name="filtered")
    records = read_annotations(_require(run_dir / "annotations.jsonl"))
    originals = {ex.id: (ex.premise, ex.hypothesis) for ex in filtered.examples}
    outcomes = aggregate_all(records, originals, cfg.rng_seed)
    collab, stats = assemble(outcomes, filtered.by_id())
    pairs = kappa_pairs(records)
    kappa = cohens_kappa(pairs) if pairs else None
    rev_stats = revision_stats(records, originals)

    collab_path = run_dir / "collab.jsonl"
    write_dataset(collab, collab_path)
    outcomes_path = run_dir / "outcomes.jsonl"
    write_outcomes(outcomes, outcomes_path)
    sent_emb_path = run_dir / "collab_sent_emb.jsonl"
    write_sentence_embeddings(collab, cfg.trainer.hash_dims, sent_emb_path)
    stats_path = run_dir / "review_stats.json"
    with open(stats_path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                **stats.to_dict(),
                "cohens_kappa": kappa,
                "kappa_pairs": len(pairs),
                "revision_stats": {
                    k: {
                        "revisions": v.revisions,
                        "delta_histogram": {str(d): c for d, c in v.delta_histogram.items()},
                        "fraction_delta_minus1_plus2": v.fraction_delta_minus1_plus2,
                        "fraction_pronoun_set_changed": v.fraction_pronoun_set_changed,
                    }
                    for k, v in rev_stats.items()
                },
            },
            fh,
            indent=2,
        )
        fh.write("\n")
    counts = {"annotated": stats.annotated, "kept": stats.kept, "revised": stats.revised}
    _write_manifest(
        run_dir,
        "aggregate",
        cfg,
        [run_dir / "filtered.jsonl", run_dir / "annotations.jsonl"],
        [collab_path, outcomes_path, sent_emb_path, stats_path],
        counts,
    )
    return counts


def stage_audit(cfg: PipelineConfig) -> dict:
    run_dir = Path(cfg.run_dir)
    collab = read_dataset(_require(run_dir / "collab.jsonl"), name="collab")
    sent_emb = read_embedding_table(_require(run_dir / "collab_sent_emb.jsonl"))

    test_count = default_test_count(len(collab))
    train_ds, test_ds = split_train_test(collab, max(test_count, 1), cfg.rng_seed)
    trainer_cfg = ToyModelConfig(
        epochs=cfg.trainer.epochs,
        learning_rate=cfg.trainer.learning_rate,
        batch_size=min(cfg.trainer.batch_size, max(1, len(train_ds))),
        hash_dims=cfg.trainer.hash_dims,
        rng_seed=cfg.rng_seed,
        l2=cfg.trainer.l2,
    )
    partial = {
        fld: audit_mod.partial_input_accuracy(train_ds, test_ds, fld, trainer_cfg)
        for fld in ("premise", "hypothesis")
    }

    balanced = audit_mod.balance_by_label(collab, cfg.rng_seed)
    stats = audit_mod.lexical_correlations(balanced, cfg.audit_alpha, cfg.audit_min_count)
    lexcorr_path = run_dir / "lexcorr.csv"
    with open(lexcorr_path, "w", encoding="utf-8") as fh:
        fh.write("word,label,n,p_hat,z,detectable\n")
        for s in stats:
            fh.write(f"{s.word},{s.label},{s.n},{s.p_hat!r},{s.z!r},{int(s.detectable)}\n")

    simdist = audit_mod.similarity_distributions(collab, sent_emb)
    audit_path = run_dir / "audit.json"
    with open(audit_path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "partial_input_accuracy": partial,
                "train_size": len(train_ds),
                "test_size": len(test_ds),
                "balanced_size": len(balanced),
                "lexcorr_tested": len(stats),
                "lexcorr_detectable": sum(1 for s in stats if s.detectable),
                "similarity_means": simdist.means,
                "similarity_stds": simdist.stds,
                "similarity_overlap": simdist.overlap,
            },
            fh,
            indent=2,
        )
        fh.write("\n")
    counts = {"lexcorr_tested": len(stats), "detectable": sum(1 for s in stats if s.detectable)}
    _write_manifest(
        run_dir,
        "audit",
        cfg,
        [run_dir / "collab.jsonl", run_dir / "collab_sent_emb.jsonl"],
        [audit_path, lexcorr_path],
        counts,
    )
    return counts


STAGE_FNS = {
    "train-toy": stage_train_toy,
    "cartography": stage_cartography,
    "exemplars": stage_exemplars,
    "generate": stage_generate,
    "filter": stage_filter,
    "simulate-review": stage_simulate_review,
    "aggregate": stage_aggregate,
    "audit": stage_audit,
}


def run_stage(stage: str, cfg: PipelineConfig) -> dict:
    if stage not in STAGE_FNS:
        raise PipelineError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
    return STAGE_FNS[stage](cfg)


def run_all(cfg: PipelineConfig) -> dict[str, dict]:
    return {stage: run_stage(stage, cfg) for stage in STAGES}
