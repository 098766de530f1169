"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line. Run with `pytest tests/test_acceptance.py -v -s`.
"""

import itertools
import json
import math
import random
import socket
import threading
import time
from pathlib import Path

import httpx
import numpy as np
import uvicorn

from cartoforge.corpus import Example, split_train_test
from cartoforge.dynamics import (
    EpochPredictionLog,
    compute_data_map,
    estimated_max_variability,
)
from cartoforge.filtering import (
    FilterConfig,
    FilterVerdict,
    apply_heuristics,
    select_balanced_top,
    stage_report,
)
from cartoforge.pipeline import PipelineConfig, run_all, validate_chain
from cartoforge.prompting import GeneratedCandidate, PromptConfig, render_prompt
from cartoforge.review_core import AnnotationRecord, aggregate, cohens_kappa
from cartoforge.review_service import ReviewStore, create_app
from cartoforge.synth import (
    flip_labels,
    make_corpus,
    make_planted_hypothesis_corpus,
    make_planted_word_corpus,
    make_random_corpus,
)
from cartoforge.toytrainer import (
    ToyModelConfig,
    gradient_check,
    predict_over_epochs,
    train,
)
from cartoforge import audit as audit_mod
from prompt_fixtures import fixture_dataset, fixture_group

GOLDEN_DIR = Path(__file__).parent / "goldens"
BUNDLED_CORPUS = Path(__file__).parent.parent / "data" / "seed_corpus.jsonl"

LABELS = ["entailment", "neutral", "contradiction"]


def announce(name, ok):
    print(f"{'PASS' if ok else 'FAIL'}  {name}")
    assert ok, name


# ----------------------------------------------------------------------
# 1. Eq.-1 exactness against a brute-force oracle


def brute_force_sigma(mat):
    epochs, n_labels = len(mat), len(mat[0])
    best = 0.0
    for y in range(n_labels):
        column = [mat[e][y] for e in range(epochs)]
        mean = sum(column) / epochs
        best = max(best, math.sqrt(sum((v - mean) ** 2 for v in column) / epochs))
    return best


def test_eq1_exactness_against_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        epochs = int(rng.integers(2, 11))
        n_labels = int(rng.choice([2, 3, 5]))
        raw = rng.random((epochs, n_labels)) + 1e-9
        mat = raw / raw.sum(axis=1, keepdims=True)
        got = estimated_max_variability(mat)
        want = brute_force_sigma(mat.tolist())
        worst = max(worst, abs(got - want))
    announce(f"Eq.1 exactness: worst |diff| = {worst:.2e} (tol 1e-12)", worst < 1e-12)


# ----------------------------------------------------------------------
# 2. Cartography sanity: planted label noise and exact-zero variability


def test_cartography_sanity():
    ds = make_corpus(1200, seed=55, ambiguous_fraction=0.2)
    noisy, flipped = flip_labels(ds, 0.10, seed=56)
    _, log = train(noisy, ToyModelConfig(epochs=5, learning_rate=0.5, rng_seed=3))
    points = compute_data_map(log)
    noisy_conf = float(np.mean([p.confidence for p in points if p.example_id in flipped]))
    clean_conf = float(np.mean([p.confidence for p in points if p.example_id not in flipped]))

    constant = EpochPredictionLog(
        example_ids=["const"],
        labels=[0],
        label_names=LABELS,
        probs=np.array([[[0.6, 0.3, 0.1]]] * 5),
    )
    const_var = compute_data_map(constant)[0].variability
    ok = noisy_conf < clean_conf and const_var == 0.0
    announce(
        f"cartography sanity: noisy conf {noisy_conf:.4f} < clean {clean_conf:.4f}, "
        f"constant-prediction variability == {const_var}",
        ok,
    )


# ----------------------------------------------------------------------
# 3. Held-out ambiguity correlation at desk scale


def test_held_out_variability_correlation():
    correlations = []
    for seed in range(5):
        full = make_corpus(5000, seed=100 + seed, name=f"corr{seed}")
        train99, held = split_train_test(full, 50, rng_seed=seed)
        state99, _ = train(train99, ToyModelConfig(epochs=5, rng_seed=seed))
        _, log100 = train(full, ToyModelConfig(epochs=5, rng_seed=seed))
        true_var = {p.example_id: p.variability for p in compute_data_map(log100)}
        est = [estimated_max_variability(predict_over_epochs(state99, ex)) for ex in held.examples]
        true = [true_var[ex.id] for ex in held.examples]
        correlations.append(float(np.corrcoef(est, true)[0, 1]))
    ok = all(r > 0 and r >= 0.3 for r in correlations)
    announce(
        "held-out variability correlation >= 0.3 on all 5 seeds: "
        + ", ".join(f"{r:.3f}" for r in correlations),
        ok,
    )


# ----------------------------------------------------------------------
# 4. Prompt golden files


def test_prompt_golden_files():
    ds = fixture_dataset()
    mismatches = []
    for label in LABELS:
        text = render_prompt(fixture_group(label), ds, PromptConfig())
        golden = (GOLDEN_DIR / f"prompt_{label}.txt").read_text(encoding="utf-8")
        if text != golden:
            mismatches.append(label)
    announce(f"prompt goldens byte-match ({', '.join(LABELS)})", not mismatches)


# ----------------------------------------------------------------------
# 5. Filter heuristics: crafted 12-case suite + fuzzed count identity


def _cand(cid, premise, hypothesis, label="entailment", seed_id="s0"):
    return GeneratedCandidate(
        id=cid, raw="", premise=premise, hypothesis=hypothesis, intended_label=label,
        seed_id=seed_id, sample_index=0, parse_ok=True,
    )


def test_filter_heuristics_crafted_suite():
    cfg = FilterConfig()
    incontext = [("A template premise here.", "A template hypothesis here.")]
    cases = [
        (_cand("01", "Same text here.", "Same text here."), "identical_pair"),
        (_cand("02", "Mixed CASE text.", "mixed case text"), "identical_pair"),
        (_cand("03", "Punct, here!", "punct here"), "identical_pair"),
        (_cand("04", "A template premise here.", "A template hypothesis here."), "copied_incontext"),
        (_cand("05", "a template PREMISE here", "a template hypothesis, here?"), "copied_incontext"),
        (_cand("06", "This pair of sentences is odd.", "A fine hypothesis."), "instruction_phrase"),
        (_cand("07", "A fine premise.", "They share the same relationship."), "instruction_phrase"),
        (_cand("08", "Hm.", "A fine hypothesis."), "too_short"),
        (_cand("09", "A fine premise.", "OK"), "too_short"),
        (_cand("10", "Tiny", "tiny!"), "identical_pair"),  # identical beats too_short
        (_cand("11", "a template premise here...", "A TEMPLATE hypothesis here"), "copied_incontext"),
        (_cand("12", "A genuinely new premise.", "A genuinely new hypothesis."), None),
    ]
    wrong = []
    for cand, expected in cases:
        verdict = apply_heuristics(cand, incontext, cfg)
        got = verdict.rule if not verdict.kept else None
        if got != expected:
            wrong.append((cand.id, expected, got))
    announce(f"filter heuristics 12-case suite (mismatches: {wrong})", not wrong)


def test_filter_count_identity_fuzzed():
    rng = random.Random(99)
    rules = ["identical_pair", "copied_incontext", "instruction_phrase", "too_short",
             "low_variability"]
    ok = True
    for _ in range(200):
        verdicts = []
        for i in range(rng.randrange(0, 80)):
            if rng.random() < 0.45:
                verdicts.append(FilterVerdict(f"v{i}", kept=True, score=rng.random()))
            else:
                verdicts.append(FilterVerdict(f"v{i}", kept=False, rule=rng.choice(rules)))
        report = stage_report(verdicts)
        ok &= report.input_count == report.selected + sum(report.discarded_by_rule.values())
    announce("filter accounting identity on 200 fuzzed batches", ok)


# ----------------------------------------------------------------------
# 6. Balanced selection equals the enumeration oracle


def test_balanced_selection_against_oracle():
    rng = random.Random(2025)
    ok = True
    for _ in range(200):
        n = rng.randrange(3, 90)
        cands = [_cand(f"c{i:03d}", f"p{i}", f"h{i}", label=rng.choice(LABELS)) for i in range(n)]
        scores = {c.id: round(rng.random(), 2) for c in cands}
        q = rng.choice([0.2, 0.25, 0.5, 0.75, 1.0])
        result = select_balanced_top(cands, scores, q, LABELS)
        total = int(q * len(cands))
        quota = total // len(LABELS)
        expected = set()
        counts = {}
        for label in LABELS:
            members = sorted(
                (c for c in cands if c.intended_label == label),
                key=lambda c: (-scores[c.id], c.id),
            )
            expected.update(c.id for c in members[:quota])
            counts[label] = min(quota, len(members))
        got = {ex.id for ex in result.dataset.examples}
        ok &= got == expected
        if not result.shortfalls:
            ok &= len(set(counts.values())) <= 1  # exactly equal class counts
    announce("balanced selection matches sort-and-slice oracle on 200 instances", ok)


# ----------------------------------------------------------------------
# 7. Aggregation truth table and kappa unit values


def test_aggregation_truth_table_and_kappa():
    original = ("Original premise.", "Original hypothesis.")

    def rec(worker, action, label=None, cid="c1"):
        rp, rh = (f"Revised by {worker}.", original[1]) if action == "revise" else (None, None)
        return AnnotationRecord(candidate_id=cid, worker_id=worker, action=action,
                                label=label, revised_premise=rp, revised_hypothesis=rh)

    def agg(a, b, seed=0):
        return aggregate(a, b, original_premise=original[0],
                         original_hypothesis=original[1], rng_seed=seed)

    ok = True
    # all 9 action combinations x label agree/disagree
    for act1, act2 in itertools.product(["label_as_is", "revise", "discard"], repeat=2):
        for agree in (True, False):
            l1 = "entailment" if act1 != "discard" else None
            l2 = (l1 if agree else "neutral") if act2 != "discard" else None
            out = agg(rec("w1", act1, l1), rec("w2", act2, l2), seed=13)
            if "discard" in (act1, act2):
                ok &= out.status == "discarded"
                continue
            ok &= out.status == "kept"
            if act1 == act2 == "revise":
                ok &= out.used_revision
                ok &= out.final_premise in ("Revised by w1.", "Revised by w2.")
                picked_w1 = out.final_premise == "Revised by w1."
                ok &= out.final_label == (l1 if picked_w1 else l2)
            else:
                ok &= not out.used_revision
                ok &= (out.final_premise, out.final_hypothesis) == original
                ok &= out.final_label in {l1, l2}
            if act1 != "discard" and act2 != "discard":
                ok &= out.label_disagreement == (not agree)
            # symmetry under argument swap
            ok &= agg(rec("w1", act1, l1), rec("w2", act2, l2), seed=13) == out
            ok &= agg(rec("w2", act2, l2, cid="c1"), rec("w1", act1, l1, cid="c1"), seed=13) == out
    announce("aggregation truth table (9 action combos x agree/disagree)", ok)

    perfect = cohens_kappa([("e", "e"), ("n", "n"), ("c", "c")])
    worked = cohens_kappa([("E", "E")] * 3 + [("N", "N")] * 3 + [("E", "N")] * 2 + [("N", "E")] * 2)
    rng = random.Random(77)
    independent = cohens_kappa(
        [(rng.choice(LABELS), rng.choice(LABELS)) for _ in range(10_000)]
    )
    ok = perfect == 1.0 and abs(worked - 0.2) < 1e-12 and abs(independent) < 0.05
    announce(
        f"kappa units: perfect={perfect}, worked={worked:.3f}, independence={independent:+.4f}",
        ok,
    )


# ----------------------------------------------------------------------
# 8. Gradient check


def test_gradient_check():
    report = gradient_check(ToyModelConfig(hash_dims=16, rng_seed=11), n_labels=3, batch=24)
    announce(
        f"gradient check: max relative error {report.max_rel_error:.2e} (tol 1e-4)",
        report.passed,
    )


# ----------------------------------------------------------------------
# 9. Partial-input audit


def test_partial_input_audit():
    planted_train = make_planted_hypothesis_corpus(600, seed=1)
    planted_test = make_planted_hypothesis_corpus(300, seed=2, name="ptest")
    planted_acc = audit_mod.partial_input_accuracy(
        planted_train, planted_test, "hypothesis",
        ToyModelConfig(epochs=5, learning_rate=0.5, batch_size=32, hash_dims=256, rng_seed=0),
    )
    null_train = make_random_corpus(3000, seed=3)
    null_test = make_random_corpus(3000, seed=4, name="ntest")
    null_acc = audit_mod.partial_input_accuracy(
        null_train, null_test, "hypothesis",
        ToyModelConfig(epochs=3, batch_size=32, hash_dims=128, rng_seed=0),
    )
    ok = planted_acc >= 0.95 and abs(null_acc - 1 / 3) <= 0.05
    announce(
        f"partial-input audit: planted {planted_acc:.3f} >= 0.95, "
        f"shuffled {null_acc:.3f} within 1/3 +- 0.05",
        ok,
    )


# ----------------------------------------------------------------------
# 10. Lexical correlation detection and null behavior


def test_lexical_correlation():
    planted = make_planted_word_corpus(n_with_word=1000, n_per_class=1200, seed=0)
    stats = audit_mod.lexical_correlations(planted, alpha=0.01, min_count=20)
    hit = next(s for s in stats if s.word == "zephyr" and s.label == "entailment")
    planted_ok = hit.detectable and abs(hit.z - 44.72) < 0.01

    clean_runs = 0
    for seed in range(20):
        null = make_random_corpus(3000, seed=1000 + seed, name=f"null{seed}")
        null_stats = audit_mod.lexical_correlations(null, alpha=0.01, min_count=20)
        clean_runs += not any(s.detectable for s in null_stats)
    ok = planted_ok and clean_runs >= 19
    announce(
        f"lexical correlation: planted z={hit.z:.2f} detected; "
        f"null clean in {clean_runs}/20 runs (need >= 19)",
        ok,
    )


# ----------------------------------------------------------------------
# 11. End-to-end determinism and stage-size monotonicity


def test_end_to_end_determinism(tmp_path):
    def run(run_dir):
        cfg = PipelineConfig(
            d0_path=str(BUNDLED_CORPUS),
            run_dir=str(run_dir),
            rng_seed=7,
            trainer=ToyModelConfig(rng_seed=7),
        )
        return cfg, run_all(cfg)

    cfg_a, counts_a = run(tmp_path / "a")
    cfg_b, counts_b = run(tmp_path / "b")

    files_a = sorted(Path(cfg_a.run_dir).iterdir())
    files_b = sorted(Path(cfg_b.run_dir).iterdir())
    identical = [fa.name for fa in files_a] == [fb.name for fb in files_b] and all(
        fa.read_bytes() == fb.read_bytes() for fa, fb in zip(files_a, files_b)
    )
    chain_ok = validate_chain(cfg_a.run_dir) == []
    gen = counts_a["generate"]["parsed"]
    kept = counts_a["filter"]["heuristic_kept"]
    selected = counts_a["filter"]["selected"]
    monotone = gen >= kept >= selected
    announce(
        f"end-to-end determinism: {len(files_a)} artifacts byte-identical, chain valid, "
        f"sizes {gen} >= {kept} >= {selected}",
        identical and chain_ok and monotone,
    )


# ----------------------------------------------------------------------
# 12. Service invariants under concurrency, crashes, and replay


class ServerHandle:
    def __init__(self, data_dir):
        self.data_dir = data_dir
        self.port = None
        self.server = None
        self.thread = None
        self.store = None

    def start(self):
        with socket.socket() as sock:
            sock.bind(("127.0.0.1", 0))
            self.port = sock.getsockname()[1]
        self.store = ReviewStore(self.data_dir, lease_timeout=300.0, snapshot_every=250)
        app = create_app(self.store)
        config = uvicorn.Config(app, host="127.0.0.1", port=self.port, log_level="error")
        self.server = uvicorn.Server(config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)
        self.thread.start()
        deadline = time.time() + 10
        while time.time() < deadline:
            try:
                if httpx.get(self.base() + "/api/health", timeout=1).status_code == 200:
                    return
            except httpx.HTTPError:
                time.sleep(0.02)
        raise RuntimeError("server did not come up")

    def base(self):
        return f"http://127.0.0.1:{self.port}"

    def crash(self):
        self.server.should_exit = True
        self.thread.join(timeout=10)
        self.store.close()


def test_service_invariants_under_concurrency(tmp_path):
    n_tasks, n_workers = 500, 20
    handle = ServerHandle(tmp_path / "svc")
    handle.start()
    url = {"base": handle.base()}

    examples = [
        Example(id=f"task-{i:04d}", premise=f"Premise {i}.", hypothesis=f"Hypothesis {i}.")
        for i in range(n_tasks)
    ]
    resp = httpx.post(
        url["base"] + "/api/tasks/import",
        json={"name": "load", "examples": [ex.to_record() for ex in examples]},
        timeout=30,
    )
    assert resp.json()["imported"] == n_tasks

    submitted = [0]
    submit_lock = threading.Lock()
    errors = []

    def worker(worker_id):
        rng = random.Random(worker_id)
        with httpx.Client(timeout=5) as client:
            while True:
                try:
                    resp = client.get(
                        url["base"] + "/api/tasks/next", params={"worker": worker_id}
                    )
                    if resp.status_code != 200:
                        time.sleep(0.02)
                        continue
                    task = resp.json()["task"]
                except httpx.HTTPError:
                    time.sleep(0.05)
                    continue
                if task is None:
                    return
                cid = task["candidate_id"]
                roll = rng.random()
                if roll < 0.1:
                    record = dict(candidate_id=cid, worker_id=worker_id, action="discard",
                                  label=None, revised_premise=None, revised_hypothesis=None,
                                  timestamp=0.0)
                elif roll < 0.25:
                    record = dict(candidate_id=cid, worker_id=worker_id, action="revise",
                                  label=rng.choice(LABELS),
                                  revised_premise=task["premise"],
                                  revised_hypothesis=task["hypothesis"] + " Revised.",
                                  timestamp=0.0)
                else:
                    record = dict(candidate_id=cid, worker_id=worker_id, action="label_as_is",
                                  label=rng.choice(LABELS), revised_premise=None,
                                  revised_hypothesis=None, timestamp=0.0)
                record["idempotency_key"] = f"{cid}:{worker_id}"
                while True:
                    try:
                        resp = client.post(url["base"] + "/api/annotations", json=record)
                    except httpx.HTTPError:
                        time.sleep(0.05)
                        continue
                    if resp.status_code == 200:
                        with submit_lock:
                            submitted[0] += 1
                        break
                    if resp.status_code in (403, 409):
                        errors.append((worker_id, cid, resp.status_code))
                        break
                    time.sleep(0.02)
                if rng.random() < 0.05:
                    time.sleep(0.001 * rng.random())

    threads = [threading.Thread(target=worker, args=(f"w{i:02d}",)) for i in range(n_workers)]
    for t in threads:
        t.start()

    # two injected crashes with journal replay in between
    for threshold in (n_tasks * 2 // 3, n_tasks * 4 // 3):
        while submitted[0] < threshold and any(t.is_alive() for t in threads):
            time.sleep(0.02)
        handle.crash()
        handle.start()
        url["base"] = handle.base()

    for t in threads:
        t.join(timeout=120)
    assert not any(t.is_alive() for t in threads), "workers deadlocked"

    stats = httpx.get(url["base"] + "/api/stats", timeout=10).json()
    export_lines = [
        json.loads(line)
        for line in httpx.get(url["base"] + "/api/export", timeout=30).text.splitlines()
        if line.strip()
    ]
    by_candidate = {}
    for rec in export_lines:
        by_candidate.setdefault(rec["candidate_id"], []).append(rec["worker_id"])
    pairs_ok = all(
        len(workers) == 2 and len(set(workers)) == 2 for workers in by_candidate.values()
    )
    violations = stats.get("invariant_violations", [])
    done_fraction = stats["done"] / n_tasks
    ok = pairs_ok and not violations and done_fraction >= 0.95 and len(by_candidate) == stats["done"]
    announce(
        f"service invariants: {stats['done']}/{n_tasks} done, "
        f"{len(export_lines)} annotations, all pairs distinct={pairs_ok}, "
        f"violations={violations}, crashes survived=2",
        ok,
    )
    handle.crash()
