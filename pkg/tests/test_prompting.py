import itertools
from pathlib import Path

import pytest

from cartoforge.corpus import Dataset, Example
from cartoforge.exemplars import ExemplarGroup
from cartoforge.prompting import (
    DecodingConfig,
    LMEndpointError,
    MockLM,
    PromptConfig,
    PromptError,
    TransientLMError,
    complete,
    overgenerate,
    parse_completion,
    read_candidates,
    render_prompt,
    write_candidates,
)
from prompt_fixtures import fixture_dataset, fixture_group

GOLDEN_DIR = Path(__file__).parent / "goldens"


class TestRenderPrompt:
    @pytest.mark.parametrize("label", ["entailment", "neutral", "contradiction"])
    def test_byte_matches_golden(self, label):
        text = render_prompt(fixture_group(label), fixture_dataset(), PromptConfig())
        golden = (GOLDEN_DIR / f"prompt_{label}.txt").read_text(encoding="utf-8")
        assert text == golden

    def test_degenerate_single_seed(self):
        ds = Dataset(
            name="d",
            examples=[Example(id="s", premise="A road.", hypothesis="A path.", label="entailment")],
        )
        group = ExemplarGroup(seed_id="s", neighbor_ids=[], label="entailment", similarities=[])
        text = render_prompt(group, ds, PromptConfig())
        assert text == (
            "Write a pair of sentences that have the same relationship as the previous "
            "examples. Examples:\n\n1. A road.\nImplication: A path.\n\n2."
        )

    def test_input_order_never_changes_output(self):
        ds = fixture_dataset()
        base = render_prompt(fixture_group("entailment"), ds, PromptConfig())
        group = fixture_group("entailment")
        for perm in itertools.permutations(range(4)):
            shuffled = ExemplarGroup(
                seed_id=group.seed_id,
                neighbor_ids=[group.neighbor_ids[i] for i in perm],
                label=group.label,
                similarities=[group.similarities[i] for i in perm],
            )
            assert render_prompt(shuffled, ds, PromptConfig()) == base

    def test_missing_member_text_is_an_error(self):
        ds = Dataset(
            name="d",
            examples=[
                Example(id="s", premise="", hypothesis="h", label="entailment"),
            ],
        )
        group = ExemplarGroup(seed_id="s", neighbor_ids=[], label="entailment", similarities=[])
        with pytest.raises(PromptError, match="empty text"):
            render_prompt(group, ds, PromptConfig())

    def test_relation_words_must_be_distinct(self):
        with pytest.raises(PromptError):
            PromptConfig(relation_words={"entailment": "Same", "neutral": "Same"})


class TestParseCompletion:
    def test_direct_format(self):
        result = parse_completion(
            "The port is north.\nContradiction: The port is south.", "Contradiction"
        )
        assert result.ok
        assert result.premise == "The port is north."
        assert result.hypothesis == "The port is south."

    def test_no_separator(self):
        result = parse_completion("Just some text with no marker", "Implication")
        assert not result.ok and result.reason == "no_separator"

    def test_multiple_separators(self):
        result = parse_completion("6. A.\nImplication: B\nImplication: C", "Implication")
        assert not result.ok and result.reason == "multiple_separators"

    def test_numbering_stripped_from_premise_only(self):
        result = parse_completion("6. The sky is blue.\nImplication: 7. It is daytime.", "Implication")
        assert result.ok
        assert result.premise == "The sky is blue."
        assert result.hypothesis == "7. It is daytime."

    def test_empty_premise_side(self):
        result = parse_completion("Implication: hypothesis only", "Implication")
        assert not result.ok and result.reason == "empty_side"

    def test_empty_hypothesis_side(self):
        result = parse_completion("A premise.\nImplication:   ", "Implication")
        assert not result.ok and result.reason == "empty_side"

    def test_multiline_sides_joined(self):
        result = parse_completion(
            "1. First half\nsecond half.\nPossibility: Hyp starts\nand continues.", "Possibility"
        )
        assert result.ok
        assert result.premise == "First half second half."
        assert result.hypothesis == "Hyp starts and continues."


class FlakyEndpoint:
    """Fails transiently n times, then echoes a canned pair."""

    def __init__(self, failures, text="A canned premise.\nImplication: A canned hypothesis."):
        self.failures = failures
        self.text = text
        self.calls = 0

    def complete(self, payload):
        self.calls += 1
        if self.calls <= self.failures:
            raise TransientLMError("boom", status=500, body="err")
        return self.text


class TestComplete:
    def test_mock_echo(self):
        endpoint = FlakyEndpoint(failures=0)
        text = complete("prompt", DecodingConfig(), endpoint, backoff=0)
        assert text == "A canned premise.\nImplication: A canned hypothesis."

    def test_three_failures_exhaust_retries(self):
        endpoint = FlakyEndpoint(failures=3)
        with pytest.raises(TransientLMError, match="after 3 attempts"):
            complete("prompt", DecodingConfig(), endpoint, backoff=0)
        assert endpoint.calls == 3

    def test_two_failures_then_success(self):
        endpoint = FlakyEndpoint(failures=2)
        text = complete("prompt", DecodingConfig(), endpoint, backoff=0)
        assert "canned" in text
        assert endpoint.calls == 3

    def test_stop_sequence_truncates(self):
        endpoint = FlakyEndpoint(failures=0, text="Keep this.\n\nDrop this.")
        text = complete("prompt", DecodingConfig(), endpoint, backoff=0)
        assert text == "Keep this."

    def test_non_transient_error_propagates_immediately(self):
        class Bad:
            calls = 0

            def complete(self, payload):
                self.calls += 1
                raise LMEndpointError("denied", status=403, body="forbidden")

        endpoint = Bad()
        with pytest.raises(LMEndpointError, match="denied"):
            complete("prompt", DecodingConfig(), endpoint, backoff=0)
        assert endpoint.calls == 1


class TestDecodingConfig:
    def test_defaults(self):
        dec = DecodingConfig()
        assert (dec.top_p, dec.temperature, dec.max_tokens) == (0.5, 1.0, 120)
        assert dec.stop == "\n\n"
        assert dec.presence_penalty == 0.0 and dec.frequency_penalty == 0.0

    def test_payload_fields(self):
        payload = DecodingConfig().payload("PROMPT")
        assert set(payload) == {
            "prompt", "max_tokens", "temperature", "top_p", "stop",
            "presence_penalty", "frequency_penalty",
        }

    def test_bad_top_p_rejected(self):
        with pytest.raises(PromptError):
            DecodingConfig(top_p=0.0)


class TestOvergenerate:
    def test_counts_with_always_parsing_mock(self):
        ds = fixture_dataset()
        groups = [fixture_group("entailment"), fixture_group("neutral")]

        class Echo:
            def complete(self, payload):
                word = "Implication" if "Implication" in payload["prompt"] else "Possibility"
                return f"A new premise.\n{word}: A new hypothesis."

        run = overgenerate(groups, ds, PromptConfig(), DecodingConfig(), Echo(), backoff=0)
        assert len(run.candidates) == 10
        assert all(c.parse_ok for c in run.candidates)
        assert [c.sample_index for c in run.candidates[:5]] == [0, 1, 2, 3, 4]
        assert run.candidates[0].id == "e0.g0"
        assert run.candidates[0].intended_label == "entailment"

    def test_malformed_completion_recorded_not_dropped(self):
        ds = fixture_dataset()
        groups = [fixture_group("entailment")]

        class OneBad:
            calls = 0

            def complete(self, payload):
                self.calls += 1
                if self.calls == 3:
                    return "no separator here"
                return "P.\nImplication: H."

        run = overgenerate(groups, ds, PromptConfig(), DecodingConfig(), OneBad(), backoff=0)
        assert len(run.candidates) == 5
        assert len(run.parsed()) == 4
        bad = [c for c in run.candidates if not c.parse_ok][0]
        assert bad.parse_reason == "no_separator"

    def test_endpoint_errors_recorded_and_run_continues(self):
        ds = fixture_dataset()
        groups = [fixture_group("entailment")]

        class Flaky:
            calls = 0

            def complete(self, payload):
                self.calls += 1
                if self.calls == 2:
                    raise LMEndpointError("bad request", status=400)
                return "P.\nImplication: H."

        run = overgenerate(groups, ds, PromptConfig(), DecodingConfig(), Flaky(), backoff=0)
        assert len(run.candidates) == 4
        assert len(run.endpoint_errors) == 1
        assert run.endpoint_errors[0][0] == "e0"

    def test_mock_runs_are_reproducible(self):
        ds = fixture_dataset()
        groups = [fixture_group(lbl) for lbl in ("entailment", "neutral", "contradiction")]
        run1 = overgenerate(groups, ds, PromptConfig(), DecodingConfig(), MockLM(seed=4), backoff=0)
        run2 = overgenerate(groups, ds, PromptConfig(), DecodingConfig(), MockLM(seed=4), backoff=0)
        assert [c.to_record() for c in run1.candidates] == [c.to_record() for c in run2.candidates]

    def test_mock_produces_parsable_majority(self):
        ds = fixture_dataset()
        groups = [fixture_group("entailment")]
        cfg = PromptConfig(samples_per_context=40)
        run = overgenerate(groups, ds, cfg, DecodingConfig(), MockLM(seed=1), backoff=0)
        parsed = run.parsed()
        assert len(parsed) > 20
        assert any(c.premise and c.hypothesis for c in parsed)


class TestCandidateIO:
    def test_round_trip(self, tmp_path):
        ds = fixture_dataset()
        run = overgenerate(
            [fixture_group("neutral")], ds, PromptConfig(), DecodingConfig(), MockLM(seed=2), backoff=0
        )
        path = tmp_path / "cands.jsonl"
        write_candidates(run.candidates, path)
        got = read_candidates(path)
        assert [c.to_record() for c in got] == [c.to_record() for c in run.candidates]
