"""Stage 2: prompt rendering, LM completion, and candidate parsing.

The completion endpoint is a pluggable contract (HTTP JSON POST with the
decoding parameters, returning {"text": ...}). A deterministic seeded mock
ships alongside the HTTP adapter; it recombines the in-context examples and
injects realistic failure modes so desk runs exercise the same dedup/copy/
filter paths as real generations.
"""

from __future__ import annotations

import json
import random
import re
import threading
import time
import zlib
from dataclasses import dataclass, field

import httpx

from .corpus import Dataset
from .exemplars import ExemplarGroup

DEFAULT_RELATION_WORDS = {
    "entailment": "Implication",
    "neutral": "Possibility",
    "contradiction": "Contradiction",
}

DEFAULT_INSTRUCTION = (
    "Write a pair of sentences that have the same relationship as the previous examples. "
    "Examples:"
)

_NUMBERING_RE = re.compile(r"^\d+\.\s*")


class PromptError(ValueError):
    pass


class LMEndpointError(RuntimeError):
    """Non-transient completion failure; carries HTTP status and body when known."""

    def __init__(self, message: str, status: int | None = None, body: str | None = None):
        super().__init__(message)
        self.status = status
        self.body = body


class TransientLMError(LMEndpointError):
    """Retryable failure: timeouts, connection errors, 429 and 5xx responses."""


@dataclass
class PromptConfig:
    relation_words: dict[str, str] = field(
        default_factory=lambda: dict(DEFAULT_RELATION_WORDS)
    )
    instruction: str = DEFAULT_INSTRUCTION
    samples_per_context: int = 5

    def __post_init__(self) -> None:
        words = list(self.relation_words.values())
        if len(set(words)) != len(words) or any(not w for w in words):
            raise PromptError("relation words must be distinct and non-empty")


@dataclass
class DecodingConfig:
    top_p: float = 0.5
    temperature: float = 1.0
    max_tokens: int = 120
    stop: str = "\n\n"
    presence_penalty: float = 0.0
    frequency_penalty: float = 0.0

    def __post_init__(self) -> None:
        if not 0 < self.top_p <= 1:
            raise PromptError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.max_tokens <= 0:
            raise PromptError("max_tokens must be positive")

    def payload(self, prompt: str) -> dict:
        return {
            "prompt": prompt,
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
            "top_p": self.top_p,
            "stop": self.stop,
            "presence_penalty": self.presence_penalty,
            "frequency_penalty": self.frequency_penalty,
        }


@dataclass
class GeneratedCandidate:
    id: str
    raw: str
    premise: str | None
    hypothesis: str | None
    intended_label: str
    seed_id: str
    sample_index: int
    parse_ok: bool
    parse_reason: str | None = None

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "raw": self.raw,
            "premise": self.premise,
            "hypothesis": self.hypothesis,
            "intended_label": self.intended_label,
            "seed_id": self.seed_id,
            "sample_index": self.sample_index,
            "parse_ok": self.parse_ok,
            "parse_reason": self.parse_reason,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "GeneratedCandidate":
        return cls(
            id=rec["id"],
            raw=rec["raw"],
            premise=rec.get("premise"),
            hypothesis=rec.get("hypothesis"),
            intended_label=rec["intended_label"],
            seed_id=rec["seed_id"],
            sample_index=rec["sample_index"],
            parse_ok=rec["parse_ok"],
            parse_reason=rec.get("parse_reason"),
        )


def render_prompt(group: ExemplarGroup, dataset: Dataset, cfg: PromptConfig) -> str:
    """Byte-deterministic prompt text for one exemplar group.

    Items are numbered 1..k+1 in increasing similarity to the seed, the seed
    itself last, each formatted as "N. <premise>" / "<RelationWord>: <hypothesis>"
    and separated by one blank line; the final line is the bare next number.
    """
    if group.label not in cfg.relation_words:
        raise PromptError(f"no relation word configured for label {group.label!r}")
    word = cfg.relation_words[group.label]
    by_id = dataset.by_id()

    ordered = sorted(
        zip(group.similarities, group.neighbor_ids), key=lambda p: (p[0], p[1])
    )
    member_ids = [ex_id for _, ex_id in ordered] + [group.seed_id]

    blocks = [cfg.instruction]
    for i, ex_id in enumerate(member_ids, start=1):
        if ex_id not in by_id:
            raise PromptError(f"group member {ex_id!r} not in dataset")
        ex = by_id[ex_id]
        if not ex.premise.strip() or not ex.hypothesis.strip():
            raise PromptError(f"group member {ex_id!r} has empty text")
        blocks.append(f"{i}. {ex.premise}\n{word}: {ex.hypothesis}")
    blocks.append(f"{len(member_ids) + 1}.")
    return "\n\n".join(blocks)


@dataclass
class ParseResult:
    ok: bool
    premise: str | None = None
    hypothesis: str | None = None
    reason: str | None = None  # no_separator | multiple_separators | empty_side


def parse_completion(raw: str, relation_word: str) -> ParseResult:
    """Split a completion into (premise, hypothesis) around the single
    "<relation_word>:" separator line; leading item numbering is stripped
    from the premise line only."""
    lines = raw.split("\n")
    sep_indices = [
        i for i, line in enumerate(lines) if line.lstrip().startswith(f"{relation_word}:")
    ]
    if not sep_indices:
        return ParseResult(ok=False, reason="no_separator")
    if len(sep_indices) > 1:
        return ParseResult(ok=False, reason="multiple_separators")
    sep = sep_indices[0]

    before = [line.strip() for line in lines[:sep] if line.strip()]
    if not before:
        return ParseResult(ok=False, reason="empty_side")
    before[0] = _NUMBERING_RE.sub("", before[0])
    premise = " ".join(part for part in before if part).strip()

    sep_line = lines[sep].lstrip()
    after = [sep_line[len(relation_word) + 1 :].strip()]
    after.extend(line.strip() for line in lines[sep + 1 :] if line.strip())
    hypothesis = " ".join(part for part in after if part).strip()

    if not premise or not hypothesis:
        return ParseResult(ok=False, reason="empty_side")
    return ParseResult(ok=True, premise=premise, hypothesis=hypothesis)


class TokenBucket:
    """Requests-per-second limiter for the HTTP adapter."""

    def __init__(self, rate: float, capacity: float | None = None):
        self.rate = rate
        self.capacity = capacity if capacity is not None else max(1.0, rate)
        self._tokens = self.capacity
        self._last = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            time.sleep(wait)


class HttpLMEndpoint:
    """Adapter for the completion contract: POST the decoding payload as
    JSON, expect {"text": str} back."""

    def __init__(
        self,
        url: str,
        api_key_header: str | None = None,
        api_key: str | None = None,
        timeout: float = 30.0,
        rps: float = 5.0,
    ):
        self.url = url
        self.headers = {}
        if api_key_header and api_key:
            self.headers[api_key_header] = api_key
        self.timeout = timeout
        self._bucket = TokenBucket(rps)

    def complete(self, payload: dict) -> str:
        self._bucket.acquire()
        try:
            resp = httpx.post(self.url, json=payload, headers=self.headers, timeout=self.timeout)
        except (httpx.TimeoutException, httpx.TransportError) as exc:
            raise TransientLMError(f"request to {self.url} failed: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientLMError(
                f"endpoint returned {resp.status_code}",
                status=resp.status_code,
                body=resp.text,
            )
        if resp.status_code >= 400:
            raise LMEndpointError(
                f"endpoint returned {resp.status_code}",
                status=resp.status_code,
                body=resp.text,
            )
        body = resp.json()
        if "text" not in body:
            raise LMEndpointError("endpoint response missing 'text' field", body=resp.text)
        return body["text"]


def complete(
    prompt: str,
    dec: DecodingConfig,
    endpoint,
    max_attempts: int = 3,
    backoff: float = 0.5,
) -> str:
    """One completion, truncated at the stop sequence, with bounded
    exponential backoff on transient failures."""
    payload = dec.payload(prompt)
    last: TransientLMError | None = None
    for attempt in range(max_attempts):
        try:
            text = endpoint.complete(payload)
        except TransientLMError as exc:
            last = exc
            if attempt + 1 < max_attempts and backoff > 0:
                time.sleep(backoff * (2**attempt))
            continue
        if dec.stop and dec.stop in text:
            text = text[: text.index(dec.stop)]
        return text
    raise TransientLMError(
        f"completion failed after {max_attempts} attempts: {last}",
        status=last.status if last else None,
        body=last.body if last else None,
    )


class MockLM:
    """Deterministic seeded stand-in for the completion endpoint.

    Parses the in-context items out of the prompt and emits recombinations
    of their premises and hypotheses, with a fixed mix of the failure modes
    the filter stage must catch: identical pairs, verbatim copies, leaked
    instruction phrases, too-short sides, and malformed output. Output
    depends only on (seed, prompt text, per-prompt call index), so reruns
    are byte-identical.
    """

    _ITEM_RE = re.compile(r"^\d+\.\s+(?P<premise>.+)$")

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._counts: dict[int, int] = {}
        self._lock = threading.Lock()

    def complete(self, payload: dict) -> str:
        prompt = payload["prompt"]
        key = zlib.crc32(prompt.encode("utf-8"))
        with self._lock:
            index = self._counts.get(key, 0)
            self._counts[key] = index + 1
        rng = random.Random(f"{self.seed}:{key}:{index}")
        items, word = self._parse_prompt(prompt)
        if not items:
            return "Implication: nothing to work with"

        roll = rng.random()
        if roll < 0.12:
            # Malformed output: missing or doubled separator.
            premise, hypothesis = rng.choice(items)
            if rng.random() < 0.5:
                return f"{premise} {hypothesis}"
            return f"{premise}\n{word}: {hypothesis}\n{word}: {hypothesis}"
        if roll < 0.28:
            # Identical premise and hypothesis, modulo casing/punctuation.
            premise, _ = rng.choice(items)
            return f"{premise}\n{word}: {premise.lower().rstrip('.')}"
        if roll < 0.33:
            # Verbatim copy of an in-context item.
            premise, hypothesis = rng.choice(items)
            return f"{premise}\n{word}: {hypothesis}"
        if roll < 0.36:
            # Instruction leakage.
            _, hypothesis = rng.choice(items)
            return f"Here is a pair of sentences.\n{word}: {hypothesis}"
        if roll < 0.39:
            # Degenerately short side.
            premise, _ = rng.choice(items)
            return f"{premise}\n{word}: Yes."
        # Plausible new example: premise from one item, hypothesis from
        # another, with a seeded token tweak so most are genuinely novel.
        p_idx = rng.randrange(len(items))
        h_idx = rng.randrange(len(items))
        premise = items[p_idx][0]
        hypothesis = items[h_idx][1]
        tokens = hypothesis.split()
        if tokens and rng.random() < 0.8:
            spot = rng.randrange(len(tokens))
            tokens[spot] = rng.choice(
                ["perhaps", "certainly", "never", "always", "rarely", "often"]
            )
            hypothesis = " ".join(tokens)
        numbering = "" if rng.random() < 0.7 else f"{len(items) + 1}. "
        return f"{numbering}{premise}\n{word}: {hypothesis}"

    def _parse_prompt(self, prompt: str) -> tuple[list[tuple[str, str]], str]:
        items: list[tuple[str, str]] = []
        word = "Implication"
        lines = prompt.split("\n")
        i = 0
        while i < len(lines):
            match = self._ITEM_RE.match(lines[i])
            if match and i + 1 < len(lines) and ":" in lines[i + 1]:
                word, _, hypothesis = lines[i + 1].partition(":")
                items.append((match.group("premise").strip(), hypothesis.strip()))
                i += 2
            else:
                i += 1
        return items, word.strip()


@dataclass
class GenerationRun:
    candidates: list[GeneratedCandidate]
    endpoint_errors: list[tuple[str, int, str]]  # (seed_id, sample_index, message)

    def parsed(self) -> list[GeneratedCandidate]:
        return [c for c in self.candidates if c.parse_ok]


def overgenerate(
    groups: list[ExemplarGroup],
    dataset: Dataset,
    pcfg: PromptConfig,
    dcfg: DecodingConfig,
    endpoint,
    max_attempts: int = 3,
    backoff: float = 0.5,
) -> GenerationRun:
    """n completions per group, parsed into candidates.

    Unparsable completions are kept with parse_ok=False so the stage report
    can account for them; endpoint failures are recorded per sample and the
    run continues. Candidate ids are "<seed_id>.g<sample_index>".
    """
    candidates: list[GeneratedCandidate] = []
    errors: list[tuple[str, int, str]] = []
    for group in groups:
        prompt = render_prompt(group, dataset, pcfg)
        word = pcfg.relation_words[group.label]
        for sample_index in range(pcfg.samples_per_context):
            try:
                raw = complete(prompt, dcfg, endpoint, max_attempts, backoff)
            except LMEndpointError as exc:
                errors.append((group.seed_id, sample_index, str(exc)))
                continue
            parsed = parse_completion(raw, word)
            candidates.append(
                GeneratedCandidate(
                    id=f"{group.seed_id}.g{sample_index}",
                    raw=raw,
                    premise=parsed.premise,
                    hypothesis=parsed.hypothesis,
                    intended_label=group.label,
                    seed_id=group.seed_id,
                    sample_index=sample_index,
                    parse_ok=parsed.ok,
                    parse_reason=parsed.reason,
                )
            )
    return GenerationRun(candidates=candidates, endpoint_errors=errors)


def write_candidates(candidates: list[GeneratedCandidate], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for cand in candidates:
            fh.write(json.dumps(cand.to_record(), ensure_ascii=False) + "\n")


def read_candidates(path) -> list[GeneratedCandidate]:
    with open(path, encoding="utf-8") as fh:
        return [GeneratedCandidate.from_record(json.loads(line)) for line in fh if line.strip()]
