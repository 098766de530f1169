"""Deterministic synthetic corpora for desk-scale runs and tests.

The templated generator produces 3-label premise-hypothesis pairs whose
label signal is carried by lexical markers a bag-of-words model can learn,
plus a configurable share of genuinely ambiguous pairs (boundary templates
whose label is a seeded coin flip) so training dynamics show a real spread
of confidence and variability.
"""

from __future__ import annotations

import random

from .corpus import Dataset, Example, DEFAULT_LABELS

SUBJECTS = [
    "the teacher", "the engineer", "a tourist", "the boy", "an artist",
    "the farmer", "the lawyer", "a musician", "the nurse", "the pilot",
    "the girl", "a sailor", "the chef", "the student", "a historian",
]

PLACES = [
    "the museum", "the station", "the harbor", "the market", "the library",
    "the square", "the old town", "the stadium", "the gallery", "the cafe",
]

OBJECTS = [
    "a painting", "fresh bread", "an old map", "a wooden chair", "some flowers",
    "a bicycle", "a newspaper", "a silver coin", "a guitar", "a basket of fruit",
]

DAYS = ["morning", "afternoon", "evening", "weekend", "summer"]

GENRES = ["fiction", "travel", "news", "telephone"]


def _clean_pair(rng: random.Random, label: str) -> tuple[str, str]:
    subj = rng.choice(SUBJECTS)
    place = rng.choice(PLACES)
    obj = rng.choice(OBJECTS)
    day = rng.choice(DAYS)
    kind = rng.randrange(3)
    if kind == 0:
        premise = f"{subj.capitalize()} visits {place} every {day}."
        variants = {
            "entailment": f"{subj.capitalize()} certainly goes to {place}.",
            "neutral": f"{subj.capitalize()} probably enjoys {obj} there.",
            "contradiction": f"{subj.capitalize()} never goes to {place}.",
        }
    elif kind == 1:
        premise = f"{subj.capitalize()} bought {obj} at {place}."
        variants = {
            "entailment": f"{subj.capitalize()} definitely owns {obj}.",
            "neutral": f"{subj.capitalize()} might sell {obj} soon.",
            "contradiction": f"{subj.capitalize()} does not own {obj}.",
        }
    else:
        premise = f"{subj.capitalize()} is waiting at {place} this {day}."
        variants = {
            "entailment": f"{subj.capitalize()} is indeed at {place}.",
            "neutral": f"{subj.capitalize()} may be meeting a friend.",
            "contradiction": f"{subj.capitalize()} is not at {place}.",
        }
    return premise, variants[label]


def _ambiguous_pair(rng: random.Random) -> tuple[str, str, str]:
    """Boundary templates: plausible under two labels, one picked at random."""
    subj = rng.choice(SUBJECTS)
    place = rng.choice(PLACES)
    obj = rng.choice(OBJECTS)
    kind = rng.randrange(3)
    if kind == 0:
        premise = f"{subj.capitalize()} visits {place} most weekends."
        hypothesis = f"{subj.capitalize()} often spends time at {place}."
        label = rng.choice(["entailment", "neutral"])
    elif kind == 1:
        premise = f"{subj.capitalize()} rarely looks at {obj}."
        hypothesis = f"{subj.capitalize()} ignores {obj} completely."
        label = rng.choice(["neutral", "contradiction"])
    else:
        premise = f"{subj.capitalize()} left {place} before noon."
        hypothesis = f"{subj.capitalize()} was at {place} in the evening."
        label = rng.choice(["contradiction", "neutral"])
    return premise, hypothesis, label


def make_corpus(
    n: int,
    seed: int,
    name: str = "synth",
    ambiguous_fraction: float = 0.3,
    genres: list[str] | None = None,
) -> Dataset:
    """Templated 3-label corpus with roughly equal label counts."""
    rng = random.Random(seed)
    genres = genres if genres is not None else GENRES
    examples = []
    for i in range(n):
        genre = rng.choice(genres)
        if rng.random() < ambiguous_fraction:
            premise, hypothesis, label = _ambiguous_pair(rng)
        else:
            label = DEFAULT_LABELS[i % len(DEFAULT_LABELS)]
            premise, hypothesis = _clean_pair(rng, label)
        if genre == "telephone":
            premise = f"yeah so {premise[0].lower()}{premise[1:]}"
        examples.append(
            Example(
                id=f"{name}-{i:05d}",
                premise=premise,
                hypothesis=hypothesis,
                label=label,
                genre=genre,
                source="original",
            )
        )
    return Dataset(name=name, examples=examples)


def flip_labels(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, set[str]]:
    """Plant label noise: a seeded random fraction of examples get one of the
    other labels. Returns the noisy dataset and the flipped ids."""
    rng = random.Random(seed)
    n_flip = int(fraction * len(ds))
    flip_ids = set(rng.sample(ds.ids(), n_flip))
    examples = []
    for ex in ds.examples:
        if ex.id in flip_ids:
            others = [lbl for lbl in DEFAULT_LABELS if lbl != ex.label]
            examples.append(
                Example(
                    id=ex.id,
                    premise=ex.premise,
                    hypothesis=ex.hypothesis,
                    label=rng.choice(others),
                    genre=ex.genre,
                    source=ex.source,
                )
            )
        else:
            examples.append(ex)
    return Dataset(name=f"{ds.name}.noisy", examples=examples), flip_ids


CUE_WORDS = {"entailment": "surely", "neutral": "possibly", "contradiction": "however"}


def make_planted_hypothesis_corpus(n: int, seed: int, name: str = "planted") -> Dataset:
    """One hypothesis cue word fully determines the label; premises are
    uninformative filler. Hypothesis-only models should be near-perfect."""
    rng = random.Random(seed)
    examples = []
    for i in range(n):
        label = DEFAULT_LABELS[i % len(DEFAULT_LABELS)]
        subj = rng.choice(SUBJECTS)
        place = rng.choice(PLACES)
        obj = rng.choice(OBJECTS)
        premise = f"{subj.capitalize()} walked past {place} holding {obj}."
        hypothesis = f"{rng.choice(SUBJECTS).capitalize()} {CUE_WORDS[label]} carried {rng.choice(OBJECTS)}."
        examples.append(
            Example(id=f"{name}-{i:05d}", premise=premise, hypothesis=hypothesis, label=label)
        )
    return Dataset(name=name, examples=examples)


def make_random_corpus(n: int, seed: int, name: str = "random", vocab_size: int = 120) -> Dataset:
    """Label-independent filler text with exactly balanced labels: the null
    case for correlation audits and chance-accuracy checks."""
    rng = random.Random(seed)
    vocab = [f"word{j:03d}" for j in range(vocab_size)]
    per_class = n // len(DEFAULT_LABELS)
    labels = [lbl for lbl in DEFAULT_LABELS for _ in range(per_class)]
    labels += [DEFAULT_LABELS[0]] * (n - len(labels))
    rng.shuffle(labels)
    examples = []
    for i in range(n):
        premise = " ".join(rng.choice(vocab) for _ in range(8)).capitalize() + "."
        hypothesis = " ".join(rng.choice(vocab) for _ in range(6)).capitalize() + "."
        examples.append(
            Example(id=f"{name}-{i:05d}", premise=premise, hypothesis=hypothesis, label=labels[i])
        )
    return Dataset(name=name, examples=examples)


def make_planted_word_corpus(
    n_with_word: int,
    n_per_class: int,
    seed: int,
    word: str = "zephyr",
    word_label: str = "entailment",
    name: str = "lexplant",
) -> Dataset:
    """Balanced corpus where `word` occurs in exactly n_with_word examples,
    all labeled word_label; everything else is label-independent filler."""
    rng = random.Random(seed)
    vocab = [f"filler{j:03d}" for j in range(150)]
    examples = []
    counter = 0
    for label in DEFAULT_LABELS:
        for i in range(n_per_class):
            tokens = [rng.choice(vocab) for _ in range(8)]
            if label == word_label and i < n_with_word:
                tokens[rng.randrange(len(tokens))] = word
            premise = " ".join(tokens).capitalize() + "."
            hypothesis = " ".join(rng.choice(vocab) for _ in range(6)).capitalize() + "."
            examples.append(
                Example(
                    id=f"{name}-{counter:05d}",
                    premise=premise,
                    hypothesis=hypothesis,
                    label=label,
                )
            )
            counter += 1
    return Dataset(name=name, examples=examples)


def make_separable_corpus(n: int, seed: int, name: str = "separable") -> Dataset:
    """Linearly separable two-token data: each label has its own exclusive
    vocabulary, so a linear model must reach near-perfect accuracy."""
    rng = random.Random(seed)
    class_words = {
        "entailment": ["apple", "pear"],
        "neutral": ["stone", "brick"],
        "contradiction": ["river", "lake"],
    }
    examples = []
    for i in range(n):
        label = DEFAULT_LABELS[i % len(DEFAULT_LABELS)]
        words = class_words[label]
        examples.append(
            Example(
                id=f"{name}-{i:05d}",
                premise=f"{rng.choice(words)} {rng.choice(words)}",
                hypothesis=f"{rng.choice(words)}",
                label=label,
            )
        )
    return Dataset(name=name, examples=examples)
