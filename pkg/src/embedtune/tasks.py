"""Seeded synthetic tasks used for desk-scale experiments.

Each task ships a pretraining corpus generator and a labeled-example
generator.  The corpus teaches the base model the task under a short trigger
prefix, while the longer instruction-style prompt is only ever followed by an
echo of the input.  The frozen model therefore has the skill but the plain
prompt does not elicit it; optimizing the prompt's embedding has to.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

POS_WORDS = ("good", "great", "fun", "nice", "lovely", "superb")
NEG_WORDS = ("bad", "dull", "awful", "poor", "boring", "weak")
NEUTRAL_WORDS = ("the", "film", "plot", "cast", "was", "and", "very", "story", "music", "quite", "it", "so")

SENTIMENT_PROMPT = "Is the review positive or negative? Think step by step. "
SENTIMENT_TRIGGER = "mood: "

ARITH_PROMPT = "Reason step by step, and put your final answer after #. "
ARITH_TRIGGER = "calc: "


@dataclass(frozen=True)
class Example:
    input: str
    target: str


@dataclass
class SyntheticTask:
    name: str
    prompt: str
    trigger: str
    sample: Callable[[np.random.Generator], tuple[str, str]]
    marker: str | None = None
    notes: dict = field(default_factory=dict)

    def examples(self, n: int, seed: int) -> list[Example]:
        rng = np.random.default_rng(seed)
        out = []
        for _ in range(n):
            x, y = self.sample(rng)
            out.append(Example(input=f"{x} =", target=f" {y}"))
        return out

    def corpus(self, n: int, seed: int) -> list[str]:
        rng = np.random.default_rng(seed)
        lines = []
        for _ in range(n):
            x, y = self.sample(rng)
            filler = "".join(self.sample(rng)[0] + ". " for _ in range(int(rng.integers(0, 3))))
            kind = rng.random()
            if kind < 0.5:
                lines.append(f"{filler}{self.trigger}{x} = {y}")
            elif kind < 0.8:
                lines.append(f"{filler}{self.prompt}{x} = {x}")
            else:
                lines.append(f"{filler}{x}. {self.sample(rng)[0]}.")
        return lines

    def lat_stimuli(self, n: int, seed: int) -> tuple[list[str], list[str]]:
        """Task-labeled strings (A) versus echo-formatted strings (B)."""
        rng = np.random.default_rng(seed)
        a, b = [], []
        for _ in range(n):
            x, y = self.sample(rng)
            a.append(f"{self.trigger}{x} = {y}")
            b.append(f"{x} = {x}")
        return a, b


def _review(rng: np.random.Generator) -> tuple[str, str]:
    positive = bool(rng.random() < 0.5)
    pool = POS_WORDS if positive else NEG_WORDS
    n_words = int(rng.integers(3, 7))
    n_sent = int(rng.integers(1, 3))
    words = [NEUTRAL_WORDS[int(i)] for i in rng.integers(0, len(NEUTRAL_WORDS), n_words - n_sent)]
    for _ in range(n_sent):
        pos = int(rng.integers(0, len(words) + 1))
        words.insert(pos, pool[int(rng.integers(0, len(pool)))])
    return " ".join(words), "POS" if positive else "NEG"


def _sum(rng: np.random.Generator) -> tuple[str, str]:
    a, b = (int(v) for v in rng.integers(0, 10, 2))
    return f"{a}+{b}", f"# {a + b}"


def sentiment_toy() -> SyntheticTask:
    return SyntheticTask("sentiment-toy", SENTIMENT_PROMPT, SENTIMENT_TRIGGER, _review)


def arith_toy() -> SyntheticTask:
    return SyntheticTask("arith-toy", ARITH_PROMPT, ARITH_TRIGGER, _sum, marker="#")


TASKS = {"sentiment-toy": sentiment_toy, "arith-toy": arith_toy}


def get_task(name: str) -> SyntheticTask:
    try:
        return TASKS[name]()
    except KeyError:
        raise KeyError(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None
