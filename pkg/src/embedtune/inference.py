"""Greedy generation from a prompt embedding plus a text query."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .engine import PromptEmbedding, TrainingExample
from .errors import CapacityError, FormatError, UsageError
from .model import ModelCheckpoint, add_positions, detokenize, forward, token_embeddings, tokenize
from .numerics import Tensor2

DEFAULT_MAX_TOKENS = 64


@dataclass
class GenerationTrace:
    tokens: list[int]
    probs: np.ndarray  # (T, V), or (T, 1) holding top-1 probabilities when not recorded in full
    stop_reason: str
    entropies: list[float] | None = None
    text: str = ""

    @property
    def full(self) -> bool:
        return self.probs.ndim == 2 and self.probs.shape[1] > 1

    def __len__(self) -> int:
        return len(self.tokens)

    def to_dict(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "text": self.text,
            "stop_reason": self.stop_reason,
            "probs": self.probs.tolist(),
            "entropies": self.entropies,
        }

    @classmethod
    def from_dict(cls, d: dict) -> GenerationTrace:
        probs = np.asarray(d["probs"], dtype=np.float64)
        if probs.size == 0:
            probs = probs.reshape(0, 0)
        return cls(
            tokens=[int(t) for t in d["tokens"]],
            probs=probs,
            stop_reason=d["stop_reason"],
            entropies=d.get("entropies"),
            text=d.get("text", ""),
        )


def save_trace(trace: GenerationTrace, path) -> None:
    Path(path).write_text(json.dumps(trace.to_dict()) + "\n", encoding="utf-8")


def load_trace(path) -> GenerationTrace:
    try:
        return GenerationTrace.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: not a generation trace ({exc})") from exc


def argmax_lowest(row: np.ndarray) -> int:
    """Index of the maximum; ties go to the lowest index."""
    return int(np.argmax(row))  # numpy returns the first occurrence


def greedy_decode(
    prefix: Tensor2,
    ckpt: ModelCheckpoint,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    eos_token: int | None = None,
    record_full: bool = True,
) -> GenerationTrace:
    """Greedy loop from already-embedded (position-free) prefix rows."""
    if max_tokens < 0:
        raise UsageError(f"max_tokens must be >= 0, got {max_tokens}")
    max_seq = ckpt.config.max_seq
    if prefix.rows == 0:
        raise UsageError("generation needs at least one prefix row")
    if prefix.rows > max_seq:
        raise CapacityError(f"prefix of {prefix.rows} rows exceeds max_seq={max_seq}")
    eos = ckpt.vocab.eos_id if eos_token is None else int(eos_token)
    table = ckpt.weights["tok_emb"]
    rows = prefix.data
    tokens: list[int] = []
    dists: list[np.ndarray] = []
    stop = "max-tokens"
    while len(tokens) < max_tokens:
        if rows.shape[0] > max_seq:
            break
        logits, _ = forward(add_positions(Tensor2(rows), ckpt), ckpt)
        probs = nx.softmax_rows(nx.slice_rows(logits, logits.rows - 1, logits.rows)).data[0]
        tok = argmax_lowest(probs)
        tokens.append(tok)
        dists.append(probs if record_full else probs[tok:tok + 1])
        if tok == eos:
            stop = "eos"
            break
        rows = np.concatenate([rows, table[tok:tok + 1]], axis=0)
    width = ckpt.config.vocab_size if record_full else 1
    probs_arr = np.array(dists, dtype=np.float64).reshape(len(dists), width)
    text = detokenize([t for t in tokens if t != eos], ckpt.vocab)
    return GenerationTrace(tokens, probs_arr, stop, text=text)


def generate(
    p: PromptEmbedding,
    user_input: str,
    ckpt: ModelCheckpoint,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    eos_token: int | None = None,
    record_full: bool = True,
) -> GenerationTrace:
    """Greedy generation from ``[prompt matrix; E[user_input]]``."""
    p.check_compatible(ckpt)
    ids = tokenize(user_input, ckpt.vocab)
    return generate_ids(p, ids, ckpt, max_tokens, eos_token, record_full)


def generate_ids(
    p: PromptEmbedding,
    ids: Sequence[int],
    ckpt: ModelCheckpoint,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    eos_token: int | None = None,
    record_full: bool = True,
) -> GenerationTrace:
    parts = [Tensor2(p.matrix)]
    if len(ids):
        parts.append(token_embeddings(ids, ckpt))
    return greedy_decode(nx.concat_rows(parts), ckpt, max_tokens, eos_token, record_full)


def generate_text(
    prompt_text: str,
    user_input: str,
    ckpt: ModelCheckpoint,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    eos_token: int | None = None,
    record_full: bool = True,
) -> GenerationTrace:
    """Baseline path: the raw text prompt goes through the embedding table."""
    ids = tokenize(prompt_text + user_input, ckpt.vocab)
    return greedy_decode(token_embeddings(ids, ckpt), ckpt, max_tokens, eos_token, record_full)


# ----------------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------------

Matcher = Callable[[str, str], bool]


def exact_match(generated: str, target: str) -> bool:
    return generated.strip() == target.strip()


def delimiter_match(marker: str) -> Matcher:
    """Compare only the text after the last ``marker`` in each string."""

    def match(generated: str, target: str) -> bool:
        if marker not in generated:
            return False
        got = generated.rsplit(marker, 1)[1].strip()
        want = target.rsplit(marker, 1)[1].strip() if marker in target else target.strip()
        return got == want

    return match


@dataclass
class EvalReport:
    generations: list[str] = field(default_factory=list)
    targets: list[str] = field(default_factory=list)
    correct: list[bool] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return sum(self.correct) / len(self.correct) if self.correct else 0.0

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "n": len(self.correct),
            "examples": [
                {"generated": g, "target": t, "correct": c}
                for g, t, c in zip(self.generations, self.targets, self.correct)
            ],
        }


def evaluate(
    p: PromptEmbedding,
    test_set: Sequence[TrainingExample],
    ckpt: ModelCheckpoint,
    matcher: Matcher = exact_match,
    max_tokens: int | None = None,
) -> EvalReport:
    """Greedy-decode every test input and score it with ``matcher``.

    ``max_tokens`` defaults to the longest target plus a small margin.
    """
    if not test_set:
        raise UsageError("test set is empty")
    p.check_compatible(ckpt)
    eos = ckpt.vocab.eos_id
    if max_tokens is None:
        max_tokens = max(len(ex.target) for ex in test_set) + 4
    report = EvalReport()
    for ex in test_set:
        target = detokenize([t for t in ex.target if t != eos], ckpt.vocab)
        try:
            text = generate_ids(p, ex.input, ckpt, max_tokens, record_full=False).text
        except CapacityError:
            text = ""
        report.generations.append(text)
        report.targets.append(target)
        report.correct.append(bool(matcher(text, target)))
    return report
