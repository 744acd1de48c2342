"""Post-hoc analyses of optimized prompts and generation traces.

* anchoring: which vocabulary token each optimized row is still closest to,
  scored by a softmax over inner products with the embedding table;
* trajectory entropy: mean per-step Shannon entropy (bits) of a greedy trace,
  plus detection of tail repetition loops;
* LAT probing: a per-layer mean-difference direction from two stimulus sets
  and the projection of prompt+query activations onto it.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .engine import PromptEmbedding
from .errors import UsageError
from .inference import GenerationTrace
from .model import ModelCheckpoint, add_positions, embed, forward, token_embeddings, tokenize
from .numerics import Tensor2

DEFAULT_MAX_PERIOD = 8
DEFAULT_MIN_REPEATS = 3


# ----------------------------------------------------------------------------
# semantic anchoring
# ----------------------------------------------------------------------------


@dataclass
class AnchorPosition:
    position: int
    original: int
    nearest: int
    p_nearest: float
    p_original: float
    top5: list[tuple[int, float]]

    @property
    def anchored(self) -> bool:
        return self.nearest == self.original


@dataclass
class AnchorReport:
    positions: list[AnchorPosition]
    distributions: np.ndarray  # (k, V)

    @property
    def all_anchored(self) -> bool:
        return all(p.anchored for p in self.positions)

    def to_dict(self, vocab=None) -> dict:
        def name(t):
            return vocab.tokens[t] if vocab is not None else t

        return {
            "all_anchored": self.all_anchored,
            "positions": [
                {
                    "position": p.position,
                    "original": name(p.original),
                    "nearest": name(p.nearest),
                    "p_nearest": p.p_nearest,
                    "p_original": p.p_original,
                    "anchored": p.anchored,
                    "top5": [[name(t), q] for t, q in p.top5],
                }
                for p in self.positions
            ],
        }

    def to_text(self, vocab=None) -> str:
        def name(t):
            return repr(vocab.tokens[t]) if vocab is not None else str(t)

        lines = [f"{'pos':>4} {'orig':>6} {'near':>6} {'p_near':>8} {'p_orig':>8}  ok"]
        for p in self.positions:
            lines.append(
                f"{p.position:>4} {name(p.original):>6} {name(p.nearest):>6} "
                f"{p.p_nearest:>8.4f} {p.p_original:>8.4f}  {'y' if p.anchored else 'n'}"
            )
        return "\n".join(lines)


def anchor_distributions(matrix: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Row ``i``: softmax over ``j`` of ``matrix[i] . table[j]``."""
    return nx.softmax_rows(Tensor2(np.asarray(matrix) @ np.asarray(table).T)).data


def anchor_report(p: PromptEmbedding, ckpt: ModelCheckpoint) -> AnchorReport:
    p.check_compatible(ckpt)
    dist = anchor_distributions(p.matrix, ckpt.weights["tok_emb"])
    positions = []
    for i, (orig, row) in enumerate(zip(p.tokens, dist)):
        order = np.argsort(-row, kind="stable")
        nearest = int(order[0])
        positions.append(
            AnchorPosition(
                position=i,
                original=orig,
                nearest=nearest,
                p_nearest=float(row[nearest]),
                p_original=float(row[orig]),
                top5=[(int(t), float(row[t])) for t in order[:5]],
            )
        )
    return AnchorReport(positions, dist)


# ----------------------------------------------------------------------------
# trajectory entropy and repetition loops
# ----------------------------------------------------------------------------


@dataclass
class Repetition:
    period: int
    ngram: tuple[int, ...]
    repeats: int


@dataclass
class EntropyReport:
    step_entropies: list[float]
    trajectory_entropy: float
    repetition: Repetition | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.repetition is not None:
            d["repetition"]["ngram"] = list(self.repetition.ngram)
        return d

    def to_text(self) -> str:
        rep = "none"
        if self.repetition is not None:
            r = self.repetition
            rep = f"period {r.period} x{r.repeats} ngram={list(r.ngram)}"
        return "\n".join(
            [
                f"steps               {len(self.step_entropies)}",
                f"trajectory_entropy  {self.trajectory_entropy:.6f} bits",
                f"repetition          {rep}",
            ]
        )


def step_entropies(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy in bits of each row, with ``0 log 0 = 0``."""
    p = np.asarray(probs, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    h = -(p * np.log2(safe)).sum(axis=1)
    return np.maximum(h, 0.0)


def detect_repetition(
    tokens: Sequence[int],
    max_period: int = DEFAULT_MAX_PERIOD,
    min_repeats: int = DEFAULT_MIN_REPEATS,
) -> Repetition | None:
    """Smallest period whose final n-gram repeats back-to-back at the tail.

    A period ``q`` qualifies when the last ``q * min_repeats`` tokens are
    ``min_repeats`` copies of the last ``q`` tokens.  The reported
    ``repeats`` counts every consecutive copy at the tail.
    """
    if isinstance(tokens, GenerationTrace):
        tokens = tokens.tokens
    if min_repeats < 2:
        raise UsageError("min_repeats must be >= 2")
    seq = list(tokens)
    T = len(seq)
    for q in range(1, min(max_period, T // 2) + 1):
        if q * min_repeats > T:
            break
        gram = seq[T - q:]
        reps = 1
        while (reps + 1) * q <= T and seq[T - (reps + 1) * q:T - reps * q] == gram:
            reps += 1
        if reps >= min_repeats:
            return Repetition(q, tuple(gram), reps)
    return None


def trajectory_entropy(
    trace: GenerationTrace,
    max_period: int = DEFAULT_MAX_PERIOD,
    min_repeats: int = DEFAULT_MIN_REPEATS,
) -> EntropyReport:
    if len(trace.tokens) == 0:
        raise UsageError("trajectory entropy needs at least one step")
    if not trace.full:
        raise UsageError("trace holds top-1 probabilities only; regenerate with full distributions")
    h = step_entropies(trace.probs)
    trace.entropies = h.tolist()
    return EntropyReport(h.tolist(), float(h.mean()), detect_repetition(trace.tokens, max_period, min_repeats))


# ----------------------------------------------------------------------------
# LAT probing
# ----------------------------------------------------------------------------


def last_hidden(x: Tensor2, ckpt: ModelCheckpoint) -> np.ndarray:
    """``(L+1, d)`` final-position hidden state at every layer."""
    _, hidden = forward(x, ckpt)
    return np.stack([h.data[-1] for h in hidden])


def lat_direction(stimuli_a: Sequence[str], stimuli_b: Sequence[str], ckpt: ModelCheckpoint) -> np.ndarray:
    """Unit mean-difference direction ``A - B`` per layer, shape ``(L+1, d)``."""
    if not stimuli_a or not stimuli_b:
        raise UsageError("both stimulus sets must be nonempty")

    def mean_state(texts):
        acc = None
        for t in texts:
            ids = tokenize(t, ckpt.vocab)
            if not ids:
                raise UsageError("empty stimulus string")
            h = last_hidden(embed(ids, ckpt), ckpt)
            acc = h if acc is None else acc + h
        return acc / len(texts)

    diff = mean_state(stimuli_a) - mean_state(stimuli_b)
    norms = np.linalg.norm(diff, axis=1, keepdims=True)
    out = np.zeros_like(diff)
    ok = norms[:, 0] >= 1e-12
    out[ok] = diff[ok] / norms[ok]
    return out


@dataclass
class LatReport:
    proj_a: list[float]
    proj_b: list[float]
    delta: list[float]
    directions: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"layer": i, "proj_a": a, "proj_b": b, "delta": d}
                for i, (a, b, d) in enumerate(zip(self.proj_a, self.proj_b, self.delta))
            ],
            "first_layer_delta_sign": int(np.sign(self.delta[1])) if len(self.delta) > 1 else 0,
        }

    def to_text(self) -> str:
        lines = [f"{'layer':>5} {'proj_A':>12} {'proj_B':>12} {'delta':>12}"]
        for i, (a, b, d) in enumerate(zip(self.proj_a, self.proj_b, self.delta)):
            lines.append(f"{i:>5} {a:>12.6f} {b:>12.6f} {d:>12.6f}")
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "proj_A", "proj_B", "delta"])
            for i, (a, b, d) in enumerate(zip(self.proj_a, self.proj_b, self.delta)):
                w.writerow([i, repr(a), repr(b), repr(d)])


def _prompt_query_states(p: PromptEmbedding, query: str, ckpt: ModelCheckpoint) -> np.ndarray:
    ids = tokenize(query, ckpt.vocab)
    parts = [Tensor2(p.matrix)]
    if ids:
        parts.append(token_embeddings(ids, ckpt))
    return last_hidden(add_positions(nx.concat_rows(parts), ckpt), ckpt)


def lat_delta(
    p_original: PromptEmbedding,
    p_optimized: PromptEmbedding,
    directions: np.ndarray,
    query: str,
    ckpt: ModelCheckpoint,
) -> LatReport:
    """Per-layer projections for the original (A) and optimized (B) prompt."""
    p_original.check_compatible(ckpt)
    p_optimized.check_compatible(ckpt)
    directions = np.asarray(directions, dtype=np.float64)
    if directions.shape != (ckpt.config.n_layers + 1, ckpt.config.d):
        raise UsageError(f"directions shape {directions.shape} does not match the checkpoint")
    ha = _prompt_query_states(p_original, query, ckpt)
    hb = _prompt_query_states(p_optimized, query, ckpt)
    pa = (ha * directions).sum(axis=1)
    pb = (hb * directions).sum(axis=1)
    return LatReport(pa.tolist(), pb.tolist(), (pb - pa).tolist(), directions)


def write_json(obj: dict, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
