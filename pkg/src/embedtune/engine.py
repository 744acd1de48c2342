"""Prompt-embedding optimization against a frozen checkpoint.

The prompt's token embeddings are copied out of the frozen table, prepended
to each example's input, and moved by Adam on the summed target-token
cross-entropy.  Nothing else in the checkpoint is touched.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .errors import (
    CapacityError,
    CompatibilityError,
    DivergenceError,
    FormatError,
    IntegrityError,
    ParameterError,
    TokenizationError,
    UsageError,
    VersionError,
)
from .model import ModelCheckpoint, add_positions, forward, token_embeddings, tokenize
from .numerics import Tensor2


@dataclass
class PromptEmbedding:
    tokens: tuple[int, ...]
    matrix: np.ndarray
    origin_hash: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tokens = tuple(int(t) for t in self.tokens)
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.tokens):
            raise UsageError(
                f"prompt matrix shape {self.matrix.shape} does not match {len(self.tokens)} tokens"
            )

    @property
    def k(self) -> int:
        return len(self.tokens)

    def check_compatible(self, ckpt: ModelCheckpoint) -> None:
        if self.origin_hash != ckpt.content_hash:
            raise CompatibilityError(
                f"prompt built for checkpoint {self.origin_hash[:12]}, got {ckpt.content_hash[:12]}"
            )
        if self.matrix.shape[1] != ckpt.config.d:
            raise CompatibilityError(f"prompt width {self.matrix.shape[1]} != d={ckpt.config.d}")


@dataclass(frozen=True)
class TrainingExample:
    input: tuple[int, ...]
    target: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "input", tuple(int(t) for t in self.input))
        object.__setattr__(self, "target", tuple(int(t) for t in self.target))
        if not self.target:
            raise UsageError("training example needs a nonempty target")


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    max_epochs: int = 10
    early_stop_patience: int = 2
    seed: int = 0
    val_fraction: float = 0.2
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    # prompt rows drifting further than this multiple of the largest
    # embedding-table entry count as divergence
    divergence_ratio: float = 100.0

    def validate(self) -> None:
        if not self.learning_rate >= 0 or not np.isfinite(self.learning_rate):
            raise ParameterError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.max_epochs < 1:
            raise ParameterError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.early_stop_patience < 0:
            raise ParameterError(f"early_stop_patience must be >= 0, got {self.early_stop_patience}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ParameterError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if not self.divergence_ratio > 0:
            raise ParameterError(f"divergence_ratio must be > 0, got {self.divergence_ratio}")


@dataclass
class TrainReport:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    stop_reason: str = "max-epochs"
    best_epoch: int = 0
    steps: int = 0
    wall_time: float = 0.0

    @property
    def epochs_run(self) -> int:
        return len(self.train_losses)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epochs_run"] = self.epochs_run
        return d


def init_prompt(prompt_text: str, ckpt: ModelCheckpoint) -> PromptEmbedding:
    """Copy the frozen token-embedding rows for ``prompt_text``."""
    if not prompt_text:
        raise UsageError("prompt text is empty")
    ids = tokenize(prompt_text, ckpt.vocab)
    rows = np.array(ckpt.weights["tok_emb"][ids], dtype=np.float64)
    return PromptEmbedding(tuple(ids), rows, ckpt.content_hash, {"prompt": prompt_text})


def _check_capacity(k: int, ex: TrainingExample, max_seq: int) -> None:
    total = k + len(ex.input) + len(ex.target)
    if total > max_seq:
        raise CapacityError(f"prompt+input+target is {total} tokens, max_seq={max_seq}")


def assemble_training_input(
    p: PromptEmbedding,
    ex: TrainingExample,
    ckpt: ModelCheckpoint,
    matrix: Tensor2 | None = None,
    teacher_forcing: bool = True,
) -> Tensor2:
    """``[prompt; E[input]; E[target[:-1]]] + positions``.

    With ``teacher_forcing=False`` only the prompt and input rows are
    returned.  ``matrix`` substitutes a tape-watched prompt matrix.
    """
    _check_capacity(p.k, ex, ckpt.config.max_seq)
    prompt_rows = Tensor2(p.matrix) if matrix is None else matrix
    tail = list(ex.input) + (list(ex.target[:-1]) if teacher_forcing else [])
    parts = [prompt_rows]
    if tail:
        parts.append(token_embeddings(tail, ckpt))
    return add_positions(nx.concat_rows(parts), ckpt)


def example_loss(
    p: PromptEmbedding, ex: TrainingExample, ckpt: ModelCheckpoint, matrix: Tensor2 | None = None
) -> Tensor2:
    """Summed cross-entropy over the target positions only."""
    x = assemble_training_input(p, ex, ckpt, matrix)
    logits, _ = forward(x, ckpt)
    start = p.k + len(ex.input) - 1
    return nx.cross_entropy(nx.slice_rows(logits, start, start + len(ex.target)), ex.target)


def loss_and_grad(
    p: PromptEmbedding, ex: TrainingExample, ckpt: ModelCheckpoint, matrix: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    tape = nx.GradTape()
    leaf = tape.watch(p.matrix if matrix is None else matrix)
    loss = example_loss(p, ex, ckpt, leaf)
    (grad,) = tape.backward(loss)
    return loss.item(), grad


def mean_loss(p: PromptEmbedding, data: Sequence[TrainingExample], ckpt: ModelCheckpoint) -> float:
    if not data:
        raise UsageError("no examples to evaluate")
    return float(sum(example_loss(p, ex, ckpt).item() for ex in data) / len(data))


def split_validation(
    data: Sequence[TrainingExample], fraction: float, rng: np.random.Generator
) -> tuple[list[TrainingExample], list[TrainingExample]]:
    """Seeded ``(train, val)`` split; no split for fewer than two examples."""
    data = list(data)
    if fraction <= 0 or len(data) < 2:
        return data, []
    n_val = min(len(data) - 1, max(1, int(round(fraction * len(data)))))
    perm = rng.permutation(len(data))
    val = [data[i] for i in sorted(perm[:n_val])]
    train = [data[i] for i in sorted(perm[n_val:])]
    return train, val


def optimize(
    p: PromptEmbedding,
    data: Sequence[TrainingExample],
    ckpt: ModelCheckpoint,
    cfg: TrainConfig | None = None,
    val: Sequence[TrainingExample] | None = None,
    log: Callable[[int, float, float | None], None] | None = None,
) -> tuple[PromptEmbedding, TrainReport]:
    """Adam on the prompt matrix, batch size 1, with early stopping.

    Early stopping watches the validation loss (the explicit ``val`` set, or a
    seeded ``val_fraction`` split of ``data``), falling back to the training
    loss when there is no validation data.  The returned matrix is the one
    from the best monitored epoch.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    if not data:
        raise UsageError("training data is empty")
    p.check_compatible(ckpt)
    for ex in list(data) + list(val or []):
        _check_capacity(p.k, ex, ckpt.config.max_seq)

    started = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    if val is None:
        train, val = split_validation(data, cfg.val_fraction, rng)
    else:
        train, val = list(data), list(val)

    work = PromptEmbedding(p.tokens, p.matrix.copy(), p.origin_hash, dict(p.metadata))
    opt = nx.Adam([work.matrix], lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.adam_eps)
    report = TrainReport()
    best_score = np.inf
    best_matrix = work.matrix.copy()
    stale = 0
    start_matrix = p.matrix.copy()
    drift_limit = cfg.divergence_ratio * float(np.abs(ckpt.weights["tok_emb"]).max())

    for epoch in range(1, cfg.max_epochs + 1):
        for i in rng.permutation(len(train)):
            loss, grad = loss_and_grad(work, train[int(i)], ckpt)
            if not (np.isfinite(loss) and np.isfinite(grad).all()):
                raise DivergenceError(epoch, f"non-finite loss/gradient at step {report.steps + 1}")
            opt.step([grad])
            report.steps += 1
            drift = float(np.abs(work.matrix - start_matrix).max())
            if not drift <= drift_limit:
                raise DivergenceError(
                    epoch, f"prompt drifted {drift:.3g} from its start (limit {drift_limit:.3g})"
                )
        train_loss = mean_loss(work, train, ckpt)
        val_loss = mean_loss(work, val, ckpt) if val else None
        for value in (train_loss, val_loss):
            if value is not None and not np.isfinite(value):
                raise DivergenceError(epoch, "non-finite epoch loss")
        report.train_losses.append(train_loss)
        if val_loss is not None:
            report.val_losses.append(val_loss)
        if log is not None:
            log(epoch, train_loss, val_loss)

        score = val_loss if val_loss is not None else train_loss
        if score < best_score:
            best_score = score
            best_matrix = work.matrix.copy()
            report.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                report.stop_reason = "early-stop"
                break

    report.wall_time = time.perf_counter() - started
    meta = dict(p.metadata)
    meta.update(
        learning_rate=cfg.learning_rate,
        seed=cfg.seed,
        epochs_run=report.epochs_run,
        best_epoch=report.best_epoch,
        stop_reason=report.stop_reason,
        final_train_loss=report.train_losses[-1],
        final_val_loss=report.val_losses[-1] if report.val_losses else None,
    )
    return PromptEmbedding(p.tokens, best_matrix, p.origin_hash, meta), report


# ----------------------------------------------------------------------------
# artifact file
# ----------------------------------------------------------------------------

ARTIFACT_MAGIC = b"EMBTPRMT"
ARTIFACT_VERSION = 1


def artifact_bytes(p: PromptEmbedding) -> bytes:
    k, d = p.matrix.shape
    meta = json.dumps(p.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(
        [
            ARTIFACT_MAGIC,
            struct.pack("<I", ARTIFACT_VERSION),
            bytes.fromhex(p.origin_hash),
            struct.pack("<II", k, d),
            np.asarray(p.tokens, dtype="<u4").tobytes(),
            np.ascontiguousarray(p.matrix, dtype="<f8").tobytes(),
            struct.pack("<I", len(meta)),
            meta,
        ]
    )
    return body + hashlib.sha256(body).digest()


def save_artifact(p: PromptEmbedding, path) -> None:
    Path(path).write_bytes(artifact_bytes(p))


def load_artifact(path, ckpt: ModelCheckpoint | None = None) -> PromptEmbedding:
    raw = Path(path).read_bytes()
    head = len(ARTIFACT_MAGIC) + 4 + 32 + 8
    if len(raw) < head + 4 + 32:
        raise FormatError(f"{path}: file too short for a prompt artifact")
    if raw[: len(ARTIFACT_MAGIC)] != ARTIFACT_MAGIC:
        raise FormatError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", raw, len(ARTIFACT_MAGIC))
    if version != ARTIFACT_VERSION:
        raise VersionError(f"{path}: artifact version {version}, expected {ARTIFACT_VERSION}")
    body, stored = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != stored:
        raise IntegrityError(f"{path}: content hash mismatch")
    pos = len(ARTIFACT_MAGIC) + 4
    origin = body[pos:pos + 32].hex()
    k, d = struct.unpack_from("<II", body, pos + 32)
    pos = head
    need = pos + 4 * k + 8 * k * d + 4
    if len(body) < need:
        raise FormatError(f"{path}: truncated payload")
    tokens = np.frombuffer(body, dtype="<u4", count=k, offset=pos).tolist()
    pos += 4 * k
    matrix = np.frombuffer(body, dtype="<f8", count=k * d, offset=pos).reshape(k, d).astype(np.float64)
    pos += 8 * k * d
    (mlen,) = struct.unpack_from("<I", body, pos)
    if len(body) != pos + 4 + mlen:
        raise FormatError(f"{path}: metadata length mismatch")
    try:
        meta = json.loads(body[pos + 4:].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"{path}: malformed metadata ({exc})") from exc
    p = PromptEmbedding(tuple(tokens), matrix, origin, meta)
    if ckpt is not None:
        p.check_compatible(ckpt)
    return p


# ----------------------------------------------------------------------------
# dataset file (JSON lines with "input" and "target")
# ----------------------------------------------------------------------------


def read_dataset_records(path) -> list[tuple[int, str, str]]:
    """``(line_number, input, target)`` for each nonblank line."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                inp, tgt = rec["input"], rec["target"]
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad record ({exc})") from exc
            if not isinstance(inp, str) or not isinstance(tgt, str):
                raise FormatError(f"{path}:{lineno}: input and target must be strings")
            out.append((lineno, inp, tgt))
    return out


def load_dataset(
    path, ckpt: ModelCheckpoint, prompt_len: int = 0, append_eos: bool = True
) -> list[TrainingExample]:
    """Tokenize a dataset file; the target is EOS-terminated by default.

    Records that would not fit in ``max_seq`` next to a ``prompt_len``-token
    prompt raise :class:`CapacityError` naming the line.
    """
    vocab = ckpt.vocab
    examples = []
    for lineno, inp, tgt in read_dataset_records(path):
        try:
            ex = TrainingExample(
                tokenize(inp, vocab), tokenize(tgt, vocab) + ([vocab.eos_id] if append_eos else [])
            )
            _check_capacity(prompt_len, ex, ckpt.config.max_seq)
        except CapacityError as exc:
            raise CapacityError(f"{path}:{lineno}: {exc}") from exc
        except TokenizationError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
        examples.append(ex)
    return examples


def write_dataset(records: Sequence, path) -> None:
    """Write objects with ``input``/``target`` attributes (or 2-tuples) as JSON lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            inp, tgt = (r.input, r.target) if hasattr(r, "input") else r
            fh.write(json.dumps({"input": inp, "target": tgt}) + "\n")
