"""A small pre-norm, character-level causal transformer kept frozen after training.

Layout per block::

    x = x + W_out attn(LN1(x) W_qkv + b_qkv) + b_out
    x = x + W2 gelu(LN2(x) W1 + b1) + b2

There is no final layer norm: logits are ``h^(L) W_o + b_o`` so a zero-layer
model maps its input embeddings straight through the output head.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numerics as nx
from .errors import (
    CapacityError,
    DivergenceError,
    FormatError,
    IntegrityError,
    ParameterError,
    ShapeError,
    TokenizationError,
    UsageError,
    VersionError,
    VocabIndexError,
)
from .numerics import Tensor2

EOS = "\n"


class Vocabulary:
    """Character-level vocabulary; ids are dense ``0..V-1`` in list order."""

    def __init__(self, tokens: Sequence[str], eos: str = EOS):
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            raise UsageError("vocabulary has duplicate tokens")
        for t in tokens:
            if len(t) != 1:
                raise UsageError(f"vocabulary entries must be single characters, got {t!r}")
        if eos not in tokens:
            raise UsageError(f"vocabulary lacks the EOS symbol {eos!r}")
        self.tokens = tokens
        self.eos = eos
        self._index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def from_texts(cls, texts: Iterable[str], eos: str = EOS) -> Vocabulary:
        chars = {eos}
        for t in texts:
            chars.update(t)
        return cls(sorted(chars), eos=eos)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens and self.eos == other.eos

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._index

    @property
    def eos_id(self) -> int:
        return self._index[self.eos]

    def id(self, symbol: str) -> int:
        return self._index[symbol]


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    index = vocab._index
    out = []
    for offset, ch in enumerate(text):
        i = index.get(ch)
        if i is None:
            raise TokenizationError(ch, offset)
        out.append(i)
    return out


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    toks = vocab.tokens
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(toks):
            raise VocabIndexError(f"token id {i} outside vocabulary of size {len(toks)}")
        out.append(toks[i])
    return "".join(out)


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    n_layers: int = 4
    heads: int = 4
    d_ff: int = 256
    max_seq: int = 256
    vocab_size: int = 64

    def __post_init__(self):
        if self.n_layers < 0:
            raise ParameterError("n_layers must be >= 0")
        for name in ("d", "heads", "d_ff", "max_seq", "vocab_size"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.d % self.heads:
            raise ParameterError(f"d={self.d} not divisible by heads={self.heads}")

    def param_shapes(self) -> list[tuple[str, tuple[int, int]]]:
        """Weight names and shapes in serialization order."""
        d, f, V = self.d, self.d_ff, self.vocab_size
        shapes = [("tok_emb", (V, d)), ("pos_emb", (self.max_seq, d))]
        for i in range(self.n_layers):
            p = f"layers.{i}."
            shapes += [
                (p + "ln1.gain", (1, d)),
                (p + "ln1.bias", (1, d)),
                (p + "attn.w_qkv", (d, 3 * d)),
                (p + "attn.b_qkv", (1, 3 * d)),
                (p + "attn.w_out", (d, d)),
                (p + "attn.b_out", (1, d)),
                (p + "ln2.gain", (1, d)),
                (p + "ln2.bias", (1, d)),
                (p + "ffn.w_in", (d, f)),
                (p + "ffn.b_in", (1, f)),
                (p + "ffn.w_out", (f, d)),
                (p + "ffn.b_out", (1, d)),
            ]
        shapes += [("out.weight", (d, V)), ("out.bias", (1, V))]
        return shapes


class ModelCheckpoint:
    """Config, vocabulary and read-only weights of the frozen base model."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, weights: dict[str, np.ndarray]):
        if len(vocab) != config.vocab_size:
            raise ShapeError(f"vocabulary size {len(vocab)} != config.vocab_size {config.vocab_size}")
        self.config = config
        self.vocab = vocab
        self.weights: dict[str, np.ndarray] = {}
        for name, shape in config.param_shapes():
            if name not in weights:
                raise ShapeError(f"missing weight {name}")
            arr = np.array(weights[name], dtype=np.float64, copy=True)
            if arr.shape != shape:
                raise ShapeError(f"weight {name} has shape {arr.shape}, expected {shape}")
            arr.flags.writeable = False
            self.weights[name] = arr
        extra = set(weights) - set(self.weights)
        if extra:
            raise ShapeError(f"unexpected weights: {sorted(extra)}")
        self._params = {k: Tensor2(v) for k, v in self.weights.items()}
        self._hash: str | None = None

    @property
    def params(self) -> dict[str, Tensor2]:
        return self._params

    def header(self) -> dict:
        return {
            "config": asdict(self.config),
            "vocab": self.vocab.tokens,
            "eos": self.vocab.eos,
            "weights": [[n, list(s)] for n, s in self.config.param_shapes()],
        }

    def weight_bytes(self) -> bytes:
        return b"".join(
            self.weights[n].astype("<f8", copy=False).tobytes() for n, _ in self.config.param_shapes()
        )

    def recompute_hash(self) -> str:
        """SHA-256 hex over the canonical header and all weight bytes."""
        h = hashlib.sha256(_canonical_json(self.header()))
        h.update(self.weight_bytes())
        return h.hexdigest()

    @property
    def content_hash(self) -> str:
        # weights are read-only arrays, so caching is safe
        if self._hash is None:
            self._hash = self.recompute_hash()
        return self._hash


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def init_weights(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, L = config.d, config.n_layers
    resid_scale = 1.0 / np.sqrt(2 * max(L, 1))
    w = {}
    for name, shape in config.param_shapes():
        leaf = name.rsplit(".", 1)[-1]
        if name == "tok_emb":
            w[name] = rng.standard_normal(shape)
        elif name == "pos_emb":
            w[name] = 0.1 * rng.standard_normal(shape)
        elif name == "out.weight":
            w[name] = 0.02 * rng.standard_normal(shape)
        elif leaf == "gain":
            w[name] = np.ones(shape)
        elif leaf.startswith("b") or leaf == "bias":
            w[name] = np.zeros(shape)
        else:
            std = 1.0 / np.sqrt(shape[0])
            if leaf == "w_out":
                std *= resid_scale
            w[name] = std * rng.standard_normal(shape)
    return w


def random_checkpoint(config: ModelConfig, vocab: Vocabulary, seed: int = 0) -> ModelCheckpoint:
    """Freshly initialized (untrained) checkpoint."""
    return ModelCheckpoint(config, vocab, init_weights(config, np.random.default_rng(seed)))


# ----------------------------------------------------------------------------
# forward
# ----------------------------------------------------------------------------


def _check_ids(tokens: Sequence[int], V: int) -> None:
    for t in tokens:
        if not 0 <= int(t) < V:
            raise VocabIndexError(f"token id {t} outside vocabulary of size {V}")


def token_embeddings(tokens: Sequence[int], ckpt: ModelCheckpoint, params=None) -> Tensor2:
    """Rows of the token-embedding table only, no positions."""
    params = params or ckpt.params
    _check_ids(tokens, ckpt.config.vocab_size)
    if len(tokens) == 0:
        return Tensor2(np.zeros((0, ckpt.config.d)))
    return nx.gather_rows(params["tok_emb"], tokens)


def add_positions(x: Tensor2, ckpt: ModelCheckpoint, params=None) -> Tensor2:
    """Add position rows ``0..n-1`` to an ``n x d`` sequence."""
    params = params or ckpt.params
    n = x.rows
    if n > ckpt.config.max_seq:
        raise CapacityError(f"sequence of {n} rows exceeds max_seq={ckpt.config.max_seq}")
    return nx.add(x, nx.slice_rows(params["pos_emb"], 0, n))


def embed(tokens: Sequence[int], ckpt: ModelCheckpoint, params=None) -> Tensor2:
    return add_positions(token_embeddings(tokens, ckpt, params), ckpt, params)


def forward(
    input_embeds: Tensor2, ckpt: ModelCheckpoint, params: dict[str, Tensor2] | None = None
) -> tuple[Tensor2, list[Tensor2]]:
    """Run the transformer on position-encoded inputs.

    Returns ``(logits, hidden)`` where ``hidden[i]`` is ``h^(i)`` and
    ``hidden[0]`` is the input itself.  ``params`` overrides the frozen
    weights (pretraining passes tape leaves here).
    """
    cfg = ckpt.config
    params = params or ckpt.params
    x = nx.as_tensor(input_embeds)
    if x.rows > cfg.max_seq:
        raise CapacityError(f"sequence of {x.rows} rows exceeds max_seq={cfg.max_seq}")
    if x.cols != cfg.d:
        raise ShapeError(f"input width {x.cols} != d={cfg.d}")
    hidden = [x]
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        a = nx.layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"])
        a = nx.add(nx.matmul(a, params[p + "attn.w_qkv"]), params[p + "attn.b_qkv"])
        a = nx.causal_attention(a, cfg.heads)
        a = nx.add(nx.matmul(a, params[p + "attn.w_out"]), params[p + "attn.b_out"])
        x = nx.add(x, a)
        f = nx.layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"])
        f = nx.gelu(nx.add(nx.matmul(f, params[p + "ffn.w_in"]), params[p + "ffn.b_in"]))
        f = nx.add(nx.matmul(f, params[p + "ffn.w_out"]), params[p + "ffn.b_out"])
        x = nx.add(x, f)
        hidden.append(x)
    logits = nx.add(nx.matmul(x, params["out.weight"]), params["out.bias"])
    return logits, hidden


# ----------------------------------------------------------------------------
# base pretraining
# ----------------------------------------------------------------------------


def _window(seq: Sequence[int], max_len: int, rng: np.random.Generator) -> list[int]:
    if len(seq) <= max_len:
        return list(seq)
    start = int(rng.integers(0, len(seq) - max_len + 1))
    return list(seq[start:start + max_len])


def sequence_loss(seq: Sequence[int], ckpt: ModelCheckpoint, params=None) -> Tensor2:
    """Summed next-token cross-entropy over one sequence."""
    x = embed(seq[:-1], ckpt, params)
    logits, _ = forward(x, ckpt, params)
    return nx.cross_entropy(logits, seq[1:])


def corpus_loss(corpus: Sequence[Sequence[int]], ckpt: ModelCheckpoint) -> float:
    """Mean per-token next-token cross-entropy (nats) over a corpus."""
    total = 0.0
    count = 0
    limit = ckpt.config.max_seq + 1
    for seq in corpus:
        seq = list(seq)[:limit]
        if len(seq) < 2:
            continue
        total += sequence_loss(seq, ckpt).item()
        count += len(seq) - 1
    if count == 0:
        raise UsageError("corpus has no sequence with at least two tokens")
    return total / count


def pretrain_base(
    corpus: Sequence[Sequence[int]],
    config: ModelConfig,
    vocab: Vocabulary,
    seed: int = 0,
    steps: int = 500,
    lr: float = 3e-3,
    batch_size: int = 8,
    clip_norm: float = 1.0,
    log: Callable[[int, float], None] | None = None,
) -> ModelCheckpoint:
    """Train every weight with Adam on next-token prediction over ``corpus``.

    Each step samples ``batch_size`` sequences (cropped to ``max_seq + 1``)
    with a seeded generator, so the result is bit-identical for a fixed seed.
    ``log(step, mean_token_loss)`` is called after every step when given.
    """
    corpus = [list(s) for s in corpus if len(s) >= 2]
    if not corpus:
        raise UsageError("pretraining corpus is empty")
    if steps < 1:
        raise UsageError(f"steps must be >= 1, got {steps}")
    if not lr > 0:
        raise ParameterError(f"lr must be > 0, got {lr}")
    rng = np.random.default_rng(seed)
    weights = init_weights(config, rng)
    names = [n for n, _ in config.param_shapes()]
    shell = ModelCheckpoint(config, vocab, weights)
    arrays = [weights[n] for n in names]
    opt = nx.Adam(arrays, lr=lr)
    for step in range(steps):
        picks = rng.integers(0, len(corpus), size=batch_size)
        grads = [np.zeros_like(a) for a in arrays]
        total, tokens = 0.0, 0
        for j in picks:
            seq = _window(corpus[int(j)], config.max_seq + 1, rng)
            tape = nx.GradTape()
            params = {n: tape.watch(a) for n, a in zip(names, arrays)}
            loss = sequence_loss(seq, shell, params)
            for acc, g in zip(grads, tape.backward(loss)):
                acc += g
            total += loss.item()
            tokens += len(seq) - 1
        for g in grads:
            g /= tokens
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
        if not np.isfinite(norm):
            raise DivergenceError(step, "non-finite gradient during pretraining")
        if clip_norm and norm > clip_norm:
            for g in grads:
                g *= clip_norm / norm
        opt.step(grads)
        if log is not None:
            log(step, total / tokens)
    return ModelCheckpoint(config, vocab, dict(zip(names, arrays)))


# ----------------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------------

CKPT_MAGIC = b"EMBTCKPT"
CKPT_VERSION = 1
_HASH_LEN = 32


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    header = _canonical_json(ckpt.header())
    body = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)) + header + ckpt.weight_bytes()
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path) -> ModelCheckpoint:
    raw = Path(path).read_bytes()
    fixed = len(CKPT_MAGIC) + 8
    if len(raw) < fixed + _HASH_LEN:
        raise FormatError(f"{path}: file too short for a checkpoint")
    if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, hlen = struct.unpack_from("<II", raw, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    if len(raw) < fixed + hlen + _HASH_LEN:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[fixed:fixed + hlen].decode("utf-8"))
        config = ModelConfig(**header["config"])
        vocab = Vocabulary(header["vocab"], eos=header["eos"])
        layout = [(n, tuple(s)) for n, s in header["weights"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from exc
    if layout != config.param_shapes():
        raise FormatError(f"{path}: weight layout does not match config")
    n_floats = sum(r * c for _, (r, c) in layout)
    expected = fixed + hlen + 8 * n_floats + _HASH_LEN
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    body, stored = raw[:-_HASH_LEN], raw[-_HASH_LEN:]
    if hashlib.sha256(body).digest() != stored:
        raise IntegrityError(f"{path}: content hash mismatch")
    flat = np.frombuffer(body, dtype="<f8", offset=fixed + hlen, count=n_floats)
    weights = {}
    pos = 0
    for name, (r, c) in layout:
        weights[name] = flat[pos:pos + r * c].reshape(r, c).astype(np.float64)
        pos += r * c
    return ModelCheckpoint(config, vocab, weights)


def read_corpus(path) -> list[str]:
    """UTF-8 text, one document per line; blank lines are skipped."""
    text = Path(path).read_text(encoding="utf-8")
    return [line for line in text.split("\n") if line.strip()]


def encode_corpus(lines: Iterable[str], vocab: Vocabulary) -> list[list[int]]:
    """Tokenize documents and terminate each with EOS."""
    return [tokenize(line, vocab) + [vocab.eos_id] for line in lines]
