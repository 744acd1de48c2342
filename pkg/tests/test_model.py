import json
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embedtune.errors import (
    CapacityError,
    FormatError,
    IntegrityError,
    ParameterError,
    TokenizationError,
    UsageError,
    VersionError,
    VocabIndexError,
)
from embedtune.model import (
    ModelCheckpoint,
    ModelConfig,
    Vocabulary,
    corpus_loss,
    detokenize,
    embed,
    encode_corpus,
    forward,
    load_checkpoint,
    pretrain_base,
    random_checkpoint,
    save_checkpoint,
    token_embeddings,
    tokenize,
)
from embedtune.numerics import Tensor2

FIXTURES = Path(__file__).parent / "fixtures"


# ---------------------------------------------------------------- tokenizer


def test_tokenize_examples(ascii_vocab):
    assert tokenize("", ascii_vocab) == []
    ab = Vocabulary(["a", "b", "\n"])
    assert tokenize("ab", ab) == [0, 1]
    with pytest.raises(TokenizationError) as info:
        tokenize("aé", ascii_vocab)
    assert info.value.offset == 1
    assert "offset 1" in str(info.value)


@given(st.text(alphabet="abcdefgh \n", max_size=40))
def test_tokenize_round_trip(text):
    vocab = Vocabulary(list("abcdefgh \n"))
    assert detokenize(tokenize(text, vocab), vocab) == text


def test_detokenize_rejects_bad_id(tiny_vocab):
    with pytest.raises(VocabIndexError):
        detokenize([len(tiny_vocab)], tiny_vocab)


@pytest.mark.parametrize(
    "tokens, eos",
    [(["a", "a", "\n"], "\n"), (["ab", "\n"], "\n"), (["a", "b"], "\n")],
)
def test_vocabulary_validation(tokens, eos):
    with pytest.raises(UsageError):
        Vocabulary(tokens, eos=eos)


def test_vocabulary_from_texts_is_sorted_and_has_eos():
    v = Vocabulary.from_texts(["cab", "b a"])
    assert v.tokens == sorted(v.tokens)
    assert "\n" in v and v.tokens[v.eos_id] == "\n"


# ---------------------------------------------------------------- config


@pytest.mark.parametrize(
    "kwargs", [{"d": 10, "heads": 4}, {"n_layers": -1}, {"max_seq": 0}, {"vocab_size": 0}]
)
def test_config_rejects_invalid(kwargs):
    with pytest.raises(ParameterError):
        ModelConfig(**kwargs)


# ---------------------------------------------------------------- embed


def test_embed_empty(tiny_ckpt):
    assert token_embeddings([], tiny_ckpt).shape == (0, tiny_ckpt.config.d)
    assert embed([], tiny_ckpt).shape == (0, tiny_ckpt.config.d)


def test_embed_single_token_zero_positions(tiny_ckpt):
    w = dict(tiny_ckpt.weights)
    w["pos_emb"] = np.zeros_like(w["pos_emb"])
    ck = ModelCheckpoint(tiny_ckpt.config, tiny_ckpt.vocab, w)
    assert np.array_equal(embed([0], ck).data[0], ck.weights["tok_emb"][0])


def test_embed_permutation_follows_rows(tiny_ckpt):
    a = token_embeddings([1, 4, 2], tiny_ckpt).data
    b = token_embeddings([2, 1, 4], tiny_ckpt).data
    assert np.array_equal(a[[2, 0, 1]], b)


def test_embed_capacity_and_range(tiny_ckpt):
    with pytest.raises(CapacityError):
        embed([0] * (tiny_ckpt.config.max_seq + 1), tiny_ckpt)
    with pytest.raises(VocabIndexError):
        embed([tiny_ckpt.config.vocab_size], tiny_ckpt)


# ---------------------------------------------------------------- forward


def test_forward_shapes(tiny_ckpt):
    logits, hidden = forward(embed([0, 1, 2], tiny_ckpt), tiny_ckpt)
    assert logits.shape == (3, tiny_ckpt.config.vocab_size)
    assert len(hidden) == tiny_ckpt.config.n_layers + 1
    assert all(h.shape == (3, tiny_ckpt.config.d) for h in hidden)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(0, 9), min_size=1, max_size=20), st.data())
def test_forward_prefix_property(ids, data):
    vocab = Vocabulary(list("abcdefgh \n"))
    cfg = ModelConfig(d=16, n_layers=2, heads=2, d_ff=32, max_seq=48, vocab_size=10)
    ck = _cached_ckpt(cfg, vocab)
    t = data.draw(st.integers(1, len(ids)))
    full, _ = forward(embed(ids, ck), ck)
    part, _ = forward(embed(ids[:t], ck), ck)
    np.testing.assert_allclose(part.data, full.data[:t], atol=1e-10, rtol=0)


_CKPTS = {}


def _cached_ckpt(cfg, vocab):
    if cfg not in _CKPTS:
        _CKPTS[cfg] = random_checkpoint(cfg, vocab, seed=3)
    return _CKPTS[cfg]


def test_forward_future_tokens_do_not_leak(tiny_ckpt):
    a, _ = forward(embed([1, 2, 3, 4], tiny_ckpt), tiny_ckpt)
    b, _ = forward(embed([1, 2, 7, 0], tiny_ckpt), tiny_ckpt)
    np.testing.assert_array_equal(a.data[:2], b.data[:2])
    assert not np.allclose(a.data[2:], b.data[2:])


def test_zero_layer_logits_are_output_projection(tiny_vocab):
    cfg = ModelConfig(d=8, n_layers=0, heads=2, d_ff=8, max_seq=8, vocab_size=len(tiny_vocab))
    ck = random_checkpoint(cfg, tiny_vocab, seed=1)
    x = embed([3, 5], ck)
    logits, hidden = forward(x, ck)
    assert len(hidden) == 1
    expected = x.data @ ck.weights["out.weight"] + ck.weights["out.bias"]
    np.testing.assert_array_equal(logits.data, expected)


def test_forward_rejects_wrong_width(tiny_ckpt):
    with pytest.raises(Exception):
        forward(Tensor2(np.zeros((2, 3))), tiny_ckpt)


def test_golden_logits(tiny_ckpt):
    golden = json.loads((FIXTURES / "golden_logits.json").read_text())
    assert tiny_ckpt.content_hash == golden["content_hash"]
    ids = tokenize(golden["text"], tiny_ckpt.vocab)
    logits, _ = forward(embed(ids, tiny_ckpt), tiny_ckpt)
    expected = np.array([[float.fromhex(v) for v in row] for row in golden["logits"]])
    np.testing.assert_allclose(logits.data, expected, atol=1e-12, rtol=0)


# ---------------------------------------------------------------- pretraining

_LINES = ["abcabcabc abc", "abab abab", "cab cab cab"] * 10


def _small_setup():
    vocab = Vocabulary(list("abc \n"))
    cfg = ModelConfig(d=16, n_layers=1, heads=2, d_ff=32, max_seq=32, vocab_size=len(vocab))
    return vocab, cfg, encode_corpus(_LINES, vocab)


def test_pretrain_halves_cross_entropy():
    # measured once at build time: 1.632 -> 0.0437 nats/token (ratio 0.027)
    vocab, cfg, corpus = _small_setup()
    before = corpus_loss(corpus, random_checkpoint(cfg, vocab, seed=0))
    after = corpus_loss(corpus, pretrain_base(corpus, cfg, vocab, seed=0, steps=500, batch_size=4))
    assert after < 0.5 * before


def test_pretrain_usage_errors():
    vocab, cfg, corpus = _small_setup()
    with pytest.raises(UsageError):
        pretrain_base(corpus, cfg, vocab, steps=0)
    with pytest.raises(UsageError):
        pretrain_base([], cfg, vocab, steps=1)


def test_pretrain_is_deterministic():
    vocab, cfg, corpus = _small_setup()
    a = pretrain_base(corpus, cfg, vocab, seed=5, steps=5, batch_size=2)
    b = pretrain_base(corpus, cfg, vocab, seed=5, steps=5, batch_size=2)
    c = pretrain_base(corpus, cfg, vocab, seed=6, steps=5, batch_size=2)
    assert a.content_hash == b.content_hash != c.content_hash


# ---------------------------------------------------------------- persistence


def test_checkpoint_round_trip(tiny_ckpt, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_ckpt, path)
    back = load_checkpoint(path)
    assert back.config == tiny_ckpt.config and back.vocab == tiny_ckpt.vocab
    for name, arr in tiny_ckpt.weights.items():
        assert arr.tobytes() == back.weights[name].tobytes()
    assert back.content_hash == tiny_ckpt.content_hash
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_flipped_byte(tiny_ckpt, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_ckpt, path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) - 32 - 100] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        load_checkpoint(path)


@pytest.mark.parametrize("keep", [0, 5, 14, 200, -1])
def test_checkpoint_truncated(tiny_ckpt, tmp_path, keep):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_ckpt, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:keep] if keep >= 0 else raw[:-1])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_version_and_magic(tiny_ckpt, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_ckpt, path)
    raw = bytearray(path.read_bytes())
    bumped = raw[:8] + struct.pack("<I", 99) + raw[12:]
    path.write_bytes(bytes(bumped))
    with pytest.raises(VersionError):
        load_checkpoint(path)
    path.write_bytes(b"NOTACKPT" + bytes(raw[8:]))
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_weights_are_read_only(tiny_ckpt):
    with pytest.raises(ValueError):
        tiny_ckpt.weights["tok_emb"][0, 0] = 1.0
