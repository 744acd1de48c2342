import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embedtune.engine import TrainingExample, init_prompt
from embedtune.errors import CapacityError, CompatibilityError, FormatError
from embedtune.inference import (
    GenerationTrace,
    argmax_lowest,
    delimiter_match,
    evaluate,
    exact_match,
    generate,
    generate_text,
    load_trace,
    save_trace,
)
from embedtune.model import ModelCheckpoint, add_positions, forward, random_checkpoint, token_embeddings, tokenize
from embedtune.numerics import softmax_rows


def _biased(ckpt, token, strength=1e3):
    w = dict(ckpt.weights)
    bias = np.zeros_like(w["out.bias"])
    bias[0, token] = strength
    w["out.bias"] = bias
    return ModelCheckpoint(ckpt.config, ckpt.vocab, w)


def test_max_tokens_zero(tiny_ckpt):
    tr = generate(init_prompt("ab", tiny_ckpt), "cd", tiny_ckpt, max_tokens=0)
    assert tr.tokens == [] and tr.stop_reason == "max-tokens"
    assert tr.probs.shape == (0, tiny_ckpt.config.vocab_size)


def test_generation_is_deterministic(tiny_ckpt):
    p = init_prompt("abc", tiny_ckpt)
    a = generate(p, "bad", tiny_ckpt, max_tokens=12)
    b = generate(p, "bad", tiny_ckpt, max_tokens=12)
    assert a.tokens == b.tokens and a.probs.tobytes() == b.probs.tobytes()


def test_trace_rows_are_final_position_softmax(tiny_ckpt):
    p = init_prompt("abc", tiny_ckpt)
    ids = tokenize("bad", tiny_ckpt.vocab)
    tr = generate(p, "bad", tiny_ckpt, max_tokens=6)
    np.testing.assert_allclose(tr.probs.sum(axis=1), 1.0, atol=1e-9)
    seq = list(p.tokens) + ids
    for t, tok in enumerate(tr.tokens):
        logits, _ = forward(add_positions(token_embeddings(seq, tiny_ckpt), tiny_ckpt), tiny_ckpt)
        expected = softmax_rows(logits.data[-1:]).data[0]
        np.testing.assert_array_equal(tr.probs[t], expected)
        assert tok == int(np.argmax(tr.probs[t]))
        seq.append(tok)


def test_eos_stops_generation(tiny_ckpt):
    ck = _biased(tiny_ckpt, tiny_ckpt.vocab.eos_id)
    tr = generate(init_prompt("ab", ck), "c", ck, max_tokens=10)
    assert tr.tokens == [ck.vocab.eos_id] and tr.stop_reason == "eos" and tr.text == ""


def test_max_tokens_reached(tiny_ckpt):
    ck = _biased(tiny_ckpt, 0)
    tr = generate(init_prompt("ab", ck), "c", ck, max_tokens=5)
    assert tr.tokens == [0] * 5 and tr.stop_reason == "max-tokens" and tr.text == "aaaaa"


def test_capacity_truncates_without_error(tiny_ckpt):
    ck = _biased(tiny_ckpt, 0)
    p = init_prompt("a" * 40, ck)
    tr = generate(p, "bb", ck, max_tokens=50)
    assert tr.stop_reason == "max-tokens"
    assert 42 + len(tr.tokens) == ck.config.max_seq + 1
    with pytest.raises(CapacityError):
        generate(p, "b" * 9, ck, max_tokens=1)


def test_argmax_ties_go_to_lowest_id():
    assert argmax_lowest(np.array([0.2, 0.4, 0.4])) == 1
    assert argmax_lowest(np.full(5, 0.2)) == 0


def test_incompatible_prompt(tiny_ckpt):
    other = random_checkpoint(tiny_ckpt.config, tiny_ckpt.vocab, seed=42)
    with pytest.raises(CompatibilityError):
        generate(init_prompt("ab", other), "c", tiny_ckpt)


@settings(max_examples=25, deadline=None)
@given(st.text(alphabet="abcdefgh ", min_size=1, max_size=8), st.text(alphabet="abcdefgh ", max_size=10))
def test_init_prompt_generation_matches_text_prompt(prompt, query):
    from embedtune.model import ModelConfig, Vocabulary

    vocab = Vocabulary(list("abcdefgh \n"))
    ck = _tiny(ModelConfig(d=16, n_layers=2, heads=2, d_ff=32, max_seq=48, vocab_size=10), vocab)
    a = generate(init_prompt(prompt, ck), query, ck, max_tokens=8)
    b = generate_text(prompt, query, ck, max_tokens=8)
    assert a.tokens == b.tokens and a.probs.tobytes() == b.probs.tobytes()
    assert a.stop_reason == b.stop_reason


_MODELS = {}


def _tiny(cfg, vocab):
    if cfg not in _MODELS:
        _MODELS[cfg] = random_checkpoint(cfg, vocab, seed=3)
    return _MODELS[cfg]


def test_top1_recording(tiny_ckpt):
    p = init_prompt("ab", tiny_ckpt)
    full = generate(p, "c", tiny_ckpt, max_tokens=4)
    top = generate(p, "c", tiny_ckpt, max_tokens=4, record_full=False)
    assert top.tokens == full.tokens and not top.full and full.full
    np.testing.assert_array_equal(top.probs[:, 0], full.probs[np.arange(4), full.tokens])


def test_trace_round_trip(tiny_ckpt, tmp_path):
    tr = generate(init_prompt("ab", tiny_ckpt), "c", tiny_ckpt, max_tokens=4)
    save_trace(tr, tmp_path / "t.json")
    back = load_trace(tmp_path / "t.json")
    assert back.tokens == tr.tokens and back.stop_reason == tr.stop_reason
    assert back.probs.tobytes() == tr.probs.tobytes()
    (tmp_path / "bad.json").write_text("{}")
    with pytest.raises(FormatError):
        load_trace(tmp_path / "bad.json")


# ---------------------------------------------------------------- evaluate


def test_evaluate_all_correct_and_all_wrong(tiny_ckpt):
    ck = _biased(tiny_ckpt, tiny_ckpt.vocab.eos_id)
    eos = ck.vocab.eos_id
    p = init_prompt("ab", ck)
    right = [TrainingExample([1, 2], [eos]), TrainingExample([3], [eos])]
    assert evaluate(p, right, ck).accuracy == 1.0
    wrong = [TrainingExample([1, 2], [0, 1, eos]), TrainingExample([3], [4, eos])]
    rep = evaluate(p, wrong, ck)
    assert rep.accuracy == 0.0 and rep.generations == ["", ""]
    assert rep.to_dict()["n"] == 2


def test_evaluate_counts_capacity_overflow_as_wrong(tiny_ckpt):
    ck = _biased(tiny_ckpt, 0)
    p = init_prompt("a" * 44, ck)
    rep = evaluate(p, [TrainingExample([1] * 10, [0, ck.vocab.eos_id])], ck)
    assert rep.accuracy == 0.0 and rep.generations == [""]


def test_matchers():
    assert exact_match(" POS", "POS ")
    assert not exact_match("POS!", "POS")
    m = delimiter_match("#")
    assert m("blah # 7", " # 7") and m("x#1#7", "7")
    assert not m("7", "# 7") and not m("# 8", "# 7")


def test_trace_full_flag():
    assert GenerationTrace([1], np.array([[0.5, 0.5]]), "eos").full
    assert not GenerationTrace([1], np.array([[0.5]]), "eos").full
