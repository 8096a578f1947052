import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dasc.controllers import DascHead, DirectorHead
from dasc.decoding import (
    DecodeConfig,
    combine_logits,
    decode_many,
    effective_alpha,
    generate,
    generate_batch,
    keep_base_eos,
    never_generated,
    nucleus,
    rerank_batch,
    rerank_generate,
    rerank_score,
    softmax_np,
    top_p_filter,
)
from dasc.errors import ConfigError, UnsupportedCompositionError
from dasc.model import ModelConfig, Seq2SeqModel
from dasc.synthlang import (
    EOS,
    AttributeAssignment,
    CorpusConfig,
    build_default_schema,
    build_vocab,
    generate_corpus,
    parse_attrs,
)
from dasc.tensor import Tensor


@pytest.fixture(scope="module")
def toy():
    schema = build_default_schema()
    vocab = build_vocab(schema)
    samples = generate_corpus(CorpusConfig(n_samples=12, seed=4), schema, vocab)
    cfg = ModelConfig(vocab_size=len(vocab), d_model=16, n_enc_layers=1, n_dec_layers=1,
                      n_heads=2, d_ffn=32, max_len=32, init_std=0.3)
    model = Seq2SeqModel(cfg, seed=0)
    heads = {
        "director": DirectorHead(16, len(vocab), schema.K, seed=1, init_std=0.3),
        "dasc": DascHead(16, len(vocab), schema.K, p=8, seed=1, init_std=0.3),
    }
    return schema, vocab, samples, model, heads


# --- combine_logits ---------------------------------------------------------


def test_alpha_zero_is_bitwise_identity():
    base = np.random.default_rng(0).normal(size=7)
    for method, bias in (("dasc", np.ones(7)), ("director", np.ones((2, 7)))):
        out = combine_logits(base, bias, 0.0, method)
        assert np.array_equal(out, base) and out is not base


def test_director_two_rows_sum():
    # rows [1,-1] and [3,1] sum to [4,0]
    out = combine_logits(np.zeros(2), np.array([[1.0, -1.0], [3.0, 1.0]]), 1.0, "director")
    np.testing.assert_array_equal(out, [4.0, 0.0])


def test_dasc_adds_bias_vector():
    base = np.array([0.5, -1.0, 2.0])
    out = combine_logits(base, np.array([1.0, 2.0, -1.0]), 0.5, "dasc")
    np.testing.assert_allclose(out, [1.0, 0.0, 1.5], atol=1e-15)


def test_baseline_ignores_bias():
    base = np.arange(3.0)
    np.testing.assert_array_equal(combine_logits(base, np.ones(3), 2.0, "baseline"), base)


def test_effective_alpha():
    assert effective_alpha(DecodeConfig(alpha=1.5), 3) == 4.5
    assert effective_alpha(DecodeConfig(alpha=1.5, scale_alpha_by_k=False), 3) == 1.5


def test_scaled_alpha_cancels_dasc_mean():
    rng = np.random.default_rng(1)
    head = DascHead(6, 9, 3, p=4)
    h = Tensor(rng.normal(size=(1, 6)))
    signs = np.array([[1.0, 1.0, -1.0]])
    ctx = head.context_embed(h).data[0]
    plain_sum = (ctx[0] + ctx[1] - ctx[2]) @ head.params["atemb"].data.T
    cfg = DecodeConfig(alpha=0.7)
    out = combine_logits(np.zeros(9), head.bias(h, signs)[0], effective_alpha(cfg, 3), "dasc")
    np.testing.assert_allclose(out, 0.7 * plain_sum, atol=1e-12)


def test_decode_config_validation():
    with pytest.raises(ConfigError):
        DecodeConfig(top_p=0.0)
    with pytest.raises(ConfigError):
        DecodeConfig(top_p=1.5)
    with pytest.raises(ConfigError):
        DecodeConfig(alpha=-1)
    with pytest.raises(ConfigError):
        DecodeConfig(method="fudge")


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, 8, elements=st.floats(-5, 5)),
    arrays(np.float64, 8, elements=st.floats(-5, 5)),
    st.floats(0, 3),
    st.floats(0, 3),
)
def test_monotone_steering(base, bias, a1, a2):
    lo, hi = sorted((a1, a2))
    top = int(np.argmax(bias))
    p_lo = softmax_np(combine_logits(base, bias, lo, "dasc"))[top]
    p_hi = softmax_np(combine_logits(base, bias, hi, "dasc"))[top]
    assert p_hi >= p_lo - 1e-12


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 10, elements=st.floats(-30, 30)), st.floats(0, 5))
def test_adjusted_distribution_normalized(base, alpha):
    bias = np.linspace(-1, 1, 10)
    probs = softmax_np(combine_logits(base, bias, alpha, "dasc"))
    assert abs(probs.sum() - 1.0) <= 1e-12


# --- nucleus ----------------------------------------------------------------


def test_nucleus_example():
    support, w = nucleus(np.array([0.4, 0.35, 0.25]), 0.5)
    assert support.tolist() == [0, 1]
    np.testing.assert_allclose(w, [8 / 15, 7 / 15], atol=1e-15)


def test_nucleus_dominant_token_is_certain():
    logits = np.log(np.array([0.05, 0.9, 0.05]))
    rng = np.random.default_rng(0)
    assert {top_p_filter(logits, 0.5, rng) for _ in range(50)} == {1}


def test_nucleus_full_support_at_p_one():
    support, w = nucleus(np.array([0.1, 0.6, 0.3]), 1.0)
    assert sorted(support.tolist()) == [0, 1, 2]
    np.testing.assert_allclose(w, [0.6, 0.3, 0.1])


def test_nucleus_ties_break_by_token_id():
    support, _ = nucleus(np.array([0.25, 0.25, 0.25, 0.25]), 0.5)
    assert support.tolist() == [0, 1]


def test_top_p_full_distribution_frequencies():
    probs = np.array([0.5, 0.3, 0.2])
    rng = np.random.default_rng(0)
    draws = np.bincount([top_p_filter(np.log(probs), 1.0, rng) for _ in range(20000)], minlength=3) / 20000
    np.testing.assert_allclose(draws, probs, atol=0.015)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(0.0, 1.0)), st.floats(0.01, 1.0))
def test_nucleus_is_minimal_prefix(raw, p):
    if raw.sum() <= 0:
        return
    probs = raw / raw.sum()
    support, w = nucleus(probs, p)
    order = sorted(range(len(probs)), key=lambda i: (-probs[i], i))
    k = len(support)
    assert support.tolist() == order[:k]
    mass = probs[support].sum()
    assert mass >= p - 1e-12 or k == len(probs)
    assert k == 1 or probs[order[: k - 1]].sum() < p
    assert abs(w.sum() - 1.0) <= 1e-12


# --- generation ---------------------------------------------------------------


def test_alpha_zero_matches_baseline(toy):
    schema, vocab, samples, model, heads = toy
    ctx = [s.context for s in samples]
    gold = [AttributeAssignment.with_ones(schema, s.gold.ones(schema)) for s in samples]
    base = generate_batch(model, None, ctx, gold, DecodeConfig(method="baseline", seed=3))
    for method, head in heads.items():
        out = generate_batch(model, head, ctx, gold, DecodeConfig(method=method, alpha=0.0, seed=3))
        assert [g.tokens for g in out] == [g.tokens for g in base]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 8, elements=st.floats(-5, 5)), arrays(np.float64, 8, elements=st.floats(-20, 20)))
def test_keep_base_eos_preserves_stop_probability(base, bias):
    out = keep_base_eos(base, base + bias)
    p, q = softmax_np(base), softmax_np(out)
    assert abs(q[EOS] - p[EOS]) < 1e-12
    # the other tokens keep the biased odds among themselves
    rest = np.arange(8) != EOS
    r = softmax_np((base + bias)[rest])
    np.testing.assert_allclose(q[rest] / q[rest].sum(), r, rtol=1e-9, atol=1e-15)


def test_eos_is_never_biased(toy):
    schema, vocab, samples, model, heads = toy

    class EosLover(DascHead):
        def bias(self, h, signs):
            out = np.zeros((len(signs), self.V))
            out[:, EOS] = 1e6
            return out

    head = EosLover(16, len(vocab), schema.K, p=8)
    ctx = [s.context for s in samples]
    gold = [s.gold for s in samples]
    base = generate_batch(model, None, ctx, gold, DecodeConfig(method="baseline", seed=2))
    out = generate_batch(model, head, ctx, gold, DecodeConfig(method="dasc", alpha=5.0, seed=2))
    assert [g.tokens for g in out] == [g.tokens for g in base]


def test_context_only_tokens_are_never_emitted(toy):
    schema, vocab, samples, model, heads = toy
    banned = set(never_generated(vocab))
    assert {0, 1, 3} <= banned
    assert all(vocab.tags[i] == "control" or vocab.tags[i].startswith("topic:") for i in banned - {0, 1, 3})

    class Pusher(DascHead):
        def bias(self, h, signs):
            out = np.zeros((len(signs), self.V))
            out[:, sorted(banned)] = 1e3
            return out

    head = Pusher(16, len(vocab), schema.K, p=8)
    gens = generate_batch(model, head, [s.context for s in samples], [s.gold for s in samples],
                          DecodeConfig(method="dasc", alpha=4.0, max_len=8), schema, vocab)
    assert not banned & {t for g in gens for t in g.tokens}


def test_generation_is_deterministic(toy):
    schema, vocab, samples, model, heads = toy
    ctx = [s.context for s in samples]
    gold = [s.gold for s in samples]
    cfg = DecodeConfig(method="dasc", seed=11)
    a = generate_batch(model, heads["dasc"], ctx, gold, cfg)
    b = generate_batch(model, heads["dasc"], ctx, gold, cfg)
    assert [g.tokens for g in a] == [g.tokens for g in b]


def test_batch_row_equals_single_decode(toy):
    schema, vocab, samples, model, heads = toy
    ctx = [s.context for s in samples[:4]]
    gold = [s.gold for s in samples[:4]]
    cfg = DecodeConfig(method="director", seed=20)
    batch = generate_batch(model, heads["director"], ctx, gold, cfg)
    for i in range(4):
        one = generate(model, heads["director"], ctx[i], gold[i], DecodeConfig(method="director", seed=20 + i))
        assert one.tokens == batch[i].tokens


def test_greedy_consumes_no_rng(toy):
    schema, vocab, samples, model, heads = toy
    s = samples[0]
    a = generate(model, heads["dasc"], s.context, s.gold, DecodeConfig(strategy="greedy", seed=0))
    b = generate(model, heads["dasc"], s.context, s.gold, DecodeConfig(strategy="greedy", seed=999))
    assert a.tokens == b.tokens


def test_generation_result_invariant_and_steps(toy):
    schema, vocab, samples, model, heads = toy
    for s in samples:
        g = generate(model, heads["dasc"], s.context, s.gold, DecodeConfig(max_len=6))
        assert (g.tokens[-1] == EOS) != (g.terminated_by == "max_len")
        assert len(g.steps) == len(g.tokens) <= 6
        for st_ in g.steps:
            assert st_.entropy >= 0 and st_.bias_argmax is not None


def test_bias_does_not_touch_hidden_states(toy):
    schema, vocab, samples, model, heads = toy
    s = samples[0]
    mem = model.encode([s.context])
    h1, l1 = model.decode_step(mem, [1, 20, 21])
    heads["dasc"].bias(h1.reshape(1, -1), s.gold.signs()[None])
    h2, l2 = model.decode_step(mem, [1, 20, 21])
    assert np.array_equal(h1.data, h2.data) and np.array_equal(l1.data, l2.data)


def test_ctrl_requires_single_value_per_aspect(toy):
    schema, vocab, samples, model, heads = toy
    comp = parse_attrs(schema, "emotion=happiness+surprise,style=alpha,question=question")
    with pytest.raises(UnsupportedCompositionError):
        generate(model, None, samples[0].context, comp, DecodeConfig(method="ctrl"), schema, vocab)


def test_head_required(toy):
    schema, vocab, samples, model, heads = toy
    with pytest.raises(ConfigError):
        generate(model, None, samples[0].context, samples[0].gold, DecodeConfig(method="dasc"))


# --- rerank -------------------------------------------------------------------


def test_rerank_single_candidate_is_plain_sample(toy):
    schema, vocab, samples, model, heads = toy
    s = samples[0]
    cfg = DecodeConfig(method="rerank", seed=5)
    picked = rerank_generate(model, s.context, s.gold, cfg, schema, vocab, n=1)
    plain = generate_batch(model, None, [s.context], [s.gold], DecodeConfig(method="baseline"), seeds=[5])[0]
    assert picked.tokens == plain.tokens


def test_rerank_is_reproducible(toy):
    schema, vocab, samples, model, heads = toy
    ctx = [s.context for s in samples]
    gold = [s.gold for s in samples]
    cfg = DecodeConfig(method="rerank", seed=2)
    a = rerank_batch(model, ctx, gold, cfg, schema, vocab)
    b = rerank_batch(model, ctx, gold, cfg, schema, vocab)
    assert [g.tokens for g in a] == [g.tokens for g in b]


def test_rerank_score_dominance(toy):
    schema, vocab, *_ = toy
    target = parse_attrs(schema, "style=alpha,emotion=like,question=question")
    three = vocab.encode("wh00 alpha_00 like_00 w01 ?")
    two = vocab.encode("alpha_00 like_00 w01 .")
    assert rerank_score(three, target, schema, vocab) > rerank_score(two, target, schema, vocab)


def test_rerank_picks_best_candidate(toy):
    schema, vocab, samples, model, heads = toy
    s = samples[1]
    cfg = DecodeConfig(method="rerank", seed=7)
    n = 5
    picked = rerank_generate(model, s.context, s.gold, cfg, schema, vocab, n=n)
    cands = generate_batch(model, None, [s.context] * n, [s.gold] * n, DecodeConfig(method="baseline"),
                           seeds=[7 * n + j for j in range(n)])
    scores = [rerank_score(c.response, s.gold, schema, vocab) for c in cands]
    assert picked.tokens == cands[int(np.argmax(scores))].tokens


def test_decode_many_chunking_is_invisible(toy):
    schema, vocab, samples, model, heads = toy
    ctx = [s.context for s in samples]
    gold = [s.gold for s in samples]
    for method in ("dasc", "rerank"):
        cfg = DecodeConfig(method=method, seed=1)
        whole = decode_many(model, heads.get(method), ctx, gold, cfg, schema, vocab, chunk=100)
        parts = decode_many(model, heads.get(method), ctx, gold, cfg, schema, vocab, chunk=5)
        assert [g.tokens for g in whole] == [g.tokens for g in parts]
