import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dasc.controllers import (
    DascHead,
    DirectorHead,
    ctrl_augment,
    extra_param_count,
    make_head,
    prepare_batch,
    total_loss,
)
from dasc.errors import ConfigError, UnsupportedCompositionError
from dasc.model import Batch, ModelConfig, Seq2SeqModel
from dasc.synthlang import (
    SEP,
    AttributeAssignment,
    CorpusConfig,
    DialogueSample,
    Value,
    build_default_schema,
    build_vocab,
    generate_corpus,
)
from dasc.tensor import Tensor, grad_check, no_grad


def sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def bce(z, y):
    p = sig(z)
    return -(y * math.log(p) + (1 - y) * math.log(1 - p))


def hand_batch(tokens, gold_values):
    sample = DialogueSample((7,), tuple(tokens[:-1]), AttributeAssignment(tuple(gold_values)))
    out = np.array([tokens])
    return Batch(
        enc_ids=np.array([[1, 7]]),
        enc_mask=np.ones((1, 2), dtype=bool),
        dec_in=np.zeros_like(out),
        dec_out=out,
        dec_mask=np.ones(out.shape),
        samples=[sample],
    )


@pytest.fixture(scope="module")
def lang():
    schema = build_default_schema()
    vocab = build_vocab(schema)
    samples = generate_corpus(CorpusConfig(n_samples=16, seed=9), schema, vocab)
    return schema, vocab, samples


# --- parameter formulas -------------------------------------------------------


@pytest.mark.parametrize(
    "p, expected",
    [(512, 15.94e6), (1024, 31.88e6), (2048, 63.75e6), (4096, 127.50e6)],
)
def test_dasc_extra_params_table(p, expected):
    got = extra_param_count("dasc", d=768, V=21128, K=13, p=p)
    assert abs(got - expected) / expected < 1e-3


def test_director_extra_params_table():
    got = extra_param_count("director", d=768, V=21128, K=13)
    assert got == 210_941_952
    assert abs(got - 210.98e6) / 210.98e6 < 1e-3


def test_extra_params_match_instances():
    d, V, K, p = 16, 50, 5, 8
    assert DirectorHead(d, V, K).weight_params() == extra_param_count("director", d, V, K)
    assert DirectorHead(d, V, K).bias_params() == V * K
    assert DascHead(d, V, K, p).n_params() == extra_param_count("dasc", d, V, K, p)
    assert extra_param_count("ctrl", d, V, K) == 0
    with pytest.raises(ConfigError):
        extra_param_count("dasc", d, V, K)
    with pytest.raises(ConfigError):
        extra_param_count("fudge", d, V, K)


# --- director ---------------------------------------------------------------


def test_director_token_logits_shape_and_zero():
    head = DirectorHead(4, 6, 3)
    assert head.token_logits(Tensor(np.zeros((2, 4)))).shape == (2, 3, 6)
    np.testing.assert_array_equal(head.token_logits(Tensor(np.zeros(4))).data, 0.0)


def test_director_token_logits_per_row_oracle():
    rng = np.random.default_rng(0)
    head = DirectorHead(4, 6, 3)
    head.params["bias"].data = rng.normal(size=18)
    h = rng.normal(size=4)
    rows = head.token_logits(Tensor(h)).data
    W = head.params["weight"].data
    for k in range(3):
        Wk = W[:, k * 6:(k + 1) * 6].T  # (V, d)
        np.testing.assert_allclose(rows[k], Wk @ h + head.params["bias"].data[k * 6:(k + 1) * 6], atol=1e-12)


def test_director_pencil_losses():
    # d=2, V=3, K=1, two target tokens, attribute is ONE
    head = DirectorHead(2, 3, 1)
    head.params["weight"].data = np.array([[1.0, -1.0, 0.5], [0.0, 2.0, -1.0]])
    head.params["bias"].data = np.array([0.1, 0.0, -0.2])
    h = np.array([[[1.0, 0.0], [0.5, 1.0]]])
    batch = hand_batch([1, 2], [Value.ONE])
    l_t, l_reg = head.losses(Tensor(h), batch)

    z = [[1.0 + 0.1, -1.0, 0.5 - 0.2], [0.5 + 0.1, -0.5 + 2.0, 0.25 - 1.0 - 0.2]]
    exp_t = (bce(z[0][1], 1) + bce(z[1][2], 1)) / 2
    off = [(sig(z[0][0]) - 0.5) ** 2, (sig(z[0][2]) - 0.5) ** 2,
           (sig(z[1][0]) - 0.5) ** 2, (sig(z[1][1]) - 0.5) ** 2]
    assert l_t.item() == pytest.approx(exp_t, abs=1e-12)
    assert l_reg.item() == pytest.approx(sum(off) / 4, abs=1e-12)


def test_director_phi_attribute_is_ignored():
    head = DirectorHead(2, 3, 2, seed=3)
    h = Tensor(np.random.default_rng(1).normal(size=(1, 2, 2)))
    l_both, _ = head.losses(h, hand_batch([1, 2], [Value.ONE, Value.PHI]))
    # with attribute 1 inapplicable only attribute 0's BCE remains
    only = DirectorHead(2, 3, 1)
    only.params["weight"].data = head.params["weight"].data[:, :3].copy()
    only.params["bias"].data = head.params["bias"].data[:3].copy()
    l_one, _ = only.losses(h, hand_batch([1, 2], [Value.ONE]))
    assert l_both.item() == pytest.approx(l_one.item(), abs=1e-12)


def test_director_bias_is_signed_sum():
    rng = np.random.default_rng(2)
    head = DirectorHead(4, 5, 3)
    h = Tensor(rng.normal(size=(1, 4)))
    signs = np.array([[1.0, -1.0, 0.0]])
    rows = head.token_logits(h).data[0]
    np.testing.assert_allclose(head.bias(h, signs)[0], rows[0] - rows[1], atol=1e-12)
    np.testing.assert_allclose(head.signed_rows(h.reshape(4), signs[0]), [rows[0], -rows[1]], atol=1e-12)


# --- dasc -------------------------------------------------------------------


def dasc_fixture():
    # d=2, V=3, K=2, p=2 with hand-set parameters
    head = DascHead(2, 3, 2, p=2)
    head.params["atemb"].data = np.array([[0.0, 0.0], [1.0, -1.0], [0.5, 2.0]])
    # column block k is (W^k)^T
    W1 = np.array([[1.0, 0.0], [0.0, 1.0]])
    W2 = np.array([[0.0, 2.0], [-1.0, 0.0]])
    head.params["proj"].data = np.concatenate([W1.T, W2.T], axis=1)
    head.params["v"].data = np.array([[1.0, 1.0], [0.5, -0.5]])
    return head, W1, W2


def test_dasc_context_embed_matches_projection():
    head, W1, W2 = dasc_fixture()
    h = np.array([0.3, -0.7])
    ctx = head.context_embed(Tensor(h)).data
    np.testing.assert_allclose(ctx[0], W1 @ h, atol=1e-12)
    np.testing.assert_allclose(ctx[1], W2 @ h, atol=1e-12)
    np.testing.assert_allclose(head.context_embed(Tensor(h), k=1).data, W2 @ h, atol=1e-12)
    np.testing.assert_allclose(head.projection(1), W2)


def test_dasc_pencil_losses():
    head, W1, W2 = dasc_fixture()
    h = np.array([1.0, 2.0])
    batch = hand_batch([2], [Value.ONE, Value.ZERO])
    l_t, l_s = head.losses(Tensor(h[None, None]), batch)
    h1, h2 = W1 @ h, W2 @ h  # [1, 2], [4, -1]
    e = np.array([0.5, 2.0])
    exp_t = (bce(h1 @ e, 1) + bce(h2 @ e, 0)) / 2
    exp_s = (bce(h1 @ [1.0, 1.0], 1) + bce(h2 @ [0.5, -0.5], 0)) / 2
    assert l_t.item() == pytest.approx(exp_t, abs=1e-12)
    assert l_s.item() == pytest.approx(exp_s, abs=1e-12)
    assert head.token_logit(head.context_embed(Tensor(h), k=0), 2).item() == pytest.approx(h1 @ e, abs=1e-12)


def test_dasc_interpolation_mean_example():
    head = DascHead(2, 2, 2, p=2)
    head.params["atemb"].data = np.eye(2)
    head.params["proj"].data = np.array([[2.0, 0.0, 0.0, 4.0], [0.0, 0.0, 0.0, 0.0]])
    h = Tensor(np.array([[1.0, 0.0]]))
    np.testing.assert_allclose(head.interpolated(h, np.array([[1.0, 1.0]]))[0], [1.0, 2.0], atol=1e-12)
    np.testing.assert_allclose(head.bias(h, np.array([[1.0, 1.0]]))[0], [1.0, 2.0], atol=1e-12)
    np.testing.assert_allclose(head.bias(h, np.array([[0.0, 0.0]]))[0], [0.0, 0.0], atol=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_dasc_bias_is_linear_and_sign_antisymmetric(seed):
    rng = np.random.default_rng(seed)
    head = DascHead(6, 9, 4, p=5, seed=seed % 100)
    h1, h2 = rng.normal(size=(1, 6)), rng.normal(size=(1, 6))
    a, b = rng.normal(size=2)
    signs = rng.choice([-1.0, 0.0, 1.0], size=(1, 4))
    combined = head.bias(Tensor(a * h1 + b * h2), signs)
    np.testing.assert_allclose(combined, a * head.bias(Tensor(h1), signs) + b * head.bias(Tensor(h2), signs), atol=1e-12)
    np.testing.assert_allclose(head.bias(Tensor(h1), -signs), -head.bias(Tensor(h1), signs), atol=1e-12)


def test_dasc_single_attribute_bias_is_projection_dot_atemb():
    rng = np.random.default_rng(5)
    head = DascHead(6, 9, 4, p=5)
    h = rng.normal(size=6)
    signs = np.array([[0.0, 0.0, 1.0, 0.0]])
    expected = head.params["atemb"].data @ (head.projection(2) @ h)
    np.testing.assert_allclose(head.bias(Tensor(h[None]), signs)[0], expected, atol=1e-12)


def test_dasc_two_attribute_bias_is_mean_of_singles():
    rng = np.random.default_rng(6)
    head = DascHead(6, 9, 4, p=5)
    h = Tensor(rng.normal(size=(1, 6)))
    b0 = head.bias(h, np.array([[1.0, 0, 0, 0]]))
    b3 = head.bias(h, np.array([[0, 0, 0, -1.0]]))
    np.testing.assert_allclose(head.bias(h, np.array([[1.0, 0, 0, -1.0]])), (b0 + b3) / 2, atol=1e-12)


def test_atemb_is_shared_across_attributes():
    head = DascHead(4, 7, 3, p=2)
    assert [k for k in head.params if "atemb" in k] == ["atemb"]
    h = Tensor(np.random.default_rng(0).normal(size=(1, 4)))
    before = [head.bias(h, np.eye(3)[k][None]) for k in range(3)]
    head.params["atemb"].data[5] += 1.0
    after = [head.bias(h, np.eye(3)[k][None]) for k in range(3)]
    for b, a in zip(before, after):
        changed = np.flatnonzero(~np.isclose(a, b))
        assert changed.tolist() == [5]


# --- gradients on the real losses --------------------------------------------


def grad_setup(lang, method):
    schema, vocab, samples = lang
    cfg = ModelConfig(vocab_size=len(vocab), d_model=8, n_enc_layers=1, n_dec_layers=1,
                      n_heads=2, d_ffn=16, max_len=24, init_std=0.5)
    model = Seq2SeqModel(cfg, seed=0)
    if method == "director":
        head = DirectorHead(8, len(vocab), schema.K, seed=1, init_std=0.5)
    elif method == "dasc":
        head = DascHead(8, len(vocab), schema.K, p=4, seed=1, init_std=0.5)
    else:
        head = None
    batch = prepare_batch(method, samples[:2], schema, vocab)
    return model, head, batch


def test_director_head_loss_gradient(lang):
    model, head, batch = grad_setup(lang, "director")
    with no_grad():
        hidden, _ = model.forward(batch)
    h = Tensor(hidden.data, requires_grad=True)

    def f(_):
        l_t, l_reg = head.losses(h, batch)
        return l_t + l_reg

    assert grad_check(f, head.parameters() + [h], max_coords=80) <= 1e-4


def test_dasc_head_loss_gradient(lang):
    model, head, batch = grad_setup(lang, "dasc")
    with no_grad():
        hidden, _ = model.forward(batch)
    h = Tensor(hidden.data, requires_grad=True)

    def f(_):
        l_t, l_s = head.losses(h, batch)
        return l_t + l_s

    assert grad_check(f, head.parameters() + [h], max_coords=80) <= 1e-4


@pytest.mark.parametrize("method", ["dasc", "director", "ctrl"])
def test_full_training_loss_gradient(lang, method):
    model, head, batch = grad_setup(lang, method)
    params = model.parameters() + (head.parameters() if head else [])
    f = lambda _: total_loss(method, model, head, batch, beta=0.1, lambda_reg=1.0).tensor
    # key biases have an exactly-zero gradient (softmax shift invariance); a wider
    # step keeps their differencing roundoff below the tolerance
    assert grad_check(f, params, eps=1e-4, max_coords=25) <= 1e-4


def test_total_loss_composition(lang):
    model, head, batch = grad_setup(lang, "dasc")
    with no_grad():
        parts = total_loss("dasc", model, head, batch, beta=0.3)
    assert parts.total == pytest.approx(parts.l_clm + 0.3 * (parts.l_s + parts.l_t), abs=1e-12)
    assert parts.l_reg == 0.0
    model, head, batch = grad_setup(lang, "director")
    with no_grad():
        parts = total_loss("director", model, head, batch, beta=0.3, lambda_reg=2.0)
    assert parts.total == pytest.approx(parts.l_clm + 0.3 * parts.l_t + 2.0 * parts.l_reg, abs=1e-12)
    assert parts.l_s == 0.0
    assert set(parts.as_dict()) == {"l_clm", "l_t", "l_s", "l_reg", "total"}


# --- ctrl -------------------------------------------------------------------


def test_ctrl_augment_appends_codes_in_aspect_order(lang):
    schema, vocab, samples = lang
    s = samples[0]
    out = ctrl_augment(s.context, s.gold, schema, vocab)
    assert out[: len(s.context)] == list(s.context)
    assert out[len(s.context) - 1] == SEP
    assert out[len(s.context):] == [vocab.control_code(n) for n in s.gold.ones(schema)]


def test_ctrl_augment_rejects_existing_codes(lang):
    schema, vocab, samples = lang
    s = samples[0]
    with pytest.raises(ConfigError):
        ctrl_augment(ctrl_augment(s.context, s.gold, schema, vocab), s.gold, schema, vocab)


def test_ctrl_augment_rejects_composition(lang):
    schema, vocab, samples = lang
    both = AttributeAssignment.with_ones(schema, ["alpha", "happiness", "surprise", "question"])
    with pytest.raises(UnsupportedCompositionError):
        ctrl_augment(samples[0].context, both, schema, vocab)
    missing = AttributeAssignment.with_ones(schema, ["happiness"])
    with pytest.raises(UnsupportedCompositionError):
        ctrl_augment(samples[0].context, missing, schema, vocab)


def test_make_head_dispatch():
    assert make_head("baseline", 4, 5, 2) is None
    assert isinstance(make_head("director", 4, 5, 2), DirectorHead)
    assert isinstance(make_head("dasc", 4, 5, 2, p=3), DascHead)
    with pytest.raises(ConfigError):
        make_head("rerank", 4, 5, 2)
