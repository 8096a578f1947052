from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dasc.errors import ConfigError, DataError
from dasc.synthlang import (
    BOS,
    EOS,
    PERIOD,
    QMARK,
    SEP,
    AttributeAssignment,
    CorpusConfig,
    Value,
    Vocab,
    build_default_schema,
    build_vocab,
    generate_corpus,
    load_corpus,
    oracle_classify,
    parse_attrs,
    save_corpus,
    soft_scores,
    split,
)


@pytest.fixture(scope="module")
def schema():
    return build_default_schema()


@pytest.fixture(scope="module")
def vocab(schema):
    return build_vocab(schema)


@pytest.fixture(scope="module")
def corpus(schema, vocab):
    return generate_corpus(CorpusConfig(n_samples=2000, seed=3), schema, vocab)


def test_schema_shape(schema):
    assert schema.K == 13
    assert [a.name for a in schema.aspects] == ["style", "emotion", "question"]
    assert len(schema.aspect("emotion").attributes) == 8


def test_unknown_attribute_lists_valid_names(schema):
    with pytest.raises(ConfigError, match="valid names: .*happiness"):
        schema.index("joy")


def test_vocab_size_and_specials(vocab):
    assert len(vocab) == 239
    assert vocab.tokens[:6] == ["<pad>", "<bos>", "<eos>", "<sep>", "?", "."]


def test_lexicons_are_disjoint(schema, vocab):
    marker_tags = vocab.marker_tags()
    seen: set[int] = set()
    for tag in marker_tags:
        ids = set(vocab.lexicon(tag))
        assert ids and not ids & seen
        seen |= ids
    # default classes have no lexicon
    assert vocab.lexicon("style:neutral") == []
    assert vocab.lexicon("emotion:none") == []


def test_vocab_tsv_round_trip(vocab):
    assert Vocab.from_tsv(vocab.to_tsv()) == vocab


def test_encode_decode(vocab):
    ids = vocab.encode("wh01 w03 like_02 ?")
    assert vocab.decode(ids) == "wh01 w03 like_02 ?"
    with pytest.raises(DataError):
        vocab.encode("nonsense_token")


def test_corpus_is_deterministic(schema, vocab):
    cfg = CorpusConfig(n_samples=50, seed=11)
    assert generate_corpus(cfg, schema, vocab) == generate_corpus(cfg, schema, vocab)
    other = generate_corpus(CorpusConfig(n_samples=50, seed=12), schema, vocab)
    assert other != generate_corpus(cfg, schema, vocab)


def test_prefix_stability(schema, vocab):
    # sample i depends only on (seed, i)
    short = generate_corpus(CorpusConfig(n_samples=10, seed=5), schema, vocab)
    long = generate_corpus(CorpusConfig(n_samples=30, seed=5), schema, vocab)
    assert long[:10] == short


def test_oracle_recovers_gold(corpus, schema, vocab):
    for s in corpus:
        pred = oracle_classify(s.response, schema, vocab)
        assert sorted(pred.values()) == sorted(s.gold.ones(schema))


def test_response_shape(corpus, schema, vocab):
    for s in corpus:
        assert 4 <= len(s.response) <= 12
        assert s.context[-1] == SEP
        is_q = s.gold.target(schema, "question") == "question"
        assert s.response[-1] == (QMARK if is_q else PERIOD)
        assert (QMARK in s.response) == is_q
        if is_q:
            assert vocab.tags[s.response[0]] == "interrogative"
        assert BOS not in s.response and EOS not in s.response


def test_gold_siblings_are_zero(corpus, schema):
    g = corpus[0].gold
    assert g.n_active == schema.K
    assert sum(v is Value.ONE for v in g.values) == 3


def test_emotion_frequencies_are_uniform(schema, vocab):
    samples = generate_corpus(CorpusConfig(n_samples=10000, seed=0), schema, vocab)
    counts = Counter(s.gold.target(schema, "emotion") for s in samples)
    assert set(counts) == set(schema.aspect("emotion").attributes)
    for c in counts.values():
        assert abs(c - 1250) <= 150


def test_split_sizes_and_disjointness(schema, vocab):
    samples = generate_corpus(CorpusConfig(n_samples=1000, seed=1), schema, vocab)
    tr, dv, te = split(samples, seed=0)
    assert (len(tr), len(dv), len(te)) == (900, 50, 50)
    assert len(tr) + len(dv) + len(te) == len(samples)


def test_split_empty_part_rejected(corpus):
    with pytest.raises(ConfigError):
        split(corpus[:5])


def test_config_validation(schema, vocab):
    with pytest.raises(ConfigError):
        generate_corpus(CorpusConfig(n_samples=5, len_range=(2, 3)), schema, vocab)
    with pytest.raises(ConfigError):
        generate_corpus(CorpusConfig(n_samples=0), schema, vocab)


def test_topic_cue_always_matches_at_probability_one(schema, vocab):
    samples = generate_corpus(CorpusConfig(n_samples=200, topic_cue_prob=1.0), schema, vocab)
    for s in samples:
        topics = [vocab.tags[t] for t in s.context if vocab.tags[t].startswith("topic:")]
        assert topics == [f"topic:{s.gold.target(schema, 'emotion')}"]


def test_save_load_round_trip(tmp_path, corpus, schema, vocab):
    save_corpus(tmp_path, corpus[:20], schema, vocab, meta={"seed": 3})
    loaded = load_corpus(tmp_path)
    assert loaded.samples == corpus[:20]
    assert loaded.vocab == vocab
    assert loaded.schema == schema
    assert loaded.meta == {"seed": 3}


def test_load_missing_dir_is_data_error(tmp_path):
    with pytest.raises(DataError):
        load_corpus(tmp_path / "absent")


def test_parse_attrs(schema):
    a = parse_attrs(schema, "emotion=happiness+surprise,style=alpha")
    assert a.ones(schema) == ["alpha", "happiness", "surprise"]
    # siblings of set aspects are PHI, untouched aspects PHI as well
    assert a.n_active == 3
    assert a.target(schema, "emotion") is None
    with pytest.raises(ConfigError, match="valid names"):
        parse_attrs(schema, "emotion=joy")
    with pytest.raises(ConfigError):
        parse_attrs(schema, "mood=happy")


def test_signs_rule(schema):
    a = AttributeAssignment.with_ones(schema, ["like"], siblings=Value.ZERO)
    signs = a.signs()
    assert signs[schema.index("like")] == 1.0
    assert signs[schema.index("anger")] == -1.0
    assert signs[schema.index("alpha")] == 0.0


def test_oracle_examples(schema, vocab):
    r = vocab.encode("wh00 w01 like_00 like_03 anger_02 alpha_01 ?")
    assert oracle_classify(r, schema, vocab) == {"style": "alpha", "emotion": "like", "question": "question"}
    # no markers -> defaults
    assert oracle_classify(vocab.encode("w01 w02 ."), schema, vocab) == {
        "style": "neutral", "emotion": "none", "question": "non_question"}
    # tie keeps the earlier class in schema order
    r = vocab.encode("w01 fear_00 like_00 .")
    assert oracle_classify(r, schema, vocab)["emotion"] == "like"


def test_soft_scores_are_distributions(corpus, schema, vocab):
    for s in corpus[:200]:
        for aspect, probs in soft_scores(s.response, schema, vocab).items():
            assert abs(sum(probs.values()) - 1.0) < 1e-12
            gold = s.gold.target(schema, aspect)
            assert probs[gold] == max(probs.values())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_oracle_exact_on_any_seed(seed):
    schema = build_default_schema()
    vocab = build_vocab(schema)
    for s in generate_corpus(CorpusConfig(n_samples=5, seed=seed), schema, vocab):
        assert sorted(oracle_classify(s.response, schema, vocab).values()) == sorted(s.gold.ones(schema))
