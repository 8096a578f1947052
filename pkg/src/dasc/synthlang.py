"""Synthetic attribute-annotated dialogue corpus with exact rule-based oracles.

Responses are built from disjoint marker lexicons (one per style and emotion
class), a filler lexicon and interrogative openers, so the oracle can recover
every gold label from the tokens alone.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError

PAD, BOS, EOS, SEP, QMARK, PERIOD = range(6)
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<sep>", "?", ".")


class Value(str, enum.Enum):
    ONE = "1"
    ZERO = "0"
    PHI = "phi"


@dataclass(frozen=True)
class Aspect:
    name: str
    attributes: tuple[str, ...]
    kind: str = "lexical"  # "lexical": marker lexicons; "question": signalled by "?"
    default: str | None = None  # lexical class expressed by the absence of markers


@dataclass(frozen=True)
class AttributeSchema:
    aspects: tuple[Aspect, ...]

    def __post_init__(self):
        names = self.attribute_names
        if len(set(names)) != len(names):
            raise ConfigError("attribute names must be globally unique")
        for a in self.aspects:
            if a.kind not in ("lexical", "question"):
                raise ConfigError(f"unknown aspect kind {a.kind!r}")
            if a.kind == "question" and len(a.attributes) != 2:
                raise ConfigError("a question aspect needs exactly two attributes")
            if a.default is not None and a.default not in a.attributes:
                raise ConfigError(f"default {a.default!r} is not an attribute of {a.name!r}")

    @property
    def attribute_names(self) -> tuple[str, ...]:
        return tuple(n for a in self.aspects for n in a.attributes)

    @property
    def K(self) -> int:
        return len(self.attribute_names)

    def index(self, attribute: str) -> int:
        try:
            return self.attribute_names.index(attribute)
        except ValueError:
            valid = ", ".join(self.attribute_names)
            raise ConfigError(f"unknown attribute {attribute!r}; valid names: {valid}") from None

    def aspect(self, name: str) -> Aspect:
        for a in self.aspects:
            if a.name == name:
                return a
        valid = ", ".join(a.name for a in self.aspects)
        raise ConfigError(f"unknown aspect {name!r}; valid aspects: {valid}")

    def aspect_of(self, attribute: str) -> Aspect:
        for a in self.aspects:
            if attribute in a.attributes:
                return a
        self.index(attribute)  # raises with the list of valid names
        raise AssertionError

    def aspect_indices(self, name: str) -> list[int]:
        return [self.index(n) for n in self.aspect(name).attributes]

    def to_dict(self) -> dict:
        return {
            "aspects": [
                {"name": a.name, "attributes": list(a.attributes), "kind": a.kind, "default": a.default}
                for a in self.aspects
            ]
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AttributeSchema":
        return cls(tuple(
            Aspect(a["name"], tuple(a["attributes"]), a.get("kind", "lexical"), a.get("default"))
            for a in d["aspects"]
        ))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_default_schema() -> AttributeSchema:
    return AttributeSchema((
        Aspect("style", ("alpha", "beta", "neutral"), default="neutral"),
        Aspect(
            "emotion",
            ("none", "like", "sadness", "disgust", "anger", "happiness", "fear", "surprise"),
            default="none",
        ),
        Aspect("question", ("question", "non_question"), kind="question"),
    ))


@dataclass(frozen=True)
class AttributeAssignment:
    values: tuple[Value, ...]

    def active(self, k: int) -> bool:
        return self.values[k] is not Value.PHI

    @property
    def n_active(self) -> int:
        return sum(v is not Value.PHI for v in self.values)

    def signs(self) -> np.ndarray:
        """+1 for ONE, -1 for ZERO, 0 for PHI."""
        return np.array([{Value.ONE: 1.0, Value.ZERO: -1.0, Value.PHI: 0.0}[v] for v in self.values])

    def labels(self) -> np.ndarray:
        return np.array([1.0 if v is Value.ONE else 0.0 for v in self.values])

    def mask(self) -> np.ndarray:
        return np.array([0.0 if v is Value.PHI else 1.0 for v in self.values])

    def ones(self, schema: AttributeSchema) -> list[str]:
        return [n for n, v in zip(schema.attribute_names, self.values) if v is Value.ONE]

    def target(self, schema: AttributeSchema, aspect: str) -> str | None:
        """The single ONE attribute of ``aspect``, or None if there is not exactly one."""
        hits = [n for n in schema.aspect(aspect).attributes if self.values[schema.index(n)] is Value.ONE]
        return hits[0] if len(hits) == 1 else None

    def to_dict(self, schema: AttributeSchema) -> dict[str, str]:
        return {n: v.value for n, v in zip(schema.attribute_names, self.values)}

    @classmethod
    def from_dict(cls, schema: AttributeSchema, d: Mapping[str, str]) -> "AttributeAssignment":
        vals = [Value.PHI] * schema.K
        for name, raw in d.items():
            try:
                vals[schema.index(name)] = Value(str(raw))
            except ValueError:
                raise DataError(f"bad attribute value {raw!r} for {name!r}") from None
        return cls(tuple(vals))

    @classmethod
    def with_ones(
        cls, schema: AttributeSchema, ones: Iterable[str], siblings: Value = Value.PHI
    ) -> "AttributeAssignment":
        """Set ``ones`` to ONE; attributes sharing an aspect with them get ``siblings``."""
        vals = [Value.PHI] * schema.K
        ones = list(ones)
        for name in ones:
            for sib in schema.aspect_of(name).attributes:
                vals[schema.index(sib)] = siblings
        for name in ones:
            vals[schema.index(name)] = Value.ONE
        return cls(tuple(vals))


def parse_attrs(schema: AttributeSchema, spec: str) -> AttributeAssignment:
    """Parse ``"emotion=happiness+surprise,style=alpha"``; siblings become PHI."""
    ones: list[str] = []
    for part in filter(None, (p.strip() for p in spec.split(","))):
        if "=" not in part:
            raise ConfigError(f"expected aspect=attribute, got {part!r}")
        aspect_name, rhs = (s.strip() for s in part.split("=", 1))
        aspect = schema.aspect(aspect_name)
        for attr in rhs.split("+"):
            if attr not in aspect.attributes:
                valid = ", ".join(aspect.attributes)
                raise ConfigError(f"unknown {aspect_name} attribute {attr!r}; valid names: {valid}")
            ones.append(attr)
    return AttributeAssignment.with_ones(schema, ones)


@dataclass(frozen=True)
class DialogueSample:
    context: tuple[int, ...]
    response: tuple[int, ...]
    gold: AttributeAssignment


class Vocab:
    """Token strings, ids and the lexicon tag of every token."""

    def __init__(self, tokens: Sequence[str], tags: Sequence[str]):
        if len(tokens) != len(tags) or len(set(tokens)) != len(tokens):
            raise DataError("vocab tokens must be unique and tagged")
        self.tokens = list(tokens)
        self.tags = list(tags)
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        self._lexicons: dict[str, list[int]] = {}
        for i, tag in enumerate(self.tags):
            self._lexicons.setdefault(tag, []).append(i)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens and self.tags == other.tags

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise DataError(f"unknown token {token!r}") from None

    def lexicon(self, tag: str) -> list[int]:
        return list(self._lexicons.get(tag, []))

    def control_code(self, attribute: str) -> int:
        return self.id(f"<attr:{attribute}>")

    def encode(self, text: str) -> list[int]:
        return [self.id(t) for t in text.split()]

    def decode(self, ids: Iterable[int], strip: bool = True) -> str:
        skip = {PAD, BOS, EOS} if strip else set()
        return " ".join(self.tokens[i] for i in ids if i not in skip)

    def marker_tags(self) -> list[str]:
        return [t for t in self._lexicons if t.count(":") == 1 and not t.startswith("topic:")]

    def to_tsv(self) -> str:
        return "".join(f"{i}\t{tok}\t{tag}\n" for i, (tok, tag) in enumerate(zip(self.tokens, self.tags)))

    @classmethod
    def from_tsv(cls, text: str) -> "Vocab":
        tokens, tags = [], []
        for n, line in enumerate(text.splitlines()):
            if not line.strip():
                continue
            idx, tok, tag = line.split("\t")
            if int(idx) != n:
                raise DataError(f"vocab.tsv ids must be dense and ordered (line {n + 1})")
            tokens.append(tok)
            tags.append(tag)
        return cls(tokens, tags)


def build_vocab(
    schema: AttributeSchema,
    marker_sizes: Mapping[str, int] | None = None,
    n_filler: int = 60,
    n_interrogative: int = 12,
    n_topic: int = 3,
) -> Vocab:
    """Specials, control codes, per-class marker lexicons, topics, fillers, openers.

    ``marker_sizes`` maps aspect name to lexicon size per class (default 20
    for ``style``, 12 otherwise). Default classes get no lexicon.
    """
    sizes = {"style": 20}
    sizes.update(marker_sizes or {})
    tokens = list(SPECIAL_TOKENS)
    tags = ["special"] * len(tokens)
    for name in schema.attribute_names:
        tokens.append(f"<attr:{name}>")
        tags.append("control")
    for aspect in schema.aspects:
        if aspect.kind != "lexical":
            continue
        for attr in aspect.attributes:
            if attr == aspect.default:
                continue
            for i in range(sizes.get(aspect.name, 12)):
                tokens.append(f"{attr}_{i:02d}")
                tags.append(f"{aspect.name}:{attr}")
    emotion = next((a for a in schema.aspects if a.name == "emotion"), None)
    if emotion is not None:
        for attr in emotion.attributes:
            for i in range(n_topic):
                tokens.append(f"about_{attr}_{i}")
                tags.append(f"topic:{attr}")
    tokens += [f"w{i:02d}" for i in range(n_filler)]
    tags += ["filler"] * n_filler
    tokens += [f"wh{i:02d}" for i in range(n_interrogative)]
    tags += ["interrogative"] * n_interrogative
    return Vocab(tokens, tags)


def oracle_classify(response: Sequence[int], schema: AttributeSchema, vocab: Vocab) -> dict[str, str]:
    """Exact rule-based labeler: one predicted attribute per aspect."""
    tags = [vocab.tags[t] for t in response]
    out: dict[str, str] = {}
    for aspect in schema.aspects:
        if aspect.kind == "question":
            out[aspect.name] = aspect.attributes[0] if QMARK in response else aspect.attributes[1]
            continue
        best, best_count = None, 0
        for attr in aspect.attributes:
            c = tags.count(f"{aspect.name}:{attr}")
            if c > best_count:  # strict: ties keep the earlier class
                best, best_count = attr, c
        out[aspect.name] = best if best is not None else (aspect.default or aspect.attributes[0])
    return out


def soft_scores(response: Sequence[int], schema: AttributeSchema, vocab: Vocab) -> dict[str, dict[str, float]]:
    """Smoothed per-aspect class probabilities used by the rerank baseline.

    Lexical aspects: Laplace-smoothed marker-count ratios, where the default
    class counts one pseudo-marker when no markers are present. Question
    aspects: 0.9/0.1 split on the presence of "?".
    """
    tags = [vocab.tags[t] for t in response]
    out: dict[str, dict[str, float]] = {}
    for aspect in schema.aspects:
        if aspect.kind == "question":
            hit = QMARK in response
            q, nq = aspect.attributes
            out[aspect.name] = {q: 0.9 if hit else 0.1, nq: 0.1 if hit else 0.9}
            continue
        counts = {a: tags.count(f"{aspect.name}:{a}") for a in aspect.attributes}
        if aspect.default is not None and not any(counts.values()):
            counts[aspect.default] = 1
        total = sum(counts.values()) + len(counts)
        out[aspect.name] = {a: (c + 1) / total for a, c in counts.items()}
    return out


@dataclass
class CorpusConfig:
    n_samples: int = 20000
    seed: int = 0
    len_range: tuple[int, int] = (4, 12)
    context_len: tuple[int, int] = (2, 6)
    question_prob: float = 0.5
    max_markers: int = 3
    # probability that the context's topic token names the response emotion;
    # None leaves topic tokens out of contexts entirely
    topic_cue_prob: float | None = None


def _check_config(cfg: CorpusConfig, schema: AttributeSchema) -> None:
    if cfg.n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    lo, hi = cfg.len_range
    n_lexical = sum(a.kind == "lexical" for a in schema.aspects)
    needed = n_lexical + 2  # one marker per lexical aspect plus opener and "?"
    if lo > hi or lo < needed:
        raise ConfigError(f"len_range {cfg.len_range} too small: responses need at least {needed} tokens")
    clo, chi = cfg.context_len
    if clo < 1 or clo > chi:
        raise ConfigError(f"bad context_len {cfg.context_len}")
    if cfg.max_markers < 1:
        raise ConfigError("max_markers must be >= 1")
    if cfg.topic_cue_prob is not None and not 0.0 <= cfg.topic_cue_prob <= 1.0:
        raise ConfigError("topic_cue_prob must lie in [0, 1]")


def _make_sample(rng: np.random.Generator, cfg: CorpusConfig, schema: AttributeSchema, vocab: Vocab) -> DialogueSample:
    chosen: dict[str, str] = {}
    for aspect in schema.aspects:
        if aspect.kind == "question":
            chosen[aspect.name] = aspect.attributes[0] if rng.random() < cfg.question_prob else aspect.attributes[1]
        else:
            chosen[aspect.name] = aspect.attributes[rng.integers(len(aspect.attributes))]

    filler = vocab.lexicon("filler")
    opener = vocab.lexicon("interrogative")
    is_question = any(
        a.kind == "question" and chosen[a.name] == a.attributes[0] for a in schema.aspects
    )
    length = int(rng.integers(cfg.len_range[0], cfg.len_range[1] + 1))
    interior = length - (2 if is_question else 1)

    marked = [
        a for a in schema.aspects if a.kind == "lexical" and chosen[a.name] != a.default
    ]
    markers: list[int] = []
    for pos, aspect in enumerate(marked):
        lex = vocab.lexicon(f"{aspect.name}:{chosen[aspect.name]}")
        still_needed = len(marked) - pos - 1
        cap = min(cfg.max_markers, interior - len(markers) - still_needed)
        n = int(rng.integers(1, cap + 1))
        markers += [lex[i] for i in rng.integers(len(lex), size=n)]
    body = [filler[i] for i in rng.integers(len(filler), size=interior)]
    slots = rng.choice(interior, size=len(markers), replace=False)
    for slot, tok in zip(slots, markers):
        body[slot] = tok
    response = ([opener[rng.integers(len(opener))]] if is_question else []) + body
    response.append(QMARK if is_question else PERIOD)

    n_ctx = int(rng.integers(cfg.context_len[0], cfg.context_len[1] + 1))
    pool = filler + opener
    context = [pool[i] for i in rng.integers(len(pool), size=n_ctx)]
    if cfg.topic_cue_prob is not None and "emotion" in chosen:
        emotions = schema.aspect("emotion").attributes
        topic = chosen["emotion"] if rng.random() < cfg.topic_cue_prob else emotions[rng.integers(len(emotions))]
        lex = vocab.lexicon(f"topic:{topic}")
        context[rng.integers(n_ctx)] = lex[rng.integers(len(lex))]
    context.append(SEP)

    gold = AttributeAssignment.with_ones(schema, chosen.values(), siblings=Value.ZERO)
    return DialogueSample(tuple(int(t) for t in context), tuple(int(t) for t in response), gold)


def generate_corpus(
    cfg: CorpusConfig,
    schema: AttributeSchema | None = None,
    vocab: Vocab | None = None,
) -> list[DialogueSample]:
    """Deterministic corpus; sample ``i`` depends only on ``(cfg.seed, i)``."""
    schema = schema or build_default_schema()
    vocab = vocab or build_vocab(schema)
    _check_config(cfg, schema)
    return [
        _make_sample(np.random.default_rng([cfg.seed, i]), cfg, schema, vocab)
        for i in range(cfg.n_samples)
    ]


def split(
    samples: Sequence[DialogueSample],
    ratios: Sequence[float] = (0.90, 0.05, 0.05),
    seed: int = 0,
) -> tuple[list[DialogueSample], list[DialogueSample], list[DialogueSample]]:
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three numbers summing to 1, got {ratios}")
    n = len(samples)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * ratios[0]))
    n_dev = int(round(n * ratios[1]))
    parts = (order[:n_train], order[n_train:n_train + n_dev], order[n_train + n_dev:])
    if any(len(p) == 0 for p in parts):
        raise ConfigError(f"split of {n} samples with ratios {tuple(ratios)} leaves an empty part")
    return tuple([samples[i] for i in p] for p in parts)  # type: ignore[return-value]


# --- files ------------------------------------------------------------------


def sample_to_json(sample: DialogueSample, schema: AttributeSchema) -> str:
    return json.dumps({
        "context": list(sample.context),
        "response": list(sample.response),
        "gold": sample.gold.to_dict(schema),
    })


def sample_from_json(line: str, schema: AttributeSchema) -> DialogueSample:
    try:
        rec = json.loads(line)
        return DialogueSample(
            tuple(int(t) for t in rec["context"]),
            tuple(int(t) for t in rec["response"]),
            AttributeAssignment.from_dict(schema, rec["gold"]),
        )
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"malformed corpus record: {exc}") from None


def save_corpus(
    out_dir: str | Path,
    samples: Sequence[DialogueSample],
    schema: AttributeSchema,
    vocab: Vocab,
    meta: Mapping | None = None,
) -> None:
    """Write corpus.jsonl, vocab.tsv, schema.json (and meta.json if given)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "corpus.jsonl", "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(sample_to_json(s, schema) + "\n")
    (out / "vocab.tsv").write_text(vocab.to_tsv(), encoding="utf-8")
    (out / "schema.json").write_text(json.dumps(schema.to_dict(), indent=2), encoding="utf-8")
    if meta is not None:
        (out / "meta.json").write_text(json.dumps(meta, indent=2, default=str), encoding="utf-8")


@dataclass
class Corpus:
    samples: list[DialogueSample]
    schema: AttributeSchema
    vocab: Vocab
    meta: dict = field(default_factory=dict)


def load_corpus(corpus_dir: str | Path) -> Corpus:
    d = Path(corpus_dir)
    try:
        schema = AttributeSchema.from_dict(json.loads((d / "schema.json").read_text(encoding="utf-8")))
        vocab = Vocab.from_tsv((d / "vocab.tsv").read_text(encoding="utf-8"))
        with open(d / "corpus.jsonl", encoding="utf-8") as fh:
            samples = [sample_from_json(line, schema) for line in fh if line.strip()]
    except FileNotFoundError as exc:
        raise DataError(f"corpus directory incomplete: {exc.filename}") from None
    meta_path = d / "meta.json"
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
    return Corpus(samples, schema, vocab, meta)
