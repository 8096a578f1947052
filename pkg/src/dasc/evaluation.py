"""Control accuracy, Distinct-n, robustness suite, alpha sweep and attribute-space geometry."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.metrics import silhouette_score

from .controllers import DascHead
from .decoding import DecodeConfig, GenerationResult, decode_many
from .errors import ConfigError, DataError
from .model import Seq2SeqModel, make_batch
from .synthlang import (
    EOS,
    PAD,
    AttributeAssignment,
    AttributeSchema,
    DialogueSample,
    Vocab,
    oracle_classify,
)
from .tensor import Tensor, no_grad

ASPECT_KEYS = {"style": "acc_style", "emotion": "acc_emotion", "question": "acc_question"}


@dataclass
class EvalReport:
    method: str
    n_samples: int
    accuracy: dict[str, float]
    average: float
    distinct_2: float
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for v in self.accuracy.values():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"accuracy {v} outside [0, 1]")

    @property
    def acc_style(self) -> float:
        return self.accuracy.get("style", float("nan"))

    @property
    def acc_emotion(self) -> float:
        return self.accuracy.get("emotion", float("nan"))

    @property
    def acc_question(self) -> float:
        return self.accuracy.get("question", float("nan"))

    def to_dict(self) -> dict:
        d = asdict(self)
        for aspect, value in self.accuracy.items():
            d[ASPECT_KEYS.get(aspect, f"acc_{aspect}")] = value
        return d

    def write(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")


def control_accuracy(
    generations: Sequence[Sequence[int]],
    targets: Sequence[AttributeAssignment],
    schema: AttributeSchema,
    vocab: Vocab,
) -> dict[str, float]:
    """Per aspect, fraction of generations whose oracle class equals the target's ONE.

    Samples whose target has no single ONE in an aspect are skipped for that aspect.
    """
    if len(generations) == 0:
        raise DataError("control accuracy of an empty generation set is undefined")
    if len(generations) != len(targets):
        raise DataError("one target assignment per generation is required")
    hits = {a.name: 0 for a in schema.aspects}
    counts = {a.name: 0 for a in schema.aspects}
    for toks, tgt in zip(generations, targets):
        pred = oracle_classify(_strip(toks), schema, vocab)
        for aspect in schema.aspects:
            want = tgt.target(schema, aspect.name)
            if want is None:
                continue
            counts[aspect.name] += 1
            hits[aspect.name] += pred[aspect.name] == want
    return {k: hits[k] / counts[k] for k in hits if counts[k]}


def _strip(tokens: Sequence[int]) -> list[int]:
    return [t for t in tokens if t not in (EOS, PAD)]


def distinct_n(generations: Sequence[Sequence[int]], n: int = 2, per_utterance: bool = False) -> float:
    """Unique n-grams over total n-grams, corpus-level unless ``per_utterance``.

    EOS and PAD are dropped first. With no n-grams at all the result is 0.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    grams = [
        [tuple(s[i:i + n]) for i in range(len(s) - n + 1)]
        for s in (_strip(g) for g in generations)
    ]
    if per_utterance:
        ratios = [len(set(g)) / len(g) for g in grams if g]
        if not ratios:
            warnings.warn("no n-grams to score; distinct-n defined as 0", RuntimeWarning, stacklevel=2)
            return 0.0
        return float(np.mean(ratios))
    total = sum(len(g) for g in grams)
    if total == 0:
        warnings.warn("no n-grams to score; distinct-n defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return len({x for g in grams for x in g}) / total


def gold_targets(samples: Sequence[DialogueSample], schema: AttributeSchema) -> list[AttributeAssignment]:
    """Gold ONE attributes with every other attribute left inapplicable."""
    return [AttributeAssignment.with_ones(schema, s.gold.ones(schema)) for s in samples]


def report(
    method: str,
    generations: Sequence[GenerationResult],
    targets: Sequence[AttributeAssignment],
    schema: AttributeSchema,
    vocab: Vocab,
    config: dict | None = None,
) -> EvalReport:
    toks = [g.tokens for g in generations]
    acc = control_accuracy(toks, targets, schema, vocab)
    return EvalReport(
        method=method,
        n_samples=len(toks),
        accuracy=acc,
        average=float(np.mean(list(acc.values()))),
        distinct_2=distinct_n(toks, 2),
        config=config or {},
    )


def evaluate(
    model: Seq2SeqModel,
    head,
    samples: Sequence[DialogueSample],
    cfg: DecodeConfig,
    schema: AttributeSchema,
    vocab: Vocab,
) -> tuple[EvalReport, list[GenerationResult]]:
    """Standard evaluation: decode every context under its gold attributes."""
    targets = gold_targets(samples, schema)
    gens = decode_many(model, head, [s.context for s in samples], targets, cfg, schema, vocab)
    return report(cfg.method, gens, targets, schema, vocab, cfg.to_dict()), gens


def robustness_assignments(
    samples: Sequence[DialogueSample], schema: AttributeSchema, aspect: str = "emotion"
) -> tuple[list[tuple[int, ...]], list[AttributeAssignment]]:
    """Every context paired with every class of ``aspect``; other aspects keep their gold ONE."""
    forced = schema.aspect(aspect).attributes
    contexts, targets = [], []
    for s in samples:
        keep = [n for n in s.gold.ones(schema) if schema.aspect_of(n).name != aspect]
        for cls in forced:
            contexts.append(s.context)
            targets.append(AttributeAssignment.with_ones(schema, keep + [cls]))
    return contexts, targets


def robustness_suite(
    model: Seq2SeqModel,
    head,
    samples: Sequence[DialogueSample],
    cfg: DecodeConfig,
    schema: AttributeSchema,
    vocab: Vocab,
) -> tuple[EvalReport, list[GenerationResult], list[AttributeAssignment]]:
    """Force each emotion class on each context and decode greedily."""
    greedy = DecodeConfig(**{**cfg.to_dict(), "strategy": "greedy"}) if cfg.method != "rerank" else cfg
    contexts, targets = robustness_assignments(samples, schema)
    gens = decode_many(model, head, contexts, targets, greedy, schema, vocab)
    return report(cfg.method, gens, targets, schema, vocab, greedy.to_dict()), gens, targets


def alpha_sweep(
    model: Seq2SeqModel,
    head,
    samples: Sequence[DialogueSample],
    cfg: DecodeConfig,
    schema: AttributeSchema,
    vocab: Vocab,
    alphas: Sequence[float] = (0.0, 0.5, 1.0, 2.0, 4.0),
) -> list[tuple[float, EvalReport]]:
    if cfg.method not in ("director", "dasc"):
        raise ConfigError("the alpha sweep needs a director or dasc head")
    rows = []
    for a in alphas:
        rep, _ = evaluate(model, head, samples, DecodeConfig(**{**cfg.to_dict(), "alpha": float(a)}), schema, vocab)
        rows.append((float(a), rep))
    return rows


def sweep_tsv(rows: Sequence[tuple[float, EvalReport]]) -> str:
    lines = ["alpha\tacc_style\tacc_emotion\tacc_question\taverage\tdistinct_2"]
    for a, r in rows:
        lines.append(f"{a!r}\t{r.acc_style!r}\t{r.acc_emotion!r}\t{r.acc_question!r}\t{r.average!r}\t{r.distinct_2!r}")
    return "\n".join(lines) + "\n"


# --- attribute-space geometry ------------------------------------------------


def _decoder_states(model: Seq2SeqModel, samples: Sequence[DialogueSample], batch_size: int = 128):
    """Yield (hidden (B,T,d), dec_mask (B,T), chunk) for teacher-forced responses."""
    with no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            batch = make_batch(chunk)
            hidden, _ = model.forward(batch)
            yield hidden.data, batch.dec_mask.astype(np.float64), chunk


def _masked_mean(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean over the time axis (1) of ``x`` restricted to ``mask``."""
    w = mask.reshape(mask.shape + (1,) * (x.ndim - 2))
    return (x * w).sum(axis=1) / mask.sum(axis=1).reshape((-1,) + (1,) * (x.ndim - 2))


def context_embeddings(
    model: Seq2SeqModel, head: DascHead, samples: Sequence[DialogueSample], schema: AttributeSchema, aspect: str = "emotion"
) -> tuple[np.ndarray, list[str]]:
    """Position-averaged ĥ^k of each response's gold ``aspect`` attribute, with its label."""
    points, labels = [], []
    for hidden, mask, chunk in _decoder_states(model, samples):
        ctx = _masked_mean(head.context_embed(Tensor(hidden)).data, mask)  # (B, K, p)
        for row, s in zip(ctx, chunk):
            label = s.gold.target(schema, aspect)
            if label is None:
                raise DataError(f"sample has no single gold {aspect} attribute")
            points.append(row[schema.index(label)])
            labels.append(label)
    return np.array(points), labels


def hidden_means(model: Seq2SeqModel, samples: Sequence[DialogueSample]) -> np.ndarray:
    """Position-averaged final decoder states of each response."""
    return np.concatenate([_masked_mean(h, m) for h, m, _ in _decoder_states(model, samples)])


def separation_score(points: np.ndarray, labels: Sequence) -> float:
    """Mean silhouette coefficient under cosine distance."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise DataError("separation needs at least two classes")
    if counts.min() < 2:
        raise DataError("separation needs at least two points per class")
    norms = np.linalg.norm(points, axis=1)
    if np.any(norms == 0) or np.ptp(points / norms[:, None], axis=0).max() == 0:
        warnings.warn("degenerate points (zero or all identical directions); separation defined as 0",
                      RuntimeWarning, stacklevel=2)
        return 0.0
    return float(silhouette_score(points, labels, metric="cosine"))


def embedding_export(
    model: Seq2SeqModel,
    head: DascHead,
    samples: Sequence[DialogueSample],
    schema: AttributeSchema,
    vocab: Vocab,
    out_dir: str | Path,
    aspect: str = "emotion",
) -> tuple[Path, Path]:
    """Write atemb.tsv (one row per vocab token) and ctxemb.tsv (one row per sample)."""
    if not isinstance(head, DascHead):
        raise ConfigError("embedding export needs a dasc head")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atemb = head.params["atemb"].data
    p = atemb.shape[1]
    cols = "\t".join(f"e{i}" for i in range(p))
    lines = [f"id\ttoken\ttag\t{cols}"]
    for i, (tok, tag) in enumerate(zip(vocab.tokens, vocab.tags)):
        lines.append("\t".join([str(i), tok, tag] + [repr(float(x)) for x in atemb[i]]))
    a_path = out / "atemb.tsv"
    a_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    points, labels = context_embeddings(model, head, samples, schema, aspect)
    lines = [f"index\tlabel\t{cols}"]
    for i, (row, label) in enumerate(zip(points, labels)):
        lines.append("\t".join([str(i), label] + [repr(float(x)) for x in row]))
    c_path = out / "ctxemb.tsv"
    c_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return a_path, c_path


def read_embedding_tsv(path: str | Path, n_meta: int) -> tuple[list[list[str]], np.ndarray]:
    """Parse an exported TSV into its leading metadata columns and a float matrix."""
    rows = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    meta, vals = [], []
    for r in rows:
        f = r.split("\t")
        meta.append(f[:n_meta])
        vals.append([float(x) for x in f[n_meta:]])
    return meta, np.array(vals)


def composition_rate(
    generations: Sequence[Sequence[int]], attrs: Sequence[str], schema: AttributeSchema, vocab: Vocab
) -> float:
    """Fraction of generations containing at least one marker of every attribute in ``attrs``."""
    tags = [f"{schema.aspect_of(a).name}:{a}" for a in attrs]
    hits = 0
    for g in generations:
        present = {vocab.tags[t] for t in g}
        hits += all(t in present for t in tags)
    return hits / len(generations) if generations else 0.0
