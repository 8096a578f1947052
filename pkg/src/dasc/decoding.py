"""Weighted decoding: base logits plus alpha-scaled attribute biases."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .controllers import DascHead, DirectorHead, ctrl_augment
from .errors import ConfigError
from .model import Seq2SeqModel
from .synthlang import BOS, EOS, PAD, SEP, AttributeAssignment, AttributeSchema, Vocab, soft_scores
from .tensor import no_grad

DECODE_METHODS = ("baseline", "ctrl", "director", "dasc", "rerank")


@dataclass
class DecodeConfig:
    method: str = "dasc"
    strategy: str = "top_p"
    top_p: float = 0.5
    alpha: float = 1.0
    scale_alpha_by_k: bool = True
    max_len: int = 20
    seed: int = 0
    rerank_n: int = 5

    def __post_init__(self):
        if self.method not in DECODE_METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {', '.join(DECODE_METHODS)}")
        if self.strategy not in ("greedy", "top_p"):
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if not 0.0 < self.top_p <= 1.0:
            raise ConfigError("top_p must lie in (0, 1]")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepRecord:
    base_argmax: int
    bias_argmax: int | None
    chosen: int
    entropy: float
    top: list[tuple[int, float]] = field(default_factory=list)  # best adjusted tokens with probabilities


@dataclass
class GenerationResult:
    tokens: list[int]
    steps: list[StepRecord] = field(default_factory=list)
    terminated_by: str = "EOS"

    @property
    def response(self) -> list[int]:
        """Tokens without the trailing EOS."""
        return self.tokens[:-1] if self.tokens and self.tokens[-1] == EOS else list(self.tokens)


def effective_alpha(cfg: DecodeConfig, n_active: int) -> float:
    return cfg.alpha * n_active if cfg.scale_alpha_by_k else cfg.alpha


def combine_logits(base: np.ndarray, biases: np.ndarray | None, alpha_eff: float, method: str) -> np.ndarray:
    """Adjusted next-token logits.

    ``director``: ``biases`` holds the signed per-attribute rows (..., K_active, V)
    and they are summed. ``dasc``: ``biases`` is the already-interpolated
    (..., V) vector. Other methods return ``base`` unchanged.
    """
    if method in ("baseline", "ctrl", "rerank") or biases is None or alpha_eff == 0:
        return np.array(base, dtype=np.float64, copy=True)
    if method == "director":
        total = np.asarray(biases).sum(axis=-2)
    elif method == "dasc":
        total = np.asarray(biases)
    else:
        raise ConfigError(f"unknown method {method!r}")
    return base + alpha_eff * total


def _logsumexp(x: np.ndarray) -> float:
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))


def keep_base_eos(base: np.ndarray, adjusted: np.ndarray) -> np.ndarray:
    """Reset the EOS logit of ``adjusted`` so its softmax gives EOS the base probability.

    The attribute bias then only redistributes the non-EOS mass; softmax shift
    invariance makes "no bias on EOS" mean exactly this.
    """
    out = np.array(adjusted, dtype=np.float64, copy=True)
    rest = np.arange(len(out)) != EOS
    out[EOS] = base[EOS] + _logsumexp(out[rest]) - _logsumexp(np.asarray(base, dtype=np.float64)[rest])
    return out


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def nucleus(probs: np.ndarray, p: float) -> tuple[np.ndarray, np.ndarray]:
    """Minimal probability-sorted prefix with mass >= p (ties by token id), renormalized."""
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    k = min(int(np.searchsorted(cum, p, side="left")) + 1, len(order))
    support = order[:k]
    kept = probs[support]
    return support, kept / kept.sum()


def top_p_filter(logits: np.ndarray, p: float, rng: np.random.Generator) -> int:
    if not 0.0 < p <= 1.0:
        raise ConfigError("top_p must lie in (0, 1]")
    support, weights = nucleus(softmax_np(np.asarray(logits, dtype=np.float64)), p)
    u = rng.random()
    i = min(int(np.searchsorted(np.cumsum(weights), u, side="right")), len(support) - 1)
    return int(support[i])


def _entropy(probs: np.ndarray) -> float:
    nz = probs[probs > 0]
    return float(-(nz * np.log(nz)).sum())


def never_generated(vocab: Vocab | None) -> list[int]:
    """Token ids that cannot occur in a response: PAD, BOS, SEP, CTRL codes and topic cues."""
    ids = [PAD, BOS, SEP]
    if vocab is not None:
        ids += [i for i, tag in enumerate(vocab.tags) if tag == "control" or tag.startswith("topic:")]
    return ids


def generate_batch(
    model: Seq2SeqModel,
    head,
    contexts: Sequence[Sequence[int]],
    assignments: Sequence[AttributeAssignment],
    cfg: DecodeConfig,
    schema: AttributeSchema | None = None,
    vocab: Vocab | None = None,
    seeds: Sequence[int] | None = None,
    record_steps: bool = False,
) -> list[GenerationResult]:
    """Decode all contexts in lockstep; row ``i`` samples with ``seeds[i]``.

    Default seeds are ``cfg.seed + i``. The rerank method is handled by
    :func:`rerank_batch`.
    """
    method = cfg.method
    if method == "rerank":
        raise ConfigError("use rerank_batch for the rerank method")
    if len(contexts) != len(assignments):
        raise ConfigError("one assignment per context is required")
    if method in ("director", "dasc") and not isinstance(head, (DirectorHead, DascHead)):
        raise ConfigError(f"method {method!r} needs its trained head")
    if method == "ctrl":
        if schema is None or vocab is None:
            raise ConfigError("ctrl decoding needs the schema and vocab")
        contexts = [ctrl_augment(c, a, schema, vocab) for c, a in zip(contexts, assignments)]
    B = len(contexts)
    seeds = [cfg.seed + i for i in range(B)] if seeds is None else list(seeds)
    rngs = [np.random.default_rng(s) for s in seeds]
    signs = np.stack([a.signs() for a in assignments])
    alpha_eff = np.array([effective_alpha(cfg, a.n_active) for a in assignments])
    use_bias = method in ("director", "dasc")
    banned = never_generated(vocab)

    results = [GenerationResult([]) for _ in range(B)]
    alive = np.ones(B, dtype=bool)
    with no_grad():
        memory = model.encode(contexts)
        prefix = np.full((B, 1), BOS, dtype=np.int64)
        for _ in range(cfg.max_len):
            h, base = model.decode_step(memory, prefix)
            base = base.data.copy()
            bias = head.bias(h, signs) if use_bias else None
            chosen = np.full(B, PAD, dtype=np.int64)
            base[:, banned] = -np.inf
            for i in np.flatnonzero(alive):
                if bias is None or alpha_eff[i] == 0:
                    adjusted = base[i].copy()
                else:
                    # EOS is never biased: stopping stays the base model's call
                    adjusted = keep_base_eos(base[i], base[i] + alpha_eff[i] * bias[i])
                if cfg.strategy == "greedy":
                    tok = int(np.argmax(adjusted))
                else:
                    tok = top_p_filter(adjusted, cfg.top_p, rngs[i])
                chosen[i] = tok
                results[i].tokens.append(tok)
                if record_steps:
                    probs = softmax_np(adjusted)
                    best = np.argsort(-probs, kind="stable")[:5]
                    results[i].steps.append(StepRecord(
                        base_argmax=int(np.argmax(base[i])),
                        bias_argmax=None if bias is None else int(np.argmax(bias[i])),
                        chosen=tok,
                        entropy=_entropy(probs),
                        top=[(int(t), float(probs[t])) for t in best],
                    ))
                if tok == EOS:
                    alive[i] = False
            if not alive.any():
                break
            prefix = np.concatenate([prefix, chosen[:, None]], axis=1)
    for i in np.flatnonzero(alive):
        results[i].terminated_by = "max_len"
    return results


def generate(
    model: Seq2SeqModel,
    head,
    context: Sequence[int],
    assignment: AttributeAssignment,
    cfg: DecodeConfig,
    schema: AttributeSchema | None = None,
    vocab: Vocab | None = None,
) -> GenerationResult:
    """Single-context decode with full per-step diagnostics, sampling with ``cfg.seed``."""
    return generate_batch(model, head, [context], [assignment], cfg, schema, vocab, record_steps=True)[0]


def rerank_score(tokens: Sequence[int], assignment: AttributeAssignment, schema: AttributeSchema, vocab: Vocab) -> float:
    """Sum over aspects of the soft scorer's probability for the target class."""
    scores = soft_scores(tokens, schema, vocab)
    total = 0.0
    for aspect in schema.aspects:
        target = assignment.target(schema, aspect.name)
        if target is not None:
            total += scores[aspect.name][target]
    return total


def rerank_batch(
    model: Seq2SeqModel,
    contexts: Sequence[Sequence[int]],
    assignments: Sequence[AttributeAssignment],
    cfg: DecodeConfig,
    schema: AttributeSchema,
    vocab: Vocab,
    n: int | None = None,
) -> list[GenerationResult]:
    """Sample ``n`` baseline candidates per context and keep the best-scoring one.

    Candidate ``j`` of context ``i`` samples with seed ``(cfg.seed + i) * n + j``;
    ties go to the lowest candidate index.
    """
    n = cfg.rerank_n if n is None else n
    if n < 1:
        raise ConfigError("rerank needs at least one candidate")
    sample_cfg = DecodeConfig(**{**cfg.to_dict(), "method": "baseline"})
    rep_ctx = [c for c in contexts for _ in range(n)]
    rep_asg = [a for a in assignments for _ in range(n)]
    seeds = [(cfg.seed + i) * n + j for i in range(len(contexts)) for j in range(n)]
    cands = generate_batch(model, None, rep_ctx, rep_asg, sample_cfg, seeds=seeds)
    out = []
    for i, asg in enumerate(assignments):
        group = cands[i * n:(i + 1) * n]
        scores = [rerank_score(g.response, asg, schema, vocab) for g in group]
        out.append(group[int(np.argmax(scores))])
    return out


def rerank_generate(
    model: Seq2SeqModel,
    context: Sequence[int],
    assignment: AttributeAssignment,
    cfg: DecodeConfig,
    schema: AttributeSchema,
    vocab: Vocab,
    n: int = 5,
) -> GenerationResult:
    return rerank_batch(model, [context], [assignment], cfg, schema, vocab, n=n)[0]


def decode_many(
    model: Seq2SeqModel,
    head,
    contexts: Sequence[Sequence[int]],
    assignments: Sequence[AttributeAssignment],
    cfg: DecodeConfig,
    schema: AttributeSchema,
    vocab: Vocab,
    chunk: int = 256,
) -> list[GenerationResult]:
    """Method dispatch over chunks; row ``i`` always uses the same seeds."""
    out: list[GenerationResult] = []
    for start in range(0, len(contexts), chunk):
        ctx = contexts[start:start + chunk]
        asg = assignments[start:start + chunk]
        sub = DecodeConfig(**{**cfg.to_dict(), "seed": cfg.seed + start})
        if cfg.method == "rerank":
            # keep rerank seeds aligned with the unchunked layout
            out += rerank_batch(model, ctx, asg, sub, schema, vocab)
        else:
            out += generate_batch(model, head, ctx, asg, sub, schema, vocab)
    return out
