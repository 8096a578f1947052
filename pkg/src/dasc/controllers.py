"""Attribute control heads and training losses.

Three mechanisms share one interface:

* ``DirectorHead``: one linear ``d -> |V|`` attribute classifier per attribute,
  trained with token-level BCE plus an MSE pull towards 0.5 on every
  non-target token.
* ``DascHead``: hidden states are projected per attribute into a shared
  ``p``-dim space and scored against a shared attribute token embedding.
* CTRL: no head; control codes are appended to the encoder context.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, UnsupportedCompositionError
from .model import Batch, Seq2SeqModel, make_batch
from .synthlang import AttributeAssignment, AttributeSchema, DialogueSample, Value, Vocab
from .tensor import Tensor

METHODS = ("baseline", "ctrl", "director", "dasc")


def extra_param_count(method: str, d: int, V: int, K: int, p: int | None = None) -> int:
    """Attribute-control parameters added on top of the base model.

    Director counts only its ``K`` weight matrices; its per-attribute biases
    (``V * K``) are reported separately by :meth:`DirectorHead.bias_params`.
    """
    if method == "director":
        return d * V * K
    if method == "dasc":
        if p is None:
            raise ConfigError("dasc needs the attribute-space dimension p")
        return d * p * K + V * p + p * K
    if method in ("baseline", "ctrl"):
        return 0
    raise ConfigError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")


def attribute_targets(samples: Sequence[DialogueSample]) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample BCE labels (1 for ONE) and masks (0 for PHI), each (B, K)."""
    labels = np.stack([s.gold.labels() for s in samples])
    mask = np.stack([s.gold.mask() for s in samples])
    return labels, mask


class _Head:
    method = ""
    params: dict[str, Tensor]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class DirectorHead(_Head):
    method = "director"

    def __init__(self, d: int, V: int, K: int, seed: int = 0, init_std: float = 0.02):
        self.d, self.V, self.K = d, V, K
        rng = np.random.default_rng(seed)
        # column block k holds W_k transposed, so h @ weight gives all K rows at once
        self.params = {
            "weight": Tensor(rng.normal(0.0, init_std, size=(d, K * V)), requires_grad=True, name="weight"),
            "bias": Tensor(np.zeros(K * V), requires_grad=True, name="bias"),
        }

    def config(self) -> dict:
        return {"d": self.d, "V": self.V, "K": self.K}

    def weight_params(self) -> int:
        return self.params["weight"].size

    def bias_params(self) -> int:
        return self.params["bias"].size

    def token_logits(self, h: Tensor) -> Tensor:
        """``(..., d) -> (..., K, V)``; row k scores every candidate next token for attribute k."""
        lead = h.shape[:-1]
        out = T.matmul(h.reshape(-1, self.d), self.params["weight"]) + self.params["bias"]
        return out.reshape(*lead, self.K, self.V)

    def losses(self, hidden: Tensor, batch: Batch) -> tuple[Tensor, Tensor]:
        """Token BCE at the gold next token and MSE-to-0.5 on all other tokens."""
        logits = self.token_logits(hidden)  # (B, Tn, K, V)
        B, Tn = batch.dec_out.shape
        labels, amask = attribute_targets(batch.samples)
        weight = batch.dec_mask[:, :, None] * amask[:, None, :]
        targets = np.broadcast_to(batch.dec_out[:, :, None], (B, Tn, self.K))
        picked = T.gather_last(logits, targets)
        l_t = T.bce_with_logits(picked, np.broadcast_to(labels[:, None, :], (B, Tn, self.K)), weights=weight)
        off = 1.0 - np.eye(self.V)[batch.dec_out][:, :, None, :]
        reg_weight = weight[..., None] * off
        dev = T.sigmoid(logits) - 0.5
        l_reg = T.weighted_mean(dev * dev, np.broadcast_to(reg_weight, logits.shape))
        return l_t, l_reg

    def bias(self, h: Tensor, signs: np.ndarray) -> np.ndarray:
        """Signed sum over active attributes of their token logits, shape (B, V)."""
        logits = self.token_logits(h).data  # (B, K, V)
        return np.einsum("bk,bkv->bv", signs, logits)

    def signed_rows(self, h: Tensor, signs: np.ndarray) -> np.ndarray:
        """(K_active, V) signed logit rows for a single state."""
        logits = self.token_logits(h).data.reshape(self.K, self.V)
        active = np.flatnonzero(signs)
        return signs[active, None] * logits[active]


class DascHead(_Head):
    method = "dasc"

    def __init__(self, d: int, V: int, K: int, p: int = 32, seed: int = 0, init_std: float = 0.02):
        self.d, self.V, self.K, self.p = d, V, K, p
        rng = np.random.default_rng(seed)
        # column block k of ``proj`` is the transposed attribute-k projection (p x d)
        self.params = {
            "atemb": Tensor(rng.normal(0.0, init_std, size=(V, p)), requires_grad=True, name="atemb"),
            "proj": Tensor(rng.normal(0.0, init_std, size=(d, K * p)), requires_grad=True, name="proj"),
            "v": Tensor(rng.normal(0.0, init_std, size=(K, p)), requires_grad=True, name="v"),
        }

    def config(self) -> dict:
        return {"d": self.d, "V": self.V, "K": self.K, "p": self.p}

    def projection(self, k: int) -> np.ndarray:
        """The (p, d) matrix mapping hidden states into the space for attribute k."""
        return self.params["proj"].data[:, k * self.p:(k + 1) * self.p].T

    def context_embed(self, h: Tensor, k: int | None = None) -> Tensor:
        """``(..., d) -> (..., K, p)``, or ``(..., p)`` for a single attribute ``k``."""
        lead = h.shape[:-1]
        out = T.matmul(h.reshape(-1, self.d), self.params["proj"]).reshape(*lead, self.K, self.p)
        if k is None:
            return out
        if not 0 <= k < self.K:
            raise ConfigError(f"attribute index {k} out of range for K={self.K}")
        return T.take(out, k, axis=-2)

    def token_logit(self, h_k: Tensor, token: int) -> Tensor:
        """Dot product of one attribute context embedding with ATEMB[token]."""
        if not 0 <= token < self.V:
            raise IndexError(f"token {token} out of range for |V|={self.V}")
        row = T.embedding(self.params["atemb"], np.array([token])).reshape(self.p)
        return (h_k * row).sum()

    def losses(self, hidden: Tensor, batch: Batch) -> tuple[Tensor, Tensor]:
        B, Tn = batch.dec_out.shape
        ctx = self.context_embed(hidden)  # (B, Tn, K, p)
        labels, amask = attribute_targets(batch.samples)
        weight = batch.dec_mask[:, :, None] * amask[:, None, :]
        y = np.broadcast_to(labels[:, None, :], (B, Tn, self.K))
        tok = T.embedding(self.params["atemb"], batch.dec_out).reshape(B, Tn, self.p, 1)
        tok_logits = T.matmul(ctx, tok).reshape(B, Tn, self.K)
        sent_logits = (ctx * self.params["v"]).sum(axis=-1)
        return (
            T.bce_with_logits(tok_logits, y, weights=weight),
            T.bce_with_logits(sent_logits, y, weights=weight),
        )

    def interpolated(self, h: Tensor, signs: np.ndarray) -> np.ndarray:
        """Equal-weight signed mean of the active context embeddings, (B, p)."""
        ctx = self.context_embed(h).data  # (B, K, p)
        n_active = np.count_nonzero(signs, axis=-1)
        total = np.einsum("bk,bkp->bp", signs, ctx)
        return np.where(n_active[:, None] > 0, total / np.maximum(n_active, 1)[:, None], 0.0)

    def bias(self, h: Tensor, signs: np.ndarray) -> np.ndarray:
        """Per-token bias (B, V): interpolated embedding dotted with ATEMB."""
        return self.interpolated(h, signs) @ self.params["atemb"].data.T


def make_head(method: str, d: int, V: int, K: int, p: int = 32, seed: int = 0):
    if method == "director":
        return DirectorHead(d, V, K, seed=seed)
    if method == "dasc":
        return DascHead(d, V, K, p=p, seed=seed)
    if method in ("baseline", "ctrl"):
        return None
    raise ConfigError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")


def ctrl_augment(
    context: Sequence[int], assignment: AttributeAssignment, schema: AttributeSchema, vocab: Vocab
) -> list[int]:
    """Append one control code per aspect, in schema aspect order."""
    codes = {vocab.control_code(n) for n in schema.attribute_names}
    if any(t in codes for t in context):
        raise ConfigError("context already carries control codes")
    out = list(context)
    for aspect in schema.aspects:
        ones = [a for a in aspect.attributes if assignment.values[schema.index(a)] is Value.ONE]
        if len(ones) != 1:
            raise UnsupportedCompositionError(
                f"CTRL needs exactly one active {aspect.name!r} attribute, got {ones or 'none'}"
            )
        out.append(vocab.control_code(ones[0]))
    return out


@dataclass
class LossBreakdown:
    l_clm: float
    l_t: float = 0.0
    l_s: float = 0.0
    l_reg: float = 0.0
    total: float = 0.0
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict[str, float]:
        return {"l_clm": self.l_clm, "l_t": self.l_t, "l_s": self.l_s, "l_reg": self.l_reg, "total": self.total}


def prepare_batch(
    method: str, samples: Sequence[DialogueSample], schema: AttributeSchema, vocab: Vocab
) -> Batch:
    if method == "ctrl":
        return make_batch(samples, context_fn=lambda s: ctrl_augment(s.context, s.gold, schema, vocab))
    return make_batch(samples)


def total_loss(
    method: str,
    model: Seq2SeqModel,
    head,
    batch: Batch,
    beta: float = 0.1,
    lambda_reg: float = 1.0,
) -> LossBreakdown:
    """CLM loss plus the method's weighted attribute losses.

    ``batch`` must come from :func:`prepare_batch` so CTRL sees its codes.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    hidden, logits = model.forward(batch)
    l_clm = T.softmax_xent(logits, batch.dec_out, weights=batch.dec_mask)
    if method in ("baseline", "ctrl"):
        return LossBreakdown(l_clm.item(), total=l_clm.item(), tensor=l_clm)
    if method == "director":
        l_t, l_reg = head.losses(hidden, batch)
        total = l_clm + l_t * beta + l_reg * lambda_reg
        return LossBreakdown(l_clm.item(), l_t=l_t.item(), l_reg=l_reg.item(), total=total.item(), tensor=total)
    l_t, l_s = head.losses(hidden, batch)
    total = l_clm + (l_s + l_t) * beta
    return LossBreakdown(l_clm.item(), l_t=l_t.item(), l_s=l_s.item(), total=total.item(), tensor=total)
