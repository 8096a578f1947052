"""Miniature pre-LN transformer encoder-decoder with tied token embeddings."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError
from .synthlang import BOS, EOS, PAD, DialogueSample
from .tensor import Tensor


class SequenceTooLongError(DataError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 2
    d_ffn: int = 128
    max_len: int = 32
    dropout: float = 0.0
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def count_params(cfg: ModelConfig) -> int:
    d, f = cfg.d_model, cfg.d_ffn
    attn = 4 * (d * d + d)
    ffn = 2 * d * f + f + d
    ln = 2 * d
    enc_layer = attn + ffn + 2 * ln
    dec_layer = 2 * attn + ffn + 3 * ln
    return (
        cfg.vocab_size * d
        + 2 * cfg.max_len * d
        + cfg.n_enc_layers * enc_layer
        + cfg.n_dec_layers * dec_layer
        + 2 * ln
    )


@dataclass
class EncoderMemory:
    states: Tensor  # (B, S, d)
    mask: np.ndarray  # (B, S) True on real tokens


@dataclass
class Batch:
    enc_ids: np.ndarray
    enc_mask: np.ndarray
    dec_in: np.ndarray
    dec_out: np.ndarray
    dec_mask: np.ndarray
    samples: Sequence[DialogueSample]


def pad_sequences(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def make_batch(
    samples: Sequence[DialogueSample],
    context_fn: Callable[[DialogueSample], Sequence[int]] | None = None,
) -> Batch:
    """Teacher-forcing batch: decoder reads BOS+response, predicts response+EOS."""
    if not samples:
        raise DataError("empty batch")
    contexts = [list(context_fn(s)) if context_fn else list(s.context) for s in samples]
    enc_ids, enc_mask = pad_sequences([[BOS] + c for c in contexts])
    dec_in, dec_mask = pad_sequences([[BOS] + list(s.response) for s in samples])
    dec_out, _ = pad_sequences([list(s.response) + [EOS] for s in samples])
    return Batch(enc_ids, enc_mask, dec_in, dec_out, dec_mask, samples)


class Seq2SeqModel:
    """Parameters live in ``self.params`` (ordered name -> Tensor)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.training = False
        self._dropout_rng = np.random.default_rng([seed, 1])
        rng = np.random.default_rng(seed)
        d, f, std = cfg.d_model, cfg.d_ffn, cfg.init_std
        params: dict[str, Tensor] = {}

        def normal(name, *shape):
            params[name] = Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)

        def const(name, value, *shape):
            params[name] = Tensor(np.full(shape, value), requires_grad=True, name=name)

        def attention(prefix):
            for w in ("q", "k", "v", "o"):
                normal(f"{prefix}.w{w}", d, d)
                const(f"{prefix}.b{w}", 0.0, d)

        def norm(prefix):
            const(f"{prefix}.g", 1.0, d)
            const(f"{prefix}.b", 0.0, d)

        def ffn(prefix):
            normal(f"{prefix}.w1", d, f)
            const(f"{prefix}.b1", 0.0, f)
            normal(f"{prefix}.w2", f, d)
            const(f"{prefix}.b2", 0.0, d)

        normal("tok_emb", cfg.vocab_size, d)
        normal("enc_pos", cfg.max_len, d)
        normal("dec_pos", cfg.max_len, d)
        for i in range(cfg.n_enc_layers):
            norm(f"enc{i}.ln1")
            attention(f"enc{i}.self")
            norm(f"enc{i}.ln2")
            ffn(f"enc{i}.ffn")
        norm("enc.ln_f")
        for i in range(cfg.n_dec_layers):
            norm(f"dec{i}.ln1")
            attention(f"dec{i}.self")
            norm(f"dec{i}.ln2")
            attention(f"dec{i}.cross")
            norm(f"dec{i}.ln3")
            ffn(f"dec{i}.ffn")
        norm("dec.ln_f")
        self.params = params

    # -- parameter helpers --------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- building blocks ----------------------------------------------------

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        return T.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])

    def _drop(self, x: Tensor) -> Tensor:
        rate = self.cfg.dropout
        if not self.training or rate == 0.0:
            return x
        keep = (self._dropout_rng.random(x.shape) >= rate) / (1.0 - rate)
        return T.mul(x, Tensor(keep))

    def _linear(self, x: Tensor, w: str, b: str) -> Tensor:
        return T.matmul(x, self.params[w]) + self.params[b]

    def _attention(self, prefix: str, x: Tensor, mem: Tensor, mask: np.ndarray) -> Tensor:
        B, Tq, d = x.shape
        S = mem.shape[1]
        H = self.cfg.n_heads
        dh = d // H
        q = self._linear(x, f"{prefix}.wq", f"{prefix}.bq").reshape(B, Tq, H, dh).transpose(0, 2, 1, 3)
        k = self._linear(mem, f"{prefix}.wk", f"{prefix}.bk").reshape(B, S, H, dh).transpose(0, 2, 3, 1)
        v = self._linear(mem, f"{prefix}.wv", f"{prefix}.bv").reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        weights = T.softmax(T.matmul(q, k) * (1.0 / math.sqrt(dh)), mask=mask)
        out = T.matmul(weights, v).transpose(0, 2, 1, 3).reshape(B, Tq, d)
        return self._drop(self._linear(out, f"{prefix}.wo", f"{prefix}.bo"))

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        h = T.gelu(self._linear(x, f"{prefix}.w1", f"{prefix}.b1"))
        return self._drop(self._linear(h, f"{prefix}.w2", f"{prefix}.b2"))

    def _embed(self, ids: np.ndarray, pos_table: str) -> Tensor:
        L = ids.shape[1]
        if L > self.cfg.max_len:
            raise SequenceTooLongError(f"sequence of length {L} exceeds max_len={self.cfg.max_len}")
        pos = T.embedding(self.params[pos_table], np.arange(L))
        return self._drop(T.embedding(self.params["tok_emb"], ids) + pos)

    # -- public API ---------------------------------------------------------

    def encode(self, contexts, mask: np.ndarray | None = None) -> EncoderMemory:
        """Encode BOS-prefixed context ids.

        ``contexts`` is either a list of raw context sequences (BOS is
        prepended here) or an already padded (B, S) id array with ``mask``.
        """
        if mask is None:
            ids, mask = pad_sequences([[BOS] + list(c) for c in contexts])
        else:
            ids = np.asarray(contexts, dtype=np.int64)
        x = self._embed(ids, "enc_pos")
        key_mask = mask[:, None, None, :]
        for i in range(self.cfg.n_enc_layers):
            x = x + self._self_attend(f"enc{i}", x, key_mask)
            x = x + self._ffn(f"enc{i}.ffn", self._ln(x, f"enc{i}.ln2"))
        return EncoderMemory(self._ln(x, "enc.ln_f"), mask)

    def _self_attend(self, layer: str, x: Tensor, mask: np.ndarray) -> Tensor:
        h = self._ln(x, f"{layer}.ln1")
        return self._attention(f"{layer}.self", h, h, mask)

    def decode(self, memory: EncoderMemory, prefixes: np.ndarray) -> tuple[Tensor, Tensor]:
        """Final decoder states (B, T, d) and tied-embedding logits (B, T, |V|)."""
        ids = np.asarray(prefixes, dtype=np.int64)
        if ids.ndim != 2:
            raise ConfigError("decode expects a (batch, time) id array")
        if ids.shape[0] != memory.states.shape[0]:
            raise ConfigError("prefix batch does not match encoder memory")
        Tq = ids.shape[1]
        x = self._embed(ids, "dec_pos")
        causal = np.tril(np.ones((Tq, Tq), dtype=bool))[None, None]
        cross_mask = memory.mask[:, None, None, :]
        for i in range(self.cfg.n_dec_layers):
            x = x + self._self_attend(f"dec{i}", x, causal)
            x = x + self._attention(f"dec{i}.cross", self._ln(x, f"dec{i}.ln2"), memory.states, cross_mask)
            x = x + self._ffn(f"dec{i}.ffn", self._ln(x, f"dec{i}.ln3"))
        hidden = self._ln(x, "dec.ln_f")
        logits = T.matmul(hidden, self.params["tok_emb"].T)
        return hidden, logits

    def decode_step(self, memory: EncoderMemory, prefix) -> tuple[Tensor, Tensor]:
        """State and base logits at the last position of ``prefix``.

        A 1-D prefix gives a (d,) state and (|V|,) logits; a (B, T) array
        gives batched (B, d) and (B, |V|).
        """
        ids = np.asarray(prefix, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None]
        if ids.shape[1] == 0 or np.any(ids[:, 0] != BOS):
            raise ConfigError("decoder prefix must start with BOS")
        hidden, logits = self.decode(memory, ids)
        B, Tq, d = hidden.shape
        h_last = T.gather_last(hidden.transpose(0, 2, 1), np.full((B, d), Tq - 1))
        l_last = T.gather_last(logits.transpose(0, 2, 1), np.full((B, logits.shape[-1]), Tq - 1))
        if single:
            return h_last.reshape(d), l_last.reshape(logits.shape[-1])
        return h_last, l_last

    def forward(self, batch: Batch) -> tuple[Tensor, Tensor]:
        memory = self.encode(batch.enc_ids, batch.enc_mask)
        return self.decode(memory, batch.dec_in)

    def clm_loss(self, batch: Batch | Sequence[DialogueSample]) -> Tensor:
        if not isinstance(batch, Batch):
            batch = make_batch(batch)
        _, logits = self.forward(batch)
        return T.softmax_xent(logits, batch.dec_out, weights=batch.dec_mask)
