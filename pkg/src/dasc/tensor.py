"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record themselves when a :class:`Tape` is active and at least
one input requires a gradient, so inference code simply runs without a tape.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y)
    >>> x.grad
    array([6.])
"""

from __future__ import annotations

import contextvars
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "TapeStateError",
    "ContractError",
    "Tensor",
    "Tape",
    "no_grad",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "tsum",
    "mean",
    "sigmoid",
    "tanh",
    "gelu",
    "softmax",
    "layer_norm",
    "embedding",
    "concat",
    "gather_last",
    "take",
    "softmax_xent",
    "bce_with_logits",
    "weighted_mean",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeStateError(RuntimeError):
    """A tape was used after its backward pass without a reset."""


class ContractError(ValueError):
    """An argument violates an operation's precondition."""


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "dasc_active_tape", default=None
)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise ContractError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager while building the loss, then call
    :meth:`backward` once. A second backward without :meth:`reset` raises
    :class:`TapeStateError`.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False
        self._tokens: list[contextvars.Token] = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], rule: Callable) -> None:
        if self.consumed:
            raise TapeStateError("tape already ran backward; call reset() before recording")
        self.nodes.append((out, inputs, rule))

    def reset(self) -> None:
        self.nodes = []
        self.consumed = False

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeStateError("backward already ran on this tape; call reset() first")
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(out) for out, _, _ in self.nodes}
        if id(loss) not in produced:
            raise ContractError("loss was not produced on this tape")
        self.consumed = True
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, rule in reversed(self.nodes):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, rule(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in produced:
                    if key in pending:
                        pending[key] = pending[key] + gi
                    else:
                        pending[key] = gi
                elif inp.grad is None:
                    inp.grad = np.array(gi, dtype=np.float64)
                else:
                    inp.grad += gi


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``."""
    tape.backward(loss)


@contextmanager
def no_grad() -> Iterator[None]:
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], rule: Callable) -> Tensor:
    out = Tensor._wrap(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, rule)
    return out


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


# --- broadcasting -----------------------------------------------------------


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    # trailing-dimension rule only: one shape must be a suffix of the other
    if a == b:
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise DimensionError(f"shapes {a} and {b} are not broadcastable")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# --- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def rule(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit(ad * bd, (a, b), rule)


def scale(x: Tensor, factor: float) -> Tensor:
    return _emit(x.data * factor, (x,), lambda g: (g * factor,))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # branch-free stable form
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    z = x.data
    inner = _GELU_C * (z + 0.044715 * z * z * z)
    t = np.tanh(inner)
    y = 0.5 * z * (1.0 + t)

    def rule(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * z * z)
        return (g * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * dinner),)

    return _emit(y, (x,), rule)


# --- shape and reduction ----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across a's leading axes) or has exactly the
    same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        k, n = bd.shape

        def rule(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb

    elif ad.shape[:-2] == bd.shape[:-2]:

        def rule(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    else:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} differ")
    return _emit(ad @ bd, (a, b), rule)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _emit(np.ascontiguousarray(np.transpose(x.data, axes)), (x,),
                 lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), rule)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def weighted_mean(x: Tensor, weights: np.ndarray) -> Tensor:
    """``sum(x * w) / sum(w)`` with constant weights; zero when ``sum(w) == 0``."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != x.shape:
        raise DimensionError(f"weights {w.shape} do not match values {x.shape}")
    total = w.sum()
    if total == 0:
        return _emit(np.asarray(0.0), (x,), lambda g: (np.zeros(x.shape),))
    coef = w / total
    return _emit(np.asarray((x.data * coef).sum()), (x,), lambda g: (g * coef,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _emit(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=ax)))


# --- neural-network primitives ---------------------------------------------


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get zero weight."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit(y, (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    rstd = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd
    gd = gain.data

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        gx_hat = g * gd
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggain, gbias

    return _emit(xhat * gd + bias.data, (x, gain, bias), rule)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` for integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding index out of range for table with {n} rows")
    shape = table.shape

    def rule(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _emit(table.data[ids], (table,), rule)


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """``np.take`` along one axis (integer or array index)."""
    idx = np.asarray(index, dtype=np.int64)
    ax = axis % x.ndim
    n = x.shape[ax]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"take: index out of range for axis of size {n}")
    shape = x.shape

    def rule(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, ax, 0)  # view: (n, *other axes)
        if idx.ndim == 0:
            moved[int(idx)] += g
        else:
            flat = g.reshape(shape[:ax] + (idx.size,) + shape[ax + 1:])
            np.add.at(moved, idx.reshape(-1), np.moveaxis(flat, ax, 0))
        return (out,)

    return _emit(np.take(x.data, idx, axis=ax), (x,), rule)


def gather_last(x: Tensor, index) -> Tensor:
    """Select ``x[..., index[...]]``; ``index`` has shape ``x.shape[:-1]``."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise DimensionError(f"gather_last: index {idx.shape} vs values {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-1]):
        raise IndexError("gather_last: index out of range")
    shape = x.shape

    def rule(g):
        out = np.zeros(shape)
        np.put_along_axis(out, idx[..., None], g[..., None], axis=-1)
        return (out,)

    return _emit(np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0], (x,), rule)


def softmax_xent(logits: Tensor, targets, weights: np.ndarray | None = None) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over rows (weighted if given)."""
    t = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if t.shape != logits.shape[:-1]:
        raise DimensionError(f"softmax_xent: targets {t.shape} vs logits {logits.shape}")
    if t.size and (t.min() < 0 or t.max() >= V):
        raise IndexError(f"softmax_xent: target id out of range for {V} classes")
    w = np.ones(t.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total == 0:
        return _emit(np.asarray(0.0), (logits,), lambda g: (np.zeros(logits.shape),))
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, t[..., None], axis=-1)[..., 0]
    loss = ((lse - picked) * w).sum() / total

    def rule(g):
        p = np.exp(z - lse[..., None])
        np.put_along_axis(p, t[..., None], np.take_along_axis(p, t[..., None], -1) - 1.0, -1)
        return (g * p * (w / total)[..., None],)

    return _emit(np.asarray(loss), (logits,), rule)


def bce_with_logits(logits, labels, weights: np.ndarray | None = None) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 labels."""
    logits = _as_tensor(logits)
    y = np.broadcast_to(np.asarray(labels, dtype=np.float64), logits.shape)
    if np.any((y != 0) & (y != 1)):
        raise ContractError("bce_with_logits labels must be 0 or 1")
    w = np.ones(logits.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total == 0:
        return _emit(np.asarray(0.0), (logits,), lambda g: (np.zeros(logits.shape),))
    x = logits.data
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    loss = (per * w).sum() / total
    return _emit(np.asarray(loss), (logits,),
                 lambda g: (g * (_sigmoid(x) - y) * (w / total),))


# --- verification -----------------------------------------------------------


def grad_check(
    f: Callable,
    at: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``f(at)`` must return a scalar tensor. ``at`` may be a list of tensors, in
    which case ``max_coords`` (if given) is sampled per tensor. Each compared
    coordinate contributes ``|a - n| / max(floor, |a| + |n|)``; the floor keeps
    exactly-zero gradients (where differencing only sees roundoff) from
    dominating the ratio.
    """
    params = [at] if isinstance(at, Tensor) else list(at)
    for p in params:
        if not p.requires_grad:
            raise ContractError("grad_check needs tensors with requires_grad=True")
        p.grad = None
    with Tape() as tape:
        loss = f(at)
    tape.backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    with no_grad():
        base = f(at).item()
        if f(at).item() != base or loss.item() != base:
            raise RuntimeError("grad_check: f is not deterministic")
        rng = np.random.default_rng(seed)
        worst = 0.0
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                up = f(at).item()
                flat[i] = orig - eps
                down = f(at).item()
                flat[i] = orig
                num = (up - down) / (2 * eps)
                a = ga.reshape(-1)[i]
                worst = max(worst, abs(a - num) / max(floor, abs(a) + abs(num)))
    return worst
