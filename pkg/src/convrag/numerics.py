"""Dense float64 tensors with a reverse-mode tape.

Operations run eagerly on numpy arrays. When a :class:`Tape` is active in the
current context and at least one input requires a gradient, the operation
appends a backward closure to the tape. Outside a tape every operation is a
plain forward computation, which is what inference uses.

Only the shapes the transformer and the losses need are supported; there is no
general broadcasting.
"""
from __future__ import annotations

import contextvars
import math
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, MaskError, NumericError, TokenIndexError

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "convrag_active_tape", default=None
)

DTYPE = np.float64


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=DTYPE)
        if any(s <= 0 for s in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.values.shape:
            raise DimensionError(f"gradient shape {g.shape} != value shape {self.values.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>"

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.values = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        return t


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; operations executed inside the block are
    recorded in execution order, which is a topological order of the graph.
    ``backward`` replays it in reverse, so each node is visited after all of
    its consumers.
    """

    def __init__(self):
        self.records: list[tuple[str, Tensor, Callable[[np.ndarray], None]]] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self.records.append((op, out, backward))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if loss.values.size != 1:
                raise DimensionError("backward without a seed gradient needs a scalar loss")
            seed = np.ones_like(loss.values)
        loss.accumulate(np.asarray(seed, dtype=DTYPE))
        for _, out, fn in reversed(self.records):
            if out.grad is not None:
                fn(out.grad)
        # intermediate grads are not needed after the sweep
        for _, out, _ in self.records:
            out.grad = None if out is not loss else out.grad


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def _result(op: str, arr: np.ndarray, inputs: Sequence[Tensor],
            backward: Callable[[np.ndarray], None]) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, needs)
    if needs:
        tape.record(op, out, backward)
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.accumulate(g)


def _check_2d(x: Tensor, op: str) -> None:
    if x.values.ndim != 2:
        raise DimensionError(f"{op} expects a 2-d tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# linear algebra and elementwise ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d(a, "matmul")
    _check_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    av, bv = a.values, b.values

    def backward(g):
        if a.requires_grad:
            a.accumulate(g @ bv.T)
        if b.requires_grad:
            b.accumulate(av.T @ g)

    return _result("matmul", av @ bv, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    _check_2d(x, "transpose")

    def backward(g):
        _acc(x, g.T)

    return _result("transpose", np.ascontiguousarray(x.values.T), (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add needs equal shapes: {a.shape} vs {b.shape}")

    def backward(g):
        _acc(a, g)
        _acc(b, g)

    return _result("add", a.values + b.values, (a, b), backward)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-n vector to every row of an m x n matrix."""
    _check_2d(x, "add_bias")
    if bias.values.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise DimensionError(f"bias shape {bias.shape} does not match rows of {x.shape}")

    def backward(g):
        _acc(x, g)
        _acc(bias, g.sum(axis=0))

    return _result("add_bias", x.values + bias.values, (x, bias), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        _acc(x, g * c)

    return _result("scale", x.values * c, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    k = math.sqrt(2.0 / math.pi)
    xv = x.values
    inner = k * (xv + 0.044715 * xv ** 3)
    t = np.tanh(inner)
    out = 0.5 * xv * (1.0 + t)

    def backward(g):
        if x.requires_grad:
            d = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * k * (1.0 + 3 * 0.044715 * xv * xv)
            x.accumulate(g * d)

    return _result("gelu", out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    _check_2d(x, "layer_norm")
    n = x.shape[1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError("layer_norm gain/bias must match the row width")
    xv = x.values
    mu = xv.mean(axis=1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.values + bias.values

    def backward(g):
        if gain.requires_grad:
            gain.accumulate((g * xhat).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate(g.sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.values
            dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
            x.accumulate(dx)

    return _result("layer_norm", out, (x, gain, bias), backward)


def total(x: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""

    def backward(g):
        _acc(x, np.full(x.shape, float(g), dtype=DTYPE))

    return _result("total", np.array(x.values.sum()), (x,), backward)


def weighted_sum(terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """sum_i w_i * t_i over scalar tensors, accumulated left to right."""
    if len(terms) != len(weights) or not terms:
        raise DimensionError("weighted_sum needs matching, nonempty terms and weights")
    for t in terms:
        if t.values.size != 1:
            raise DimensionError("weighted_sum terms must be scalars")
    acc = terms[0].values.reshape(()) * float(weights[0])
    for t, w in zip(terms[1:], weights[1:]):
        acc = acc + t.values.reshape(()) * float(w)

    def backward(g):
        for t, w in zip(terms, weights):
            _acc(t, (g * float(w)).reshape(t.shape))

    return _result("weighted_sum", np.array(acc), terms, backward)


# ---------------------------------------------------------------------------
# indexing and layout


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows ``ids`` of a V x d table."""
    _check_2d(table, "embedding")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise DimensionError("embedding needs a nonempty 1-d id list")
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise TokenIndexError(f"token id out of range [0, {table.shape[0]})")

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.values)
            np.add.at(full, idx, g)
            table.accumulate(full)

    return _result("embedding", table.values[idx], (table,), backward)


def take_rows(x: Tensor, rows: Sequence[int]) -> Tensor:
    _check_2d(x, "take_rows")
    idx = np.asarray(rows, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise DimensionError("take_rows needs a nonempty 1-d row list")
    if idx.min() < -x.shape[0] or idx.max() >= x.shape[0]:
        raise TokenIndexError("row index out of range")

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.values)
            np.add.at(full, idx, g)
            x.accumulate(full)

    return _result("take_rows", x.values[idx], (x,), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("concat_rows needs at least one part")
    for p in parts:
        _check_2d(p, "concat_rows")
    if len({p.shape[1] for p in parts}) != 1:
        raise DimensionError("concat_rows parts must share a width")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _acc(p, g[lo:hi])

    return _result("concat_rows", np.concatenate([p.values for p in parts], axis=0), parts, backward)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    _check_2d(x, "slice_cols")
    if not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"bad column slice [{start}, {stop}) of width {x.shape[1]}")

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.values)
            full[:, start:stop] = g
            x.accumulate(full)

    return _result("slice_cols", np.ascontiguousarray(x.values[:, start:stop]), (x,), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("concat_cols needs at least one part")
    for p in parts:
        _check_2d(p, "concat_cols")
    if len({p.shape[0] for p in parts}) != 1:
        raise DimensionError("concat_cols parts must share a height")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _acc(p, g[:, lo:hi])

    return _result("concat_cols", np.concatenate([p.values for p in parts], axis=1), parts, backward)


# ---------------------------------------------------------------------------
# softmax family


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    _check_2d(x, "softmax_rows")
    if np.isnan(x.values).any():
        raise NumericError("softmax_rows received NaN input")
    y = _softmax_np(x.values)

    def backward(g):
        if x.requires_grad:
            x.accumulate(y * (g - (g * y).sum(axis=1, keepdims=True)))

    return _result("softmax_rows", y, (x,), backward)


def cross_entropy(logits: Tensor, targets: Sequence[int], weights: Sequence[float] | None = None) -> Tensor:
    """Mean over rows of -log softmax(logits)[row, target].

    With ``weights`` the result is instead sum_i weights[i] * nll_i, which lets
    callers average per sequence before averaging over sequences.
    """
    _check_2d(logits, "cross_entropy")
    tgt = np.asarray(targets, dtype=np.int64)
    n, V = logits.shape
    if tgt.shape != (n,):
        raise DimensionError(f"need {n} targets, got {tgt.shape}")
    if tgt.min() < 0 or tgt.max() >= V:
        raise TokenIndexError(f"target index out of range [0, {V})")
    lv = logits.values
    if np.isnan(lv).any():
        raise NumericError("cross_entropy received NaN logits")
    m = lv.max(axis=1, keepdims=True)
    z = lv - m
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    nll = lse - z[rows, tgt]
    if weights is None:
        wts = None
        loss = nll.mean()
    else:
        wts = np.asarray(weights, dtype=DTYPE)
        if wts.shape != (n,):
            raise DimensionError(f"need {n} row weights, got {wts.shape}")
        loss = (wts * nll).sum()

    def backward(g):
        if logits.requires_grad:
            p = _softmax_np(lv)
            p[rows, tgt] -= 1.0
            if wts is None:
                logits.accumulate(p * (float(g) / n))
            else:
                logits.accumulate(p * (float(g) * wts[:, None]))

    return _result("cross_entropy", np.array(loss), (logits,), backward)


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask, probe: list | None = None) -> Tensor:
    """Scaled dot-product attention restricted to ``mask``.

    ``mask`` is a t x t boolean array (or anything exposing ``.allow``);
    disallowed positions get a weight of exactly zero. When ``probe`` is a
    list, the t x t weight matrix is appended to it.
    """
    for x in (q, k, v):
        _check_2d(x, "masked_attention")
    t, d = q.shape
    if k.shape != (t, d) or v.shape[0] != t:
        raise DimensionError(f"q/k/v shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    allow = np.asarray(getattr(mask, "allow", mask), dtype=bool)
    if allow.shape != (t, t):
        raise DimensionError(f"mask shape {allow.shape} does not match sequence length {t}")
    if not allow.any(axis=1).all():
        bad = int(np.flatnonzero(~allow.any(axis=1))[0])
        raise MaskError(f"attention mask row {bad} allows no positions")
    c = 1.0 / math.sqrt(d)
    qv, kv, vv = q.values, k.values, v.values
    scores = np.where(allow, (qv @ kv.T) * c, -np.inf)
    scores -= scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)
    if probe is not None:
        probe.append(w)
    out = w @ vv

    def backward(g):
        if v.requires_grad:
            v.accumulate(w.T @ g)
        if q.requires_grad or k.requires_grad:
            dw = g @ vv.T
            ds = w * (dw - (dw * w).sum(axis=1, keepdims=True))
            if q.requires_grad:
                q.accumulate((ds @ kv) * c)
            if k.requires_grad:
                k.accumulate((ds.T @ qv) * c)

    return _result("masked_attention", out, (q, k, v), backward)
