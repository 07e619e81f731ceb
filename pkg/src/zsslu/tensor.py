"""Dense float64 tensors with a reverse-mode gradient tape.

Only the handful of primitives the transformer, the prefix adapter and the
losses need are provided. Heavier primitives (attention, layer norm,
cross-entropy) are fused so that a training step stays a few hundred numpy
calls regardless of batch size.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class DegenerateLossError(ValueError):
    """Raised when a loss has no positions to average over."""


@dataclass(eq=False)
class Node:
    kind: str
    inputs: tuple
    backward: Callable[[np.ndarray], tuple]
    id: int = field(default_factory=lambda: next(_ids))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, kind: str, inputs: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(kind, tuple(inputs), backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_bias_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    small, big = (a, b) if a.ndim <= b.ndim else (b, a)
    if small.shape != big.shape[big.ndim - small.ndim:]:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_bias_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_bias_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, "sub", (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_bias_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, "mul", (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, "scale", (a,), lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    c = math.sqrt(2.0 / math.pi)
    x2 = xd * xd
    t = np.tanh(c * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _result(out, "gelu", (x,), backward)


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.array(x.data.sum()), "sum", (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _result(np.array(x.data.mean()), "mean", (x,), lambda g: (np.full(shape, float(g) / n),))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; ``b`` may be shared across a batch."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ in {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, "matmul", (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def transpose(x: Tensor) -> Tensor:
    return _result(np.swapaxes(x.data, -1, -2), "transpose", (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
    return _result(out, "reshape", (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------- structural


def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise IndexError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat: empty input")
    ax = _axis(axis, tensors[0].ndim)
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape} on axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _result(np.concatenate([t.data for t in tensors], axis=ax), "concat", tuple(tensors), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = _axis(axis, x.ndim)
    n = x.shape[ax]
    if not 0 <= start <= stop <= n:
        raise IndexError(f"slice [{start}:{stop}] out of range for extent {n}")
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _result(x.data[idx].copy(), "slice", (x,), backward)


def gather(x: Tensor, ids) -> Tensor:
    """Rows of ``x`` (axis 0) at integer ``ids``; repeated ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    n = x.shape[0]
    if ids.size and (ids.min() < -n or ids.max() >= n):
        raise IndexError(f"id out of range for {n} rows")
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, ids, g)
        return (full,)

    return _result(x.data[ids], "gather", (x,), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    return gather(table, ids)


def expand(x: Tensor, n: int) -> Tensor:
    """Repeat ``x`` along a new leading axis of extent ``n``."""
    return _result(np.broadcast_to(x.data, (n,) + x.shape).copy(), "expand", (x,), lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------- normalization


def _softmax(xd: np.ndarray, axis: int) -> np.ndarray:
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _axis(axis, x.ndim)
    p = _softmax(x.data, ax)

    def backward(g):
        return (p * (g - (g * p).sum(axis=ax, keepdims=True)),)

    return _result(p, "softmax", (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _axis(axis, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _result(out, "log_softmax", (x,), lambda g: (g - p * g.sum(axis=ax, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last extent {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        if not gain.requires_grad and not bias.requires_grad:
            return gx, None, None
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + bias.data, "layer_norm", (x, gain, bias), backward)


# ---------------------------------------------------------------- attention


class AttentionMaskError(ValueError):
    """A query row has no admissible key."""


def attention(q: Tensor, k: Tensor, v: Tensor, mask=None, n_heads: int = 1) -> Tensor:
    """Multi-head scaled dot-product attention.

    q: (..., Tq, d); k, v: (..., Tk, d); mask: boolean, broadcastable to
    (..., Tq, Tk), True where attending is allowed.
    """
    squeeze = q.ndim == 2
    qd, kd, vd = q.data, k.data, v.data
    if squeeze:
        qd, kd, vd = qd[None], kd[None], vd[None]
    B, Tq, d = qd.shape
    Tk = kd.shape[1]
    if kd.shape != (B, Tk, d) or vd.shape != (B, Tk, d):
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} are inconsistent")
    if d % n_heads:
        raise ShapeError(f"attention: width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    qh = qd.reshape(B, Tq, n_heads, dh).transpose(0, 2, 1, 3)
    kh = kd.reshape(B, Tk, n_heads, dh).transpose(0, 2, 1, 3)
    vh = vd.reshape(B, Tk, n_heads, dh).transpose(0, 2, 1, 3)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if squeeze and m.ndim == 2:
            m = m[None]
        if m.shape[-2:] != (Tq, Tk):
            raise ShapeError(f"attention: mask {m.shape} does not match {Tq}x{Tk}")
        m = m.reshape((m.shape[0] if m.ndim == 3 else 1), 1, Tq, Tk)
        if not m.any(axis=-1).all():
            raise AttentionMaskError("attention: a query row is fully masked")
        scores = np.where(m, scores, -np.inf)
    p = _softmax(scores, -1)
    out = (p @ vh).transpose(0, 2, 1, 3).reshape(B, Tq, d)
    if squeeze:
        out = out[0]

    def backward(g):
        gh = (g[None] if squeeze else g).reshape(B, Tq, n_heads, dh).transpose(0, 2, 1, 3)
        gv = p.transpose(0, 1, 3, 2) @ gh
        gp = gh @ vh.transpose(0, 1, 3, 2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * (1.0 / math.sqrt(dh))
        gq = gs @ kh
        gk = gs.transpose(0, 1, 3, 2) @ qh
        merge = lambda t, n: t.transpose(0, 2, 1, 3).reshape(B, n, d)
        gq, gk, gv = merge(gq, Tq), merge(gk, Tk), merge(gv, Tk)
        if squeeze:
            return gq[0], gk[0], gv[0]
        return gq, gk, gv

    return _result(out, "attention", (q, k, v), backward)


# ---------------------------------------------------------------- losses


def cross_entropy_logits(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over unmasked positions."""
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.size != flat.shape[0]:
        raise ShapeError(f"cross_entropy: {t.size} targets for {flat.shape[0]} positions")
    m = np.ones(t.size, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    n = int(m.sum())
    if n == 0:
        raise DegenerateLossError("cross_entropy: every position is masked")
    tm = np.where(m, t, 0)
    if (t[m] < 0).any() or (t[m] >= V).any():
        raise IndexError(f"cross_entropy: target outside vocabulary of {V}")
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(t.size)
    nll = lse - z[rows, tm]
    loss = float((nll * m).sum() / n)
    shape = logits.shape

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, tm] -= 1.0
        p *= (m / n)[:, None] * float(g)
        return (p.reshape(shape),)

    return _result(np.array(loss), "cross_entropy", (logits,), backward)


# ---------------------------------------------------------------- backward


class Tape:
    """Topologically ordered nodes reachable from an output."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [out]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or node.id in seen:
                continue
            seen.add(node.id)
            nodes.append(node)
            stack.extend(i for i in node.inputs if i.requires_grad)
        nodes.sort(key=lambda n: n.id)
        return cls(nodes)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any trainable tensor")
    if loss.node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return Tape([])
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {loss.node.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        out_grad = grads.pop(node.id, None)
        if out_grad is None:
            continue
        for inp, g in zip(node.inputs, node.backward(out_grad)):
            if g is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = g.copy() if inp.grad is None else inp.grad + g
            else:
                key = inp.node.id
                grads[key] = g if key not in grads else grads[key] + g
    return tape
