"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op builds a node holding its parents and a closure that maps the
output adjoint to the parent adjoints. ``backward`` topologically sorts the
graph reachable from a scalar loss and replays the closures in reverse.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

DTYPE = np.float64

# Toggled off only by benchmarks; NaN/Inf after a forward op is an error state.
CHECK_FINITE = True


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = ""):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._consumed = False
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self, params: Iterable[Tensor] | None = None) -> None:
        backward(self, params)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    # a single sum propagates any NaN/Inf cheaply; it can also overflow on large finite
    # values, so a failed screen is confirmed elementwise
    if CHECK_FINITE and data.size and not np.isfinite(np.add.reduce(data, axis=None)) \
            and not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite values produced by {op}")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw, "mul")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def bw(g):
        return (g * (out > 0),)

    return _make(out, (x,), bw, "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return _make(out, (x,), bw, "exp")


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise FloatingPointError("log of non-positive value")
    out = np.log(x.data)

    def bw(g):
        return (g / x.data,)

    return _make(out, (x,), bw, "log")


def abs_(x: Tensor) -> Tensor:
    out = np.abs(x.data)
    sign = np.sign(x.data)

    def bw(g):
        return (g * sign,)

    return _make(out, (x,), bw, "abs")


def clamp(x: Tensor, lo, hi) -> Tensor:
    """Clip to [lo, hi]; gradient is blocked where the bound is active."""
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def bw(g):
        return (g * inside,)

    return _make(out, (x,), bw, "clamp")


# ------------------------------------------------------------------ reductions

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def max_reduce(x: Tensor, axis: int) -> tuple[Tensor, np.ndarray]:
    """Max along ``axis``; returns values and argmax (first occurrence on ties).

    The backward pass routes each incoming gradient to its argmax slot only.
    """
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"invalid axis {axis} for shape {x.shape}")
    axis = axis % x.ndim
    arg = np.argmax(x.data, axis=axis)
    idx = np.expand_dims(arg, axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(out, (x,), bw, "max_reduce"), arg


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), bw, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _make(out, (x,), bw, "transpose")


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    if not ts:
        raise ValueError("concat of empty sequence")
    nd = ts[0].ndim
    if not -nd <= axis < nd:
        raise ValueError(f"invalid axis {axis} for rank {nd}")
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ValueError(f"ragged concat: {[t.shape for t in ts]} along axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, ts, bw, "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    ax = axis % x.ndim
    if sum(sizes) != x.shape[ax]:
        raise ValueError(f"split sizes {list(sizes)} do not sum to extent {x.shape[ax]}")
    parts, start = [], 0
    for s in sizes:
        sl = [slice(None)] * x.ndim
        sl[ax] = slice(start, start + s)
        parts.append(index(x, tuple(sl)))
        start += s
    return parts


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def index(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    basic = _is_basic(idx)

    def bw(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _make(np.array(out), (x,), bw, "index")


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Batched row gather: x [B, N, C], idx [B, ...] int -> [B, ..., C]."""
    B, N, C = x.shape
    flat = (idx + (np.arange(B) * N).reshape((B,) + (1,) * (idx.ndim - 1))).reshape(-1)
    out = x.data.reshape(B * N, C)[flat].reshape(idx.shape + (C,))

    def bw(g):
        # scatter-add as a sparse product; rows sum in gather order, like np.add.at
        scatter = sparse.csr_matrix((np.ones(len(flat)), (flat, np.arange(len(flat)))),
                                    shape=(B * N, len(flat)))
        return ((scatter @ g.reshape(-1, C)).reshape(B, N, C),)

    return _make(out, (x,), bw, "gather_rows")


# ------------------------------------------------------------------ linear algebra

ROW_PAD = 8


def _row_stable_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` where each output row is bit-identical regardless of its position.

    OpenBLAS handles a ragged tail of rows with a different micro-kernel, so a row
    can round differently depending on where it sits. Padding the row count to a
    multiple of ``ROW_PAD`` routes every row through the same kernel, which keeps
    permutation invariance exact.
    """
    rows = a.shape[-2]
    extra = -rows % ROW_PAD
    if extra == 0:
        return np.matmul(a, b)
    pad = [(0, 0)] * a.ndim
    pad[-2] = (0, extra)
    return np.matmul(np.pad(a, pad), b)[..., :rows, :]


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        out = _row_stable_matmul(a.data, b.data)
    except ValueError as e:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}") from e

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map on the last axis: x @ w.T + b with w of shape [out, in]."""
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear in-extent mismatch: input {x.shape} vs weight {w.shape}")
    x2 = x.data.reshape(-1, w.shape[1])
    out2 = _row_stable_matmul(x2, w.data.T)
    if b is not None:
        out2 += b.data
    out = out2.reshape(x.shape[:-1] + (w.shape[0],))
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, w.shape[0])
        gx = (g2 @ w.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, bw, "linear")


# ------------------------------------------------------------------ normalization

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1, *,
               training: bool = True, running_mean: np.ndarray | None = None,
               running_var: np.ndarray | None = None, momentum: float = 0.9,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over every axis except ``axis``.

    Train mode uses the population variance of the current batch and, when
    running buffers are given, updates them in place:
    ``running = momentum * running + (1 - momentum) * batch``.
    Eval mode uses the running buffers unchanged.
    """
    ax = axis % x.ndim
    C = x.shape[ax]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"norm expects {C} channels, affine has {gamma.shape}")
    # work on a channel-last 2-D view [M, C]
    moved = ax != x.ndim - 1
    xd = np.moveaxis(x.data, ax, -1) if moved else x.data
    x2 = xd.reshape(-1, C)
    M = x2.shape[0]
    if training:
        if M < 2:
            raise ValueError("batch_norm in train mode needs more than one value per channel")
        ones = np.ones(M)
        mu = (ones @ x2) / M
        xc = x2 - mu
        # second pass removes the rounding left in the first mean (exact zero for constant input)
        corr = (ones @ xc) / M
        xc -= corr
        mu += corr
        var = np.einsum("ij,ij->j", xc, xc) / M
        if running_mean is not None:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mu
            running_var *= momentum
            running_var += (1.0 - momentum) * var
    else:
        xc = x2 - running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc
    xhat *= inv
    out2 = xhat * gamma.data
    out2 += beta.data
    out = out2.reshape(xd.shape)
    if moved:
        out = np.moveaxis(out, -1, ax)

    def bw(g):
        g2 = (np.moveaxis(g, ax, -1) if moved else g).reshape(-1, C)
        gb = np.ones(M) @ g2
        gg = np.einsum("ij,ij->j", g2, xhat)
        if not x.requires_grad:
            return None, gg, gb
        scale = gamma.data * inv
        if training:
            gx2 = xhat * (-gg / M)
            gx2 += g2
            gx2 -= gb / M
            gx2 *= scale
        else:
            gx2 = g2 * scale
        gx = gx2.reshape(xd.shape)
        return (np.moveaxis(gx, -1, ax) if moved else gx), gg, gb

    return _make(out, (x, gamma, beta), bw, "batch_norm")


# ------------------------------------------------------------------ softmax family

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def cross_entropy(logits: Tensor, target: np.ndarray, weight: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of integer ``target`` over rows of [M, K] logits.

    With per-class ``weight`` the mean is weighted: ``sum(w[t] * nll) / sum(w[t])``.
    """
    M = logits.shape[0]
    if M == 0:
        return Tensor(0.0)
    target = np.asarray(target, dtype=np.int64)
    lp = log_softmax(logits, axis=-1)
    picked = index(lp, (np.arange(M), target))
    if weight is None:
        return mul(sum_(picked), -1.0 / M)
    w = np.asarray(weight, dtype=np.float64)[target]
    return mul(sum_(picked * Tensor(w)), -1.0 / w.sum())


# ------------------------------------------------------------------ backward

def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate. Parameters passed in ``params`` that are not
    reachable get a zero gradient. The graph is released afterwards; calling
    backward on it again raises.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward called twice on the same graph; rerun the forward pass")
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    order = _topo(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if node._consumed:
                raise RuntimeError("backward called twice on the same graph; rerun the forward pass")
            if g is not None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        if g is None:
            g = np.zeros_like(node.data)
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg
        node._backward = None
        node._consumed = True


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, h: float = 1e-5,
                     indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences (f(x+h e) - f(x-h e)) / 2h, perturbing ``x`` in place.

    With ``indices`` only those flat positions are evaluated; the result then
    has one entry per index.
    """
    flat = x.data.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    out = np.empty(len(positions))
    for k, i in enumerate(positions):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f(x))
        flat[i] = orig - h
        fm = _scalar(f(x))
        flat[i] = orig
        out[k] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape) if indices is None else out


def _scalar(v) -> float:
    return float(v.data.reshape(-1)[0]) if isinstance(v, Tensor) else float(v)
