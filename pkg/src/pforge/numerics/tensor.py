"""Dense tensors with reverse-mode automatic differentiation.

The engine is a thin tape over numpy arrays: every operation returns a new
Tensor holding the forward result plus a closure that maps the output
gradient to gradients for each parent. ``backward()`` walks the tape in
reverse topological order. Arrays are float32 by default; checks and oracles
run at float64. Operations never mutate their inputs.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPES = {"float32": np.float32, "float64": np.float64}

# Additive mask value for attention; exp(x - rowmax) underflows to exactly 0
# for masked entries at both precisions.
NEG_INF = -1.0e9

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the block (evaluation paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense array with an optional gradient and tape linkage.

    data is always a float32 or float64 ndarray; grad, when present, has the
    same shape and dtype. Integer inputs (token ids, positions) are passed to
    operations as plain numpy arrays, not Tensors.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, dtype: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(DTYPES[dtype])
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], tuple] | None = None

    # -- introspection -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- graph ---------------------------------------------------------------

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable Tensor."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bwd is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._bwd(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    def __radd__(self, other):
        return add(_coerce(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, neg(_coerce(other, self.dtype)))

    def __rsub__(self, other):
        return add(_coerce(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    def __rmul__(self, other):
        return mul(_coerce(other, self.dtype), self)

    def __matmul__(self, other):
        return matmul(self, _coerce(other, self.dtype))


def _coerce(x, dtype: np.dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    t = Tensor(np.asarray(x, dtype=dtype))
    return t


def _make(data: np.ndarray, parents: Sequence[Tensor], bwd: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
    else:
        out.requires_grad = False
        out._parents = ()
        out._bwd = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the given input shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def parameter(data, dtype: str = "float32") -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def const(data, dtype: np.dtype | str = np.float32) -> Tensor:
    arr = np.asarray(data, dtype=DTYPES.get(dtype, dtype))
    return Tensor(arr)


# ---------------------------------------------------------------------------
# elementwise and structural operations
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast to a larger shape; gradient sums over the broadcast axes."""
    shape = tuple(shape)
    old = a.shape
    data = np.broadcast_to(a.data, shape)
    return _make(data, (a,), lambda g: (_unbroadcast(g, old),))


def sum_all(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum(), dtype=a.dtype)
    return _make(data, (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(sum_all(a), 1.0 / n)


# ---------------------------------------------------------------------------
# core encoder operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product a @ b; inner dimensions must agree.

    Leading batch dimensions broadcast per numpy matmul semantics; the
    gradient sums broadcasted leading axes back onto each input.
    """
    if a.data.ndim < 1 or b.data.ndim < 1:
        raise ValueError("matmul requires at least 1-d operands")
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(
            f"matmul inner dimensions disagree: {a.shape} @ {b.shape}"
        )
    data = a.data @ b.data

    def bwd(g):
        bt = np.swapaxes(b.data, -1, -2) if b.data.ndim > 1 else b.data
        at = np.swapaxes(a.data, -1, -2) if a.data.ndim > 1 else a.data
        ga = _unbroadcast(g @ bt, a.shape) if b.data.ndim > 1 else None
        gb = _unbroadcast(at @ g, b.shape) if a.data.ndim > 1 else None
        if ga is None:
            ga = _unbroadcast(np.outer(g, b.data).reshape(a.shape), a.shape)
        if gb is None:
            gb = _unbroadcast(np.outer(a.data, g).reshape(b.shape), b.shape)
        return ga, gb

    return _make(data, (a, b), bwd)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, stabilized by row-max subtraction."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (a,), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = a.data.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(
            f"layer_norm affine shape mismatch: input last dim {d}, "
            f"gain {gain.shape}, bias {bias.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def bwd(g):
        gxhat = g * gain.data
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        ga = inv * (gxhat - m1 - xhat * m2)
        reduce_axes = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=reduce_axes)
        gbias = g.sum(axis=reduce_axes)
        return ga, ggain, gbias

    return _make(y, (a, gain, bias), bwd)


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    y = (x * cdf).astype(x.dtype)

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return ((cdf + x * pdf).astype(x.dtype) * g,)

    return _make(y, (a,), bwd)


IGNORE_INDEX = -100


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean negative log-softmax over rows whose target is not the ignore marker.

    logits: (N, C); targets: (N,) integer class ids, ignore_index elsewhere.
    Raises if every row is ignored.
    """
    targets = np.asarray(targets)
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy expects 2-d logits, got shape {logits.shape}")
    n, c = logits.data.shape
    if targets.shape != (n,):
        raise ValueError(f"targets shape {targets.shape} does not match logits rows {n}")
    keep = targets != ignore_index
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise ValueError("empty loss: all targets carry the ignore marker")
    tk = targets[keep]
    if tk.min() < 0 or tk.max() >= c:
        raise ValueError(f"target ids out of range [0, {c})")
    x = logits.data[keep]
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1)) + x.max(axis=-1)
    losses = lse - x[np.arange(n_keep), tk]
    data = np.asarray(losses.mean(), dtype=logits.dtype)

    def bwd(g):
        probs = np.exp(shifted)
        probs /= probs.sum(axis=-1, keepdims=True)
        probs[np.arange(n_keep), tk] -= 1.0
        full = np.zeros_like(logits.data)
        full[keep] = probs * (float(g) / n_keep)
        return (full,)

    return _make(data, (logits,), bwd)


def concat_seq(prefix: Tensor, seq: Tensor) -> Tensor:
    """Concatenate along the sequence axis (second to last); prefix rows first."""
    if prefix.shape[:-2] != seq.shape[:-2] or prefix.shape[-1] != seq.shape[-1]:
        raise ValueError(
            f"concat_seq trailing dimensions disagree: {prefix.shape} vs {seq.shape}"
        )
    n = prefix.shape[-2]
    data = np.concatenate([prefix.data, seq.data], axis=-2)

    def bwd(g):
        return (
            np.ascontiguousarray(g[..., :n, :]),
            np.ascontiguousarray(g[..., n:, :]),
        )

    return _make(data, (prefix, seq), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into an embedding table; gradient scatter-adds into rows."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(
            f"embedding ids out of range [0, {table.shape[0]}): "
            f"min {ids.min()}, max {ids.max()}"
        )
    data = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _make(data, (table,), bwd)


def gather_positions(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Select positions from a (B, T, d) tensor, returning (K, d)."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    if rows.shape != cols.shape:
        raise ValueError(f"row/col index shapes disagree: {rows.shape} vs {cols.shape}")
    data = x.data[rows, cols]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return _make(data, (x,), bwd)


def dropout(x: Tensor, p: float, gen: np.random.Generator) -> Tensor:
    """Inverted dropout with keep-probability 1-p; mask drawn from gen."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return _make(x.data, (x,), lambda g: (g,))
    keep = (gen.random(x.shape) >= p).astype(x.dtype)
    scale_ = 1.0 / (1.0 - p)
    data = x.data * keep * np.asarray(scale_, dtype=x.dtype)

    def bwd(g):
        return (g * keep * np.asarray(scale_, dtype=x.dtype),)

    return _make(data, (x,), bwd)


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    """(..., T, d) -> (..., h, T, d/h)."""
    *lead, t, d = x.shape
    if d % num_heads:
        raise ValueError(f"width {d} not divisible by {num_heads} heads")
    y = reshape(x, (*lead, t, num_heads, d // num_heads))
    perm = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return transpose(y, perm)


def merge_heads(x: Tensor) -> Tensor:
    """(..., h, T, dh) -> (..., T, h*dh)."""
    *lead, h, t, dh = x.shape
    perm = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return reshape(transpose(x, perm), (*lead, t, h * dh))
