"""Minimal reverse-mode autodiff on dense numpy arrays.

Design notes:

* Define-by-run: while a ``Graph`` is active (see ``record``), every op whose
  inputs require gradients appends an operation record to the graph.  Backward
  walks the records once, in reverse creation order, which is a valid
  topological order by construction.
* float64 is the default dtype; callers may build float32 graphs for speed.
  ``log_softmax`` always accumulates in float64 regardless of input dtype.
* Shape discipline is deliberately strict: elementwise ops accept exactly
  equal shapes, a scalar, or a lower-rank operand whose shape is a trailing
  suffix of the other's (a bias vector against a batched activation).  Any
  other mismatch raises ``ShapeError`` naming both shapes.  Anything fancier
  must go through an explicit ``broadcast_to``.
* No graph active (or inputs without gradients) means ops run as plain numpy
  with no bookkeeping; that path is what inference decoding and the central
  finite-difference oracle use.

A graph is single-owner: one backward call consumes it.  Parallel evaluation
is possible only across independent graphs (the active graph is thread-local).
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "GraphError",
    "ShapeError",
    "Tensor",
    "Graph",
    "record",
    "no_grad",
    "concat",
    "straight_through",
    "finite_difference_check",
    "set_validation",
]


class ShapeError(ValueError):
    """Raised when operand shapes break the (deliberately strict) shape rules."""


class GraphError(RuntimeError):
    """Raised on graph misuse: double backward, non-scalar loss, and friends."""


_state = threading.local()

# Reject NaN/Inf in explicitly constructed tensors.  Op outputs are not
# re-scanned; the flag guards the boundary where external data enters.
_VALIDATE = True


def set_validation(enabled: bool) -> None:
    global _VALIDATE
    _VALIDATE = bool(enabled)


def _active_graph() -> "Graph | None":
    return getattr(_state, "graph", None)


class Graph:
    """Ordered tape of operation records for one forward/backward pass."""

    __slots__ = ("records", "consumed")

    def __init__(self) -> None:
        self.records: list[Tensor] = []
        self.consumed = False

    def __enter__(self) -> "Graph":
        if _active_graph() is not None:
            raise GraphError("a Graph is already active in this thread")
        _state.graph = self
        return self

    def __exit__(self, *exc) -> None:
        _state.graph = None

    def backward(self, loss: "Tensor", params: "Sequence[Tensor] | None" = None):
        """Run reverse-mode accumulation from scalar ``loss``.

        Fills ``.grad`` (a plain ndarray) on every requires-grad leaf that the
        loss depends on.  If ``params`` is given, returns ``{tensor: grad}``
        with explicit zero arrays for parameters the loss never touched.
        Each node is visited exactly once; a second call is an error.
        """
        if self.consumed:
            raise GraphError("graph already consumed by a previous backward")
        if loss.data.ndim != 0:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        self.consumed = True
        loss.grad = np.ones((), dtype=loss.data.dtype)
        for t in reversed(self.records):
            if t.grad is None or t._bwd is None:
                continue
            t._bwd(t.grad)
        self.records = []
        if params is not None:
            return {
                p: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for p in params
            }
        return None


class record(Graph):
    """Context manager alias: ``with record() as g: ... ; g.backward(loss)``."""


class no_grad:
    """Context that suspends recording even if a graph is active."""

    def __enter__(self):
        self._saved = _active_graph()
        _state.graph = None
        return self

    def __exit__(self, *exc):
        _state.graph = self._saved


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_op", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind == "f" and _VALIDATE and not np.all(np.isfinite(arr)):
            raise ValueError("non-finite values in tensor data")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._op: str | None = None
        self._parents: tuple = ()
        self._bwd: Callable | None = None

    # -- bookkeeping ------------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, parents: tuple, bwd: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        g = _active_graph()
        if g is not None and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._op = op
            out._parents = parents
            out._bwd = bwd
            g.records.append(out)
        else:
            out.requires_grad = False
            out._op = None
            out._parents = ()
            out._bwd = None
        return out

    def _accum(self, g: np.ndarray) -> None:
        # Accumulation is functional (never in place), so sharing is safe.
        self.grad = g if self.grad is None else self.grad + g

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, rg={self.requires_grad})"

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other):
        other = _wrap(other, self)
        _check_elementwise("add", self.data.shape, other.data.shape)

        def bwd(g, a=self, b=other):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.data.shape))

        return Tensor._from_op(self.data + other.data, "add", (self, other), bwd)

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other, self)
        _check_elementwise("sub", self.data.shape, other.data.shape)

        def bwd(g, a=self, b=other):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g, b.data.shape))

        return Tensor._from_op(self.data - other.data, "sub", (self, other), bwd)

    def __rsub__(self, other):
        return _wrap(other, self).__sub__(self)

    def __mul__(self, other):
        other = _wrap(other, self)
        _check_elementwise("mul", self.data.shape, other.data.shape)

        def bwd(g, a=self, b=other):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._from_op(self.data * other.data, "mul", (self, other), bwd)

    __rmul__ = __mul__

    def __neg__(self):
        return Tensor._from_op(-self.data, "neg", (self,), lambda g, s=self: s._accum(-g))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other.pow(-1.0)
        return self * (1.0 / float(other))

    def __rtruediv__(self, other):
        return self.pow(-1.0) * float(other)

    def __pow__(self, c):
        return self.pow(c)

    def pow(self, c: float) -> "Tensor":
        c = float(c)
        y = self.data ** c

        def bwd(g, s=self, c=c, y=y):
            s._accum(g * (c * s.data ** (c - 1.0)))

        return Tensor._from_op(y, "pow", (self,), bwd)

    # -- transcendental ---------------------------------------------------

    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        return Tensor._from_op(y, "exp", (self,), lambda g, s=self, y=y: s._accum(g * y))

    def log(self) -> "Tensor":
        y = np.log(self.data)
        return Tensor._from_op(y, "log", (self,), lambda g, s=self: s._accum(g / s.data))

    def sigmoid(self) -> "Tensor":
        y = _sigmoid(self.data)
        return Tensor._from_op(y, "sigmoid", (self,), lambda g, s=self, y=y: s._accum(g * y * (1.0 - y)))

    def silu(self) -> "Tensor":
        sg = _sigmoid(self.data)
        y = self.data * sg

        def bwd(g, s=self, sg=sg):
            s._accum(g * (sg * (1.0 + s.data * (1.0 - sg))))

        return Tensor._from_op(y, "silu", (self,), bwd)

    def softplus(self) -> "Tensor":
        y = np.logaddexp(0.0, self.data)

        def bwd(g, s=self):
            s._accum(g * _sigmoid(s.data))

        return Tensor._from_op(y, "softplus", (self,), bwd)

    def softmax(self) -> "Tensor":
        """Softmax over the last axis (the only axis this library supports)."""
        x = self.data
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=-1, keepdims=True)

        def bwd(g, s=self, y=y):
            s._accum(y * (g - (g * y).sum(axis=-1, keepdims=True)))

        return Tensor._from_op(y, "softmax", (self,), bwd)

    def log_softmax(self) -> "Tensor":
        """Log-softmax over the last axis, accumulated in float64.

        Uses max-subtraction before the log-sum-exp so that cross-entropy
        built on top of it is stable at any input scale.
        """
        x64 = self.data.astype(np.float64, copy=False)
        shifted = x64 - x64.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        y = (shifted - lse).astype(self.data.dtype, copy=False)

        def bwd(g, s=self, y=y):
            soft = np.exp(y)
            s._accum(g - soft * g.sum(axis=-1, keepdims=True))

        return Tensor._from_op(y, "log_softmax", (self,), bwd)

    # -- shape ops --------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        y = self.data.reshape(shape)
        return Tensor._from_op(y, "reshape", (self,), lambda g, s=self, old=old: s._accum(g.reshape(old)))

    def transpose_last(self) -> "Tensor":
        """Swap the last two axes."""
        if self.data.ndim < 2:
            raise ShapeError(f"transpose_last needs ndim >= 2, got shape {self.data.shape}")
        y = np.swapaxes(self.data, -1, -2)
        return Tensor._from_op(y, "transpose", (self,), lambda g, s=self: s._accum(np.swapaxes(g, -1, -2)))

    def permute(self, axes: Sequence[int]) -> "Tensor":
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        y = np.transpose(self.data, axes)
        return Tensor._from_op(y, "permute", (self,), lambda g, s=self, inv=inv: s._accum(np.transpose(g, inv)))

    def broadcast_to(self, shape: Sequence[int]) -> "Tensor":
        """Explicit broadcast; the only way to widen beyond the suffix rule."""
        shape = tuple(shape)
        src = self.data.shape
        y = np.broadcast_to(self.data, shape)

        def bwd(g, s=self, src=src):
            lead = g.ndim - len(src)
            if lead:
                g = g.sum(axis=tuple(range(lead)))
            axes = tuple(i for i, (a, b) in enumerate(zip(src, g.shape)) if a == 1 and b != 1)
            if axes:
                g = g.sum(axis=axes, keepdims=True)
            s._accum(g)

        return Tensor._from_op(y, "broadcast_to", (self,), bwd)

    def slice_axis(self, axis: int, start: int, stop: int) -> "Tensor":
        idx = [slice(None)] * self.data.ndim
        idx[axis] = slice(start, stop)
        idx = tuple(idx)
        y = self.data[idx]

        def bwd(g, s=self, idx=idx):
            full = np.zeros_like(s.data)
            full[idx] = g
            s._accum(full)

        return Tensor._from_op(y, "slice", (self,), bwd)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        y = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g, s=self, axis=axis, keepdims=keepdims):
            s._accum(_expand_reduced(g, s.data.shape, axis, keepdims))

        return Tensor._from_op(np.asarray(y), "sum", (self,), bwd)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        y = self.data.mean(axis=axis, keepdims=keepdims)

        def bwd(g, s=self, axis=axis, keepdims=keepdims, count=count):
            s._accum(_expand_reduced(g, s.data.shape, axis, keepdims) / count)

        return Tensor._from_op(np.asarray(y), "mean", (self,), bwd)

    def cumsum(self, axis: int) -> "Tensor":
        y = np.cumsum(self.data, axis=axis)

        def bwd(g, s=self, axis=axis):
            s._accum(np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis))

        return Tensor._from_op(y, "cumsum", (self,), bwd)

    # -- matmul -----------------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
        if a.ndim != b.ndim and a.ndim != 2 and b.ndim != 2:
            raise ShapeError(f"matmul: ranks must match or one operand be 2-D, got {a.shape} @ {b.shape}")
        if a.ndim == b.ndim and a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul leading (batch) dims disagree: {a.shape} @ {b.shape}")
        y = a @ b

        def bwd(g, s=self, o=other):
            if s.requires_grad:
                ga = g @ np.swapaxes(o.data, -1, -2)
                s._accum(_unbroadcast(ga, s.data.shape))
            if o.requires_grad:
                gb = np.swapaxes(s.data, -1, -2) @ g
                o._accum(_unbroadcast(gb, o.data.shape))

        return Tensor._from_op(y, "matmul", (self, other), bwd)

    __matmul__ = matmul

    # -- indexing / masking ----------------------------------------------

    def masked_fill(self, mask: np.ndarray, value: float) -> "Tensor":
        """Replace entries where ``mask`` is True with ``value`` (constant)."""
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), self.data.shape)
        y = np.where(mask, np.asarray(value, dtype=self.data.dtype), self.data)

        def bwd(g, s=self, mask=mask):
            s._accum(np.where(mask, 0.0, g))

        return Tensor._from_op(y, "masked_fill", (self,), bwd)

    def take_along_last(self, idx: np.ndarray) -> "Tensor":
        """Gather one entry per row along the last axis; grad scatter-adds."""
        idx = np.asarray(idx)
        if idx.shape != self.data.shape[:-1]:
            raise ShapeError(f"take_along_last: index shape {idx.shape} vs data {self.data.shape}")
        y = np.take_along_axis(self.data, idx[..., None], axis=-1)[..., 0]

        def bwd(g, s=self, idx=idx):
            full = np.zeros_like(s.data)
            np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
            s._accum(full)

        return Tensor._from_op(y, "take_last", (self,), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward into the table."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError("embedding ids must be integers")
    y = table.data[ids]

    def bwd(g, t=table, ids=ids):
        full = np.zeros_like(t.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        t._accum(full)

    return Tensor._from_op(y, "embedding", (table,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    y = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, ts=tuple(tensors), axis=axis, offsets=offsets):
        for i, t in enumerate(ts):
            if not t.requires_grad:
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            t._accum(g[tuple(idx)])

    return Tensor._from_op(y, "concat", tuple(tensors), bwd)


def rope_rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary rotation of feature pairs; backward rotates the other way.

    ``x`` has shape (..., L, d) with even d; features (2i, 2i+1) form a pair
    rotated by the angle whose cosine/sine sit at ``cos[..., L, i]``.
    """
    d = x.data.shape[-1]
    if d % 2:
        raise ShapeError(f"rope needs an even feature dim, got {d}")
    xr = x.data.reshape(x.data.shape[:-1] + (d // 2, 2))
    x1, x2 = xr[..., 0], xr[..., 1]
    y = np.empty_like(xr)
    y[..., 0] = x1 * cos - x2 * sin
    y[..., 1] = x1 * sin + x2 * cos
    y = y.reshape(x.data.shape)

    def bwd(g, s=x, cos=cos, sin=sin, d=d):
        gr = g.reshape(g.shape[:-1] + (d // 2, 2))
        g1, g2 = gr[..., 0], gr[..., 1]
        out = np.empty_like(gr)
        out[..., 0] = g1 * cos + g2 * sin
        out[..., 1] = -g1 * sin + g2 * cos
        s._accum(out.reshape(g.shape))

    return Tensor._from_op(y, "rope", (x,), bwd)


def straight_through(soft: Tensor, hard: np.ndarray) -> Tensor:
    """Forward takes the hard values; backward flows into ``soft`` unchanged.

    Built as ``soft + const(hard - soft)``.  For hard values in {0, 1} and
    soft values in (0, 1) the forward result is bit-exactly ``hard``
    (Sterbenz: the subtraction and the re-add are both exact).
    """
    hard = np.asarray(hard, dtype=soft.data.dtype)
    if hard.shape != soft.data.shape:
        raise ShapeError(f"straight_through: hard shape {hard.shape} vs soft {soft.data.shape}")
    return soft + Tensor(hard - soft.data)


# -- helpers -------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _suffix_compatible(small: tuple, big: tuple) -> bool:
    if len(small) > len(big):
        return False
    return small == big[len(big) - len(small):]


def _unbroadcast(g: np.ndarray, target_shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``target_shape`` (which is a trailing suffix of g's)."""
    if g.shape == target_shape:
        return g
    lead = g.ndim - len(target_shape)
    return g.sum(axis=tuple(range(lead)))


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _check_elementwise(op: str, sa: tuple, sb: tuple) -> None:
    if sa != sb and not _suffix_compatible(sb, sa) and not _suffix_compatible(sa, sb):
        raise ShapeError(
            f"{op}: shapes {sa} and {sb} are neither equal nor leading-batch compatible"
        )


# -- finite differences ---------------------------------------------------


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    atol: float = 1e-5,
) -> float:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must be a deterministic closure over ``params`` returning a scalar
    Tensor; determinism is verified by evaluating twice at the base point.
    Returns the max over all parameter entries of

        |analytic - central| / (|analytic| + |central| + atol)

    i.e. relative error with an absolute floor.  The floor matters: a central
    difference of a loss of size F carries ~F*ulp/eps of rounding noise, so
    entries whose true gradient sits near zero (or is exactly zero through
    cancelling paths) cannot be resolved relatively and would otherwise
    report O(1) error for a correct backward.  Everything comfortably above
    the floor is still judged relatively.  The central evaluations run
    without a graph, so only values are computed.
    """
    params = list(params)
    with no_grad():
        base1 = float(f().data)
        base2 = float(f().data)
    if base1 != base2:
        raise GraphError("finite_difference_check: f is not deterministic at the base point")

    for p in params:
        p.grad = None
    with record() as g:
        loss = f()
    grads = g.backward(loss, params=params)

    worst = 0.0
    for p in params:
        analytic = grads[p]
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            with no_grad():
                hi = float(f().data)
            flat[i] = keep - eps
            with no_grad():
                lo = float(f().data)
            flat[i] = keep
            central = (hi - lo) / (2.0 * eps)
            err = abs(aflat[i] - central) / (abs(aflat[i]) + abs(central) + atol)
            if err > worst:
                worst = err
    return worst
