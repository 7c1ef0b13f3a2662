"""Attention kernels: masks, softmax attention, and linear attention.

Two kinds of code live here on purpose:

* Reference kernels on plain ndarrays (``causal_softmax_attention``,
  ``linear_attention_recurrent``, ``linear_attention_matmul``).  These are the
  ground-truth implementations that tests and the self-check command compare
  against each other; they value clarity over speed.
* Graph-building helpers on ``Tensor`` (head splitting, masked softmax
  attention, rotary tables) that the model layers compose during training.

Mask convention: ``allowed[i, j]`` is True when query row ``i`` may read
key/value column ``j``.  All masks are causal (``j <= i``); a sliding window
of width ``w`` sees ``[max(0, i-w+1), i]``, i.e. the token itself plus the
``w-1`` before it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tensor, rope_rotate

__all__ = [
    "MaskError",
    "AttentionMask",
    "causal_softmax_attention",
    "LinearAttentionState",
    "linear_attention_recurrent",
    "linear_attention_matmul",
    "AttentionProjections",
    "multihead_attention",
    "phi_by_name",
    "rope_tables",
    "split_heads",
    "merge_heads",
    "masked_softmax_attention_t",
    "NEG_FILL",
]

# Finite stand-in for -inf in masked scores; keeps softmax backward NaN-free
# and is far below any reachable score at either float precision.
NEG_FILL = -1e30


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionMask:
    """A causal attention mask with an explicit kind.

    kind: "full_causal", "sliding_window", or "selective".
    ``selected_rows`` only applies to selective masks: unselected rows are
    fully blocked (they produce no attention output), selected rows see their
    sliding window.
    """

    kind: str
    length: int
    window: int | None = None
    selected_rows: tuple = ()
    allowed: np.ndarray = field(repr=False, default=None)

    @staticmethod
    def full_causal(length: int) -> "AttentionMask":
        allowed = np.tril(np.ones((length, length), dtype=bool))
        return AttentionMask("full_causal", length, None, (), allowed)

    @staticmethod
    def sliding_window(length: int, window: int) -> "AttentionMask":
        if window < 1:
            raise MaskError(f"window must be >= 1, got {window}")
        allowed = sliding_window_allowed(length, window)
        return AttentionMask("sliding_window", length, window, (), allowed)

    @staticmethod
    def selective(length: int, window: int, selected_rows) -> "AttentionMask":
        if window < 1:
            raise MaskError(f"window must be >= 1, got {window}")
        rows = tuple(sorted(int(r) for r in selected_rows))
        if rows and (rows[0] < 0 or rows[-1] >= length):
            raise MaskError(f"selected rows {rows} out of range for length {length}")
        allowed = np.zeros((length, length), dtype=bool)
        win = sliding_window_allowed(length, window)
        for r in rows:
            allowed[r] = win[r]
        return AttentionMask("selective", length, window, rows, allowed)

    def density(self) -> float:
        return float(self.allowed.sum()) / float(self.length**2)


def sliding_window_allowed(length: int, window: int) -> np.ndarray:
    """Boolean (L, L) array: True where j in [max(0, i-window+1), i]."""
    i = np.arange(length)[:, None]
    j = np.arange(length)[None, :]
    return (j <= i) & (j > i - window)


def causal_softmax_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: AttentionMask
) -> np.ndarray:
    """Reference single-head softmax attention under ``mask``.

    o_i = sum_j softmax_j(q_i . k_j / sqrt(d)) v_j over allowed j.
    Fully-blocked rows return zero vectors, except that a *selected* row with
    no allowed column is a caller error.
    """
    L, d = q.shape
    if k.shape != (L, d) or v.shape[0] != L:
        raise MaskError(f"shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    if mask.length != L:
        raise MaskError(f"mask length {mask.length} vs sequence length {L}")
    allowed = mask.allowed
    row_any = allowed.any(axis=1)
    if mask.kind == "selective":
        for r in mask.selected_rows:
            if not row_any[r]:
                raise MaskError(f"selected row {r} has no allowed column")
    scores = (q @ k.T) / np.sqrt(d)
    scores = np.where(allowed, scores, NEG_FILL)
    scores = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(scores) * allowed
    denom = e.sum(axis=1, keepdims=True)
    out = np.zeros((L, v.shape[1]), dtype=v.dtype)
    live = row_any
    out[live] = (e[live] / denom[live]) @ v
    return out


# -- linear attention -----------------------------------------------------


def phi_by_name(phi) -> Callable[[np.ndarray], np.ndarray]:
    if callable(phi):
        return phi
    if phi == "identity":
        return lambda x: x
    if phi == "elu_plus_one":
        # elu(x) + 1: positive everywhere, smooth, identity-like for x > 0.
        return lambda x: np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))
    raise ValueError(f"unknown feature map {phi!r}")


@dataclass
class LinearAttentionState:
    """Running state of recurrent linear attention.

    S accumulates phi(k_j) v_j^T (shape d_k x d_v); z accumulates phi(k_j).
    """

    S: np.ndarray
    z: np.ndarray

    @staticmethod
    def zeros(d_k: int, d_v: int, dtype=np.float64) -> "LinearAttentionState":
        return LinearAttentionState(np.zeros((d_k, d_v), dtype=dtype), np.zeros(d_k, dtype=dtype))

    def update(self, phik: np.ndarray, v: np.ndarray) -> None:
        self.S = self.S + np.outer(phik, v)
        self.z = self.z + phik

    def readout(self, phiq: np.ndarray, normalize: bool) -> np.ndarray:
        o = self.S.T @ phiq
        if normalize:
            denom = float(self.z @ phiq)
            if denom <= 1e-12:
                raise FloatingPointError(f"degenerate linear-attention normalizer {denom}")
            o = o / denom
        return o


def linear_attention_recurrent(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    phi="elu_plus_one",
    normalize: bool = False,
):
    """Chronological-scan form: constant state, one token at a time."""
    f = phi_by_name(phi)
    L = q.shape[0]
    state = LinearAttentionState.zeros(k.shape[1], v.shape[1], dtype=v.dtype)
    out = np.zeros((L, v.shape[1]), dtype=v.dtype)
    for t in range(L):
        state.update(f(k[t]), v[t])
        out[t] = state.readout(f(q[t]), normalize)
    return out, state


def linear_attention_matmul(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    phi="elu_plus_one",
    normalize: bool = False,
) -> np.ndarray:
    """Parallel form: O = (phi(Q) phi(K)^T . M) V with causal mask M."""
    f = phi_by_name(phi)
    fq, fk = f(q), f(k)
    L = q.shape[0]
    a = (fq @ fk.T) * np.tril(np.ones((L, L), dtype=v.dtype))
    if normalize:
        denom = a.sum(axis=1, keepdims=True)
        if np.any(denom <= 1e-12):
            raise FloatingPointError("degenerate linear-attention normalizer")
        a = a / denom
    return a @ v


# -- multi-head reference -------------------------------------------------


@dataclass
class AttentionProjections:
    """Projection weights for multi-head attention (reference, ndarray)."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    n_heads: int

    def __post_init__(self):
        d = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            w = getattr(self, name)
            if w.shape != (d, d):
                raise MaskError(f"{name} must be ({d}, {d}), got {w.shape}")
        if d % self.n_heads:
            raise MaskError(f"d={d} not divisible by n_heads={self.n_heads}")


def multihead_attention(x: np.ndarray, proj: AttentionProjections, mask: AttentionMask) -> np.ndarray:
    """Reference multi-head causal attention: split, attend per head, concat, project."""
    L, d = x.shape
    h = proj.n_heads
    dh = d // h
    q, k, v = x @ proj.wq, x @ proj.wk, x @ proj.wv
    outs = []
    for i in range(h):
        sl = slice(i * dh, (i + 1) * dh)
        outs.append(causal_softmax_attention(q[:, sl], k[:, sl], v[:, sl], mask))
    return np.concatenate(outs, axis=1) @ proj.wo


# -- graph-side helpers ---------------------------------------------------


def rope_tables(positions: np.ndarray, dim: int, base: float = 10000.0, dtype=np.float64):
    """cos/sin tables of shape (len(positions), dim // 2) for rotary rotation."""
    if dim % 2:
        raise ValueError(f"rotary dim must be even, got {dim}")
    inv_freq = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_rotate_a(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Plain-array twin of the graph-side rotary rotation (same pairing)."""
    xr = x.reshape(x.shape[:-1] + (x.shape[-1] // 2, 2))
    x1, x2 = xr[..., 0], xr[..., 1]
    y = np.empty_like(xr)
    y[..., 0] = x1 * cos - x2 * sin
    y[..., 1] = x1 * sin + x2 * cos
    return y.reshape(x.shape)


def split_heads(t: Tensor, n_heads: int) -> Tensor:
    """(B, L, d) -> (B, H, L, d/H)."""
    b, l, d = t.shape
    return t.reshape(b, l, n_heads, d // n_heads).permute((0, 2, 1, 3))


def merge_heads(t: Tensor) -> Tensor:
    """(B, H, L, dh) -> (B, L, H*dh)."""
    b, h, l, dh = t.shape
    return t.permute((0, 2, 1, 3)).reshape(b, l, h * dh)


def masked_softmax_attention_t(
    q: Tensor, k: Tensor, v: Tensor, allowed: np.ndarray, *, rope: tuple | None = None
) -> Tensor:
    """Graph-side masked softmax attention over (B, H, L, dh) tensors.

    ``allowed`` broadcasts against the (B, H, L, L) score array, so a single
    (L, L) mask or a per-sequence (B, 1, L, L) stack both work.  ``rope`` is
    an optional (cos, sin) pair applied to q and k before the dot products.
    """
    if rope is not None:
        cos, sin = rope
        q = rope_rotate(q, cos, sin)
        k = rope_rotate(k, cos, sin)
    dh = q.shape[-1]
    scores = (q @ k.transpose_last()) * (1.0 / np.sqrt(dh))
    scores = scores.masked_fill(~np.asarray(allowed, dtype=bool), NEG_FILL)
    return scores.softmax() @ v
