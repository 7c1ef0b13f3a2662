"""Mamba-2 style SSD layer: scalar-decay state space with dual forms.

The core recurrence, per head, is

    h_t = a_t * h_{t-1} + B_t x_t^T        (state: d_state x d_head)
    o_t = C_t h_t

with a_t a per-token scalar in [0, 1].  Unrolling gives the equivalent
"attention-like" quadratic form

    O = (D . C B^T) X,    D[i, j] = prod_{k=j+1..i} a_k  (lower triangular)

where D is 1-semiseparable.  Training uses the quadratic form (dense matmuls,
cheap autodiff); decoding uses the recurrence (constant state).  With a_t = 1
everywhere, D is all ones below the diagonal and the layer *is* unnormalized
linear attention with Q := C, K := B, identity feature map.  The equivalence
of all of these is pinned by tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .layers import (
    SwiGLU,
    as_param,
    f32_round,
    init_normal,
    rmsnorm_a,
    rmsnorm_t,
    silu_a,
    softplus_a,
)
from .tensor import Tensor

__all__ = [
    "decay_matrix_reference",
    "decay_matrix",
    "ssd_recurrent",
    "ssd_matrix",
    "ssd_matrix_form_t",
    "MambaState",
    "Mamba2Block",
]

_MASK_FILL = -1e30  # exp() underflows this to an exact 0


def _validate_decay(a: np.ndarray) -> None:
    if np.any(a < 0.0) or np.any(a > 1.0):
        raise ValueError(f"decay factors must lie in [0, 1], got range [{a.min()}, {a.max()}]")


def decay_matrix_reference(a: np.ndarray) -> np.ndarray:
    """Literal-definition decay matrix: D[i, j] = prod of a over (j, i].

    Quadratic-time loop; exists purely as the oracle for ``decay_matrix``.
    """
    L = a.shape[0]
    D = np.zeros((L, L), dtype=a.dtype)
    for i in range(L):
        for j in range(i + 1):
            p = 1.0
            for k in range(j + 1, i + 1):
                p *= a[k]
            D[i, j] = p
    return D


def decay_matrix(a: np.ndarray) -> np.ndarray:
    """Fast decay matrix via cumulative log-sums.

    Exact zeros in ``a`` are handled with a separate zero-count cumsum: a
    product over (j, i] is zero iff that span contains a zero decay.
    """
    _validate_decay(a)
    L = a.shape[0]
    zero = a == 0.0
    cl = np.cumsum(np.log(np.where(zero, 1.0, a)), axis=-1)
    diff = cl[:, None] - cl[None, :]
    zc = np.cumsum(zero)
    has_zero = (zc[:, None] - zc[None, :]) > 0
    tril = np.tril(np.ones((L, L), dtype=bool))
    return np.where(tril & ~has_zero, np.exp(np.where(tril, diff, 0.0)), 0.0)


def ssd_recurrent(
    x: np.ndarray,
    a: np.ndarray,
    B: np.ndarray,
    C: np.ndarray,
    h0: np.ndarray | None = None,
):
    """Sequential scan form.  x: (L, dh), a: (L,), B/C: (L, ds).

    Returns (y, h_final) with y: (L, dh), h_final: (ds, dh).  The state can
    be threaded through chunked calls via ``h0``.
    """
    _validate_decay(a)
    L, dh = x.shape
    ds = B.shape[1]
    h = np.zeros((ds, dh), dtype=x.dtype) if h0 is None else h0.copy()
    y = np.empty((L, dh), dtype=x.dtype)
    for t in range(L):
        h = a[t] * h + np.outer(B[t], x[t])
        y[t] = C[t] @ h
    return y, h


def ssd_matrix(x: np.ndarray, a: np.ndarray, B: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Quadratic dual form on ndarrays: (decay . C B^T) x."""
    D = decay_matrix(a)
    return (D * (C @ B.T)) @ x


def ssd_matrix_form_t(x: Tensor, a: Tensor, B: Tensor, C: Tensor) -> Tensor:
    """Graph-side quadratic form, batched over leading (batch, head) dims.

    x: (N, H, L, dh), a: (N, H, L), B/C: (N, H, L, ds).
    """
    n, h, L = a.shape
    cl = a.log().cumsum(-1)
    ci = cl.reshape(n, h, L, 1).broadcast_to((n, h, L, L))
    cj = cl.reshape(n, h, 1, L).broadcast_to((n, h, L, L))
    blocked = ~np.tril(np.ones((L, L), dtype=bool))
    decay = (ci - cj).masked_fill(blocked, _MASK_FILL).exp()
    gram = C @ B.transpose_last()
    return (decay * gram) @ x


# -- the full block -------------------------------------------------------


@dataclass
class MambaState:
    """Per-layer decode state: conv tail plus the SSD state, fixed size."""

    conv_tail: np.ndarray  # (conv_kernel - 1, d_inner), raw pre-conv inputs
    h: np.ndarray  # (n_heads, d_state, d_head)

    @staticmethod
    def alloc(d_inner: int, n_heads: int, d_state: int, conv_kernel: int, dtype) -> "MambaState":
        return MambaState(
            conv_tail=np.zeros((conv_kernel - 1, d_inner), dtype=dtype),
            h=np.zeros((n_heads, d_state, d_inner // n_heads), dtype=dtype),
        )

    @property
    def nbytes(self) -> int:
        return self.conv_tail.nbytes + self.h.nbytes


class Mamba2Block:
    """Pre-norm Mamba-2 block followed by a residual SwiGLU MLP.

    norm -> in/gate projections -> depthwise causal conv -> silu -> per-head
    SSD -> silu gate -> out projection -> +residual; then
    norm -> SwiGLU -> +residual.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        d_model: int,
        *,
        d_state: int = 16,
        n_heads: int = 4,
        expand: int = 2,
        conv_kernel: int = 4,
        out_scale: float = 1.0,
        dtype=np.float64,
    ):
        d_inner = expand * d_model
        if d_inner % n_heads:
            raise ValueError(f"d_inner={d_inner} not divisible by n_heads={n_heads}")
        self.d_model = d_model
        self.d_inner = d_inner
        self.d_state = d_state
        self.n_heads = n_heads
        self.d_head = d_inner // n_heads
        self.conv_kernel = conv_kernel
        self.dtype = dtype

        self.norm1_w = as_param(np.ones(d_model, dtype=dtype))
        self.w_in = as_param(init_normal(rng, (d_model, d_inner), dtype=dtype))
        self.w_z = as_param(init_normal(rng, (d_model, d_inner), dtype=dtype))
        self.conv_w = as_param(init_normal(rng, (conv_kernel, d_inner), dtype=dtype))
        self.conv_b = as_param(np.zeros(d_inner, dtype=dtype))
        self.w_B = as_param(init_normal(rng, (d_inner, d_state), dtype=dtype))
        self.w_C = as_param(init_normal(rng, (d_inner, d_state), dtype=dtype))
        self.w_dt = as_param(init_normal(rng, (d_inner, n_heads), dtype=dtype))
        # dt bias: softplus^-1 of a log-uniform spread over [1e-3, 1e-1]
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=n_heads))
        self.b_dt = as_param(f32_round(dt + np.log(-np.expm1(-dt)), dtype))
        self.A_log = as_param(f32_round(np.log(rng.uniform(1.0, 16.0, size=n_heads)), dtype))
        self.w_out = as_param(init_normal(rng, (d_inner, d_model), std=0.02 * out_scale, dtype=dtype))
        self.norm2_w = as_param(np.ones(d_model, dtype=dtype))
        self.mlp = SwiGLU(rng, d_model, 2 * d_model, out_scale, dtype=dtype)

    def params(self, prefix: str):
        out = [
            (f"{prefix}.norm1_w", self.norm1_w),
            (f"{prefix}.w_in", self.w_in),
            (f"{prefix}.w_z", self.w_z),
            (f"{prefix}.conv_w", self.conv_w),
            (f"{prefix}.conv_b", self.conv_b),
            (f"{prefix}.w_B", self.w_B),
            (f"{prefix}.w_C", self.w_C),
            (f"{prefix}.w_dt", self.w_dt),
            (f"{prefix}.b_dt", self.b_dt),
            (f"{prefix}.A_log", self.A_log),
            (f"{prefix}.w_out", self.w_out),
            (f"{prefix}.norm2_w", self.norm2_w),
        ]
        out.extend(self.mlp.params(f"{prefix}.mlp"))
        return out

    # -- training path ----------------------------------------------------

    def _conv_t(self, u: Tensor) -> Tensor:
        b, L, c = u.shape
        K = self.conv_kernel
        pad = Tensor(np.zeros((b, K - 1, c), dtype=u.data.dtype))
        up = tt.concat([pad, u], axis=1)
        acc = None
        for k in range(K):
            wk = self.conv_w.slice_axis(0, k, k + 1).reshape(c)
            term = up.slice_axis(1, k, k + L) * wk
            acc = term if acc is None else acc + term
        return acc + self.conv_b

    def forward(self, x: Tensor) -> Tensor:
        b, L, d = x.shape
        H, dh, ds = self.n_heads, self.d_head, self.d_state
        r = x
        hn = rmsnorm_t(x, self.norm1_w)
        u = self._conv_t(hn @ self.w_in).silu()
        z = hn @ self.w_z
        dt = (u @ self.w_dt + self.b_dt).softplus()
        a = -(dt * self.A_log.exp())
        a = a.exp().permute((0, 2, 1))  # (B, H, L)
        Bv = (u @ self.w_B).reshape(b, L, 1, ds).broadcast_to((b, L, H, ds)).permute((0, 2, 1, 3))
        Cv = (u @ self.w_C).reshape(b, L, 1, ds).broadcast_to((b, L, H, ds)).permute((0, 2, 1, 3))
        xh = u.reshape(b, L, H, dh).permute((0, 2, 1, 3))
        y = ssd_matrix_form_t(xh, a, Bv, Cv)
        y = y.permute((0, 2, 1, 3)).reshape(b, L, self.d_inner)
        y = y * z.silu()
        x = r + y @ self.w_out
        return x + self.mlp(rmsnorm_t(x, self.norm2_w))

    # -- decode path ------------------------------------------------------

    def alloc_state(self) -> MambaState:
        return MambaState.alloc(self.d_inner, self.n_heads, self.d_state, self.conv_kernel, self.dtype)

    def step(self, x: np.ndarray, state: MambaState) -> np.ndarray:
        """One-token update.  x: (d_model,); mutates ``state`` in place."""
        hn = rmsnorm_a(x, self.norm1_w.data)
        u0 = hn @ self.w_in.data
        window = np.concatenate([state.conv_tail, u0[None, :]], axis=0)
        state.conv_tail = window[1:]
        u = silu_a((self.conv_w.data * window).sum(axis=0) + self.conv_b.data)
        z = hn @ self.w_z.data
        dt = softplus_a(u @ self.w_dt.data + self.b_dt.data)
        a = np.exp(-dt * np.exp(self.A_log.data))  # (H,)
        Bv = u @ self.w_B.data
        Cv = u @ self.w_C.data
        xh = u.reshape(self.n_heads, self.d_head)
        state.h = a[:, None, None] * state.h + Bv[None, :, None] * xh[:, None, :]
        y = np.einsum("s,hsd->hd", Cv, state.h).reshape(self.d_inner)
        y = y * silu_a(z)
        x = x + y @ self.w_out.data
        return x + self.mlp.apply_a(rmsnorm_a(x, self.norm2_w.data))
