"""Budgeted selective attention layer.

A two-way gate decides, per token, whether that token pays for windowed
softmax attention.  Selected tokens attend over the trailing window (keys and
values come from every token in the window, selected or not) and the result
is blended into the residual stream with a learned soft weight; unselected
tokens pass through untouched.  Selection is a hard sample, so the layer
trains through a straight-through estimator: forward uses the sampled 0/1
mask, backward uses the gradient of the Gumbel-softmax relaxation.  A
capacity penalty elsewhere in the loss holds the average selection rate near
a target budget, so attention cost stays a roughly constant fraction of the
sequence.

During training the windowed attention is computed densely for all rows and
multiplied by the gate; during decoding unselected tokens genuinely skip the
attention read (they still append their key/value so later selected tokens
can see them), which is where the compute saving actually lands.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (
    masked_softmax_attention_t,
    merge_heads,
    rope_rotate_a,
    rope_tables,
    sliding_window_allowed,
    split_heads,
)
from .layers import SwiGLU, as_param, f32_round, init_normal, rmsnorm_a, rmsnorm_t, sigmoid_a
from .tensor import Tensor, straight_through

__all__ = [
    "gumbel_noise",
    "GateDecision",
    "gumbel_gate",
    "WindowKVCache",
    "SelectiveAttentionLayer",
]

GATE_MODES = ("hard", "soft", "off")


def gumbel_noise(rng: np.random.Generator, shape, dtype=np.float64) -> np.ndarray:
    """Standard Gumbel(0, 1) draws: -log(-log(u)) with u uniform on (0, 1)."""
    u = rng.random(size=shape)
    u = np.maximum(u, np.finfo(np.float64).tiny)  # rng.random() can return 0.0
    return (-np.log(-np.log(u))).astype(dtype)


@dataclass
class GateDecision:
    """Record of one gating pass: the differentiable mask plus diagnostics.

    ``gate`` is what downstream computation multiplies by — the
    straight-through mask in "hard" mode, the relaxed probability in "soft"
    mode, and ``None`` when gating is off.  Everything else is detached
    bookkeeping: ``hard`` the realized 0/1 selection, ``soft`` the relaxed
    select probability under the same noise, ``realized_prob`` the relaxation
    evaluated at whichever class was actually sampled, ``alpha`` the
    noise-free blend weight, and ``noise`` the Gumbel draws (kept so a
    forward pass can be replayed token-for-token by a decoder or a gradient
    check).
    """

    hard: np.ndarray
    soft: np.ndarray
    realized_prob: np.ndarray
    scores: np.ndarray
    noise: np.ndarray
    gate: Tensor | None = None
    alpha: np.ndarray | None = None

    def selected_fraction(self) -> np.ndarray:
        """Fraction of tokens selected, per sequence."""
        return self.hard.mean(axis=-1)


def gumbel_gate(scores: Tensor, noise: np.ndarray, temperature: float, mode: str):
    """Two-class Gumbel-softmax gate with a straight-through hard sample.

    ``scores`` has shape (..., 2); class 1 means "select".  The relaxed
    probability is softmax((scores + noise) / temperature) and the hard
    decision is argmax(scores + noise) — the zero-temperature limit of the
    same perturbation, so P(select) = sigmoid(s1 - s0) regardless of
    ``temperature``.  In "hard" mode the returned gate takes the 0/1 values
    forward while routing gradients through the relaxation; in "soft" mode it
    is the relaxation itself (used by finite-difference checks, which need a
    continuous function).
    """
    if mode not in ("hard", "soft"):
        raise ValueError(f"gate mode must be one of {GATE_MODES}, got {mode!r}")
    if temperature <= 0.0:
        raise ValueError(f"gate temperature must be positive, got {temperature}")
    if noise.shape != scores.shape:
        raise ValueError(f"noise shape {noise.shape} != scores shape {scores.shape}")

    relaxed = ((scores + noise) * (1.0 / temperature)).softmax()
    lead = scores.shape[:-1]
    p_sel = relaxed.slice_axis(scores.ndim - 1, 1, 2).reshape(*lead)

    hard = (np.argmax(scores.data + noise, axis=-1) == 1).astype(scores.data.dtype)
    soft = p_sel.data.copy()
    realized = np.where(hard == 1.0, soft, 1.0 - soft)

    gate = straight_through(p_sel, hard) if mode == "hard" else p_sel
    decision = GateDecision(
        hard=hard, soft=soft, realized_prob=realized, scores=scores.data.copy(), noise=noise, gate=gate
    )
    return gate, decision


@dataclass
class WindowKVCache:
    """Fixed-size ring buffer of per-head keys/values for one layer.

    Softmax attention does not care about entry order, so wrapping simply
    overwrites the oldest slot and reads take whatever is populated.  The op
    counters exist so tests (and the benchmark) can verify that unselected
    tokens really skip the attention read.
    """

    k: np.ndarray  # (window, n_heads, d_head)
    v: np.ndarray
    count: int = 0
    kv_appends: int = 0
    attn_reads: int = 0

    @staticmethod
    def alloc(window: int, n_heads: int, d_head: int, dtype) -> "WindowKVCache":
        return WindowKVCache(
            k=np.zeros((window, n_heads, d_head), dtype=dtype),
            v=np.zeros((window, n_heads, d_head), dtype=dtype),
        )

    @property
    def nbytes(self) -> int:
        return self.k.nbytes + self.v.nbytes

    def append(self, kh: np.ndarray, vh: np.ndarray) -> None:
        slot = self.count % self.k.shape[0]
        self.k[slot] = kh
        self.v[slot] = vh
        self.count += 1
        self.kv_appends += 1

    def filled(self):
        n = min(self.count, self.k.shape[0])
        return self.k[:n], self.v[:n]


class SelectiveAttentionLayer:
    """Gated sliding-window attention block with a residual MLP.

    norm -> gate scores -> (selected only) windowed multi-head softmax
    attention, blended as h' = h + m * alpha * (attn - h) where m is the
    straight-through selection and alpha = sigmoid(s1 - s0) the noise-free
    blend weight; then norm -> SwiGLU -> +residual on every token.

    The gate bias starts at [0, logit(budget)] so a fresh layer selects
    tokens at the budget rate in expectation.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        d_model: int,
        *,
        n_heads: int = 4,
        window: int = 64,
        budget: float = 0.15,
        temperature: float = 1.0,
        rope: bool = False,
        out_scale: float = 1.0,
        dtype=np.float64,
    ):
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        if window < 1:
            raise ValueError(f"window must be >= 1, got {window}")
        if not 0.0 < budget < 1.0:
            raise ValueError(f"budget must lie in (0, 1), got {budget}")
        if temperature <= 0.0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.window = window
        self.budget = budget
        self.temperature = temperature
        self.rope = rope
        self.dtype = dtype

        self.norm1_w = as_param(np.ones(d_model, dtype=dtype))
        self.w_g = as_param(init_normal(rng, (d_model, 2), dtype=dtype))
        self.b_g = as_param(f32_round(np.array([0.0, np.log(budget / (1.0 - budget))]), dtype))
        # q/k never write to the residual stream, so they take fan-in scale
        # rather than the 0.02 residual-protecting init; at 0.02 the initial
        # score variance is ~3e-3 and the softmax starts out so uniform that
        # gradients through it are suppressed by roughly 1/window.
        qk_std = d_model ** -0.5
        self.w_q = as_param(init_normal(rng, (d_model, d_model), std=qk_std, dtype=dtype))
        self.w_k = as_param(init_normal(rng, (d_model, d_model), std=qk_std, dtype=dtype))
        self.w_v = as_param(init_normal(rng, (d_model, d_model), dtype=dtype))
        self.w_o = as_param(init_normal(rng, (d_model, d_model), std=0.02 * out_scale, dtype=dtype))
        self.norm2_w = as_param(np.ones(d_model, dtype=dtype))
        self.mlp = SwiGLU(rng, d_model, 2 * d_model, out_scale, dtype=dtype)

    def params(self, prefix: str):
        out = [
            (f"{prefix}.norm1_w", self.norm1_w),
            (f"{prefix}.w_g", self.w_g),
            (f"{prefix}.b_g", self.b_g),
            (f"{prefix}.w_q", self.w_q),
            (f"{prefix}.w_k", self.w_k),
            (f"{prefix}.w_v", self.w_v),
            (f"{prefix}.w_o", self.w_o),
            (f"{prefix}.norm2_w", self.norm2_w),
        ]
        out.extend(self.mlp.params(f"{prefix}.mlp"))
        return out

    # -- training path ----------------------------------------------------

    def _attend(self, n1: Tensor, pos0: int) -> Tensor:
        b, L, d = n1.shape
        q = split_heads(n1 @ self.w_q, self.n_heads)
        k = split_heads(n1 @ self.w_k, self.n_heads)
        v = split_heads(n1 @ self.w_v, self.n_heads)
        rope = None
        if self.rope:
            rope = rope_tables(np.arange(pos0, pos0 + L), self.d_head, dtype=self.dtype)
        allowed = sliding_window_allowed(L, self.window)
        return merge_heads(masked_softmax_attention_t(q, k, v, allowed, rope=rope)) @ self.w_o

    def forward(
        self,
        x: Tensor,
        *,
        gate_mode: str = "hard",
        rng: np.random.Generator | None = None,
        noise: np.ndarray | None = None,
        pos0: int = 0,
    ):
        """Full-sequence pass over (B, L, d).  Returns (output, GateDecision).

        "hard"/"soft" gating needs Gumbel noise: pass an ``rng`` to sample it
        or ``noise`` of shape (B, L, 2) to replay a previous draw.  "off"
        skips the attention path entirely (the layer degenerates to its MLP),
        which is both the budget-zero limit and the cheap baseline variant.
        """
        b, L, d = x.shape
        if gate_mode == "off":
            zeros = np.zeros((b, L), dtype=x.data.dtype)
            decision = GateDecision(
                hard=zeros,
                soft=zeros.copy(),
                realized_prob=np.ones_like(zeros),
                scores=np.zeros((b, L, 2), dtype=x.data.dtype),
                noise=np.zeros((b, L, 2), dtype=x.data.dtype),
                alpha=zeros.copy(),
            )
            h1 = x
        else:
            if noise is None:
                if rng is None:
                    raise ValueError("hard/soft gating needs an rng or a replayed noise array")
                noise = gumbel_noise(rng, (b, L, 2), dtype=x.data.dtype)
            n1 = rmsnorm_t(x, self.norm1_w)
            s = n1 @ self.w_g + self.b_g
            gate, decision = gumbel_gate(s, noise, self.temperature, gate_mode)
            alpha = s.softmax().slice_axis(2, 1, 2).reshape(b, L)
            decision.alpha = alpha.data.copy()
            o = self._attend(n1, pos0)
            wmix = (gate * alpha).reshape(b, L, 1).broadcast_to((b, L, d))
            h1 = x + wmix * (o - x)
        return h1 + self.mlp(rmsnorm_t(h1, self.norm2_w)), decision

    # -- decode path ------------------------------------------------------

    def alloc_cache(self) -> WindowKVCache:
        return WindowKVCache.alloc(self.window, self.n_heads, self.d_head, self.dtype)

    def step(
        self,
        x: np.ndarray,
        cache: WindowKVCache,
        *,
        pos: int,
        rng: np.random.Generator | None = None,
        noise: np.ndarray | None = None,
        gate_mode: str = "hard",
    ):
        """One-token update.  x: (d_model,).  Returns (y, selected: bool).

        The key/value for this token is appended to the cache whether or not
        the token is selected; only selected tokens pay for the attention
        read.  ``noise`` (shape (2,)) replays a recorded draw, which makes a
        decode bit-for-bit comparable to the dense forward pass.
        """
        H, dh = self.n_heads, self.d_head
        if gate_mode == "off":
            selected = False
            h1 = x
        elif gate_mode != "hard":
            raise ValueError(f"decode supports gate modes 'hard' and 'off', got {gate_mode!r}")
        else:
            n1 = rmsnorm_a(x, self.norm1_w.data)
            s = n1 @ self.w_g.data + self.b_g.data
            if noise is None:
                if rng is None:
                    raise ValueError("hard gating needs an rng or a replayed noise array")
                noise = gumbel_noise(rng, (2,), dtype=x.dtype)
            selected = bool(np.argmax(s + noise) == 1)
            kh = (n1 @ self.w_k.data).reshape(H, dh)
            if self.rope:
                cos, sin = rope_tables(np.array([pos]), dh, dtype=self.dtype)
                kh = rope_rotate_a(kh, cos[0], sin[0])
            cache.append(kh, (n1 @ self.w_v.data).reshape(H, dh))
            if selected:
                qh = (n1 @ self.w_q.data).reshape(H, dh)
                if self.rope:
                    qh = rope_rotate_a(qh, cos[0], sin[0])
                ks, vs = cache.filled()
                scores = np.einsum("hd,nhd->hn", qh, ks) / np.sqrt(dh)
                scores -= scores.max(axis=-1, keepdims=True)
                w = np.exp(scores)
                w /= w.sum(axis=-1, keepdims=True)
                o = np.einsum("hn,nhd->hd", w, vs).reshape(self.d_model) @ self.w_o.data
                alpha = sigmoid_a(s[1] - s[0])
                h1 = x + alpha * (o - x)
                cache.attn_reads += 1
            else:
                h1 = x
        return h1 + self.mlp.apply_a(rmsnorm_a(h1, self.norm2_w.data)), selected

