"""Small shared layers and init helpers.

Most layers exist in two forms: a ``Tensor`` form used by the training
forward pass, and an ndarray form (``*_a``) used by the per-token decode
path, where no gradients are needed.  The two are kept line-for-line
parallel; the decode-equals-forward tests pin them together.

All parameter initial values are rounded through float32 regardless of the
compute dtype.  Checkpoints store float32, so this makes a freshly built
model serialize and reload with bit-identical behaviour.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

RMSNORM_EPS = 1e-5


def init_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float64) -> np.ndarray:
    """Clipped normal init (two-sigma clip), rounded through float32."""
    w = rng.normal(0.0, std, size=shape)
    np.clip(w, -2.0 * std, 2.0 * std, out=w)
    return w.astype(np.float32).astype(dtype)


def as_param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


def f32_round(arr: np.ndarray, dtype) -> np.ndarray:
    return arr.astype(np.float32).astype(dtype)


# -- rmsnorm --------------------------------------------------------------


def rmsnorm_t(x: Tensor, w: Tensor) -> Tensor:
    ms = (x * x).mean(axis=-1, keepdims=True)
    inv = (ms + RMSNORM_EPS) ** -0.5
    return x * inv.broadcast_to(x.shape) * w


def rmsnorm_a(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x * ((ms + RMSNORM_EPS) ** -0.5) * w


# -- activations (ndarray decode path) ------------------------------------


def sigmoid_a(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu_a(x: np.ndarray) -> np.ndarray:
    return x * sigmoid_a(x)


def softplus_a(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


# -- swiglu ---------------------------------------------------------------


class SwiGLU:
    """Gated MLP: down(silu(gate(x)) * up(x)); hidden width is a caller choice."""

    def __init__(self, rng, d_in: int, d_hidden: int, out_scale: float, dtype=np.float64):
        self.w_gate = as_param(init_normal(rng, (d_in, d_hidden), dtype=dtype))
        self.w_up = as_param(init_normal(rng, (d_in, d_hidden), dtype=dtype))
        self.w_down = as_param(init_normal(rng, (d_hidden, d_in), std=0.02 * out_scale, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ((x @ self.w_gate).silu() * (x @ self.w_up)) @ self.w_down

    def apply_a(self, x: np.ndarray) -> np.ndarray:
        return (silu_a(x @ self.w_gate.data) * (x @ self.w_up.data)) @ self.w_down.data

    def params(self, prefix: str):
        return [
            (f"{prefix}.w_gate", self.w_gate),
            (f"{prefix}.w_up", self.w_up),
            (f"{prefix}.w_down", self.w_down),
        ]
