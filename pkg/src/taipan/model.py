"""The full sequence model: Mamba-2 runs, selective attention every K layers.

Three variants share one skeleton.  "taipan" interleaves gated sliding-window
attention after every ``sal_interval`` Mamba-2 blocks; "mamba-only" is the
identical module list with every gate forced shut (so attention contributes
nothing and costs nothing at decode); "full-attention" swaps each gated layer
for a plain causal attention block whose key/value cache grows without bound
— the baseline whose memory curve the budgeted model is measured against.

The module also owns the checkpoint wire format: a little-endian binary
container ("TAIPAN01") holding a JSON config, named float32 tensors, and a
trailing CRC-32.  Parameters are committed through float32 on save, so a
save/load round trip is bit-exact by construction.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .attention import (
    masked_softmax_attention_t,
    merge_heads,
    rope_rotate_a,
    rope_tables,
    sliding_window_allowed,
    split_heads,
)
from .layers import SwiGLU, as_param, init_normal, rmsnorm_a, rmsnorm_t
from .mamba2 import Mamba2Block
from .sal import GateDecision, SelectiveAttentionLayer, WindowKVCache, gumbel_noise
from .tensor import Tensor, embedding

__all__ = [
    "VARIANTS",
    "ModelConfig",
    "AttentionBlock",
    "GrowingKVCache",
    "DecodeState",
    "TaipanModel",
    "CheckpointError",
    "write_container",
    "read_container",
    "save_checkpoint",
    "load_checkpoint",
]

VARIANTS = ("taipan", "mamba-only", "full-attention")


@dataclass
class ModelConfig:
    """Architecture hyperparameters.  Defaults are the reference setup."""

    vocab_size: int = 512
    d_model: int = 128
    n_mamba_layers: int = 12
    sal_interval: int = 6
    n_heads: int = 4
    d_state: int = 16
    expand: int = 2
    conv_kernel: int = 4
    window: int = 64
    attn_budget: float = 0.15
    gumbel_temperature: float = 1.0
    rope: bool = False
    variant: str = "taipan"

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_mamba_layers", "sal_interval",
                     "n_heads", "d_state", "expand", "conv_kernel", "window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_mamba_layers % self.sal_interval:
            raise ValueError(
                f"n_mamba_layers={self.n_mamba_layers} must be a multiple of "
                f"sal_interval={self.sal_interval} so attention layers land evenly"
            )
        if not 0.0 < self.attn_budget < 1.0:
            raise ValueError(f"attn_budget must lie in (0, 1), got {self.attn_budget}")
        if self.gumbel_temperature <= 0.0:
            raise ValueError(f"gumbel_temperature must be positive, got {self.gumbel_temperature}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @property
    def n_sal(self) -> int:
        return self.n_mamba_layers // self.sal_interval

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)


class GrowingKVCache:
    """Unbounded per-layer key/value store (the full-attention baseline).

    Backed by capacity-doubling arrays so appends stay amortized O(1);
    ``nbytes`` reports the entries actually retained, which is the quantity
    whose growth the benchmark measures.
    """

    def __init__(self, n_heads: int, d_head: int, dtype, capacity: int = 64):
        self.k = np.zeros((capacity, n_heads, d_head), dtype=dtype)
        self.v = np.zeros((capacity, n_heads, d_head), dtype=dtype)
        self.count = 0

    @property
    def nbytes(self) -> int:
        per = self.k.itemsize * self.k.shape[1] * self.k.shape[2]
        return 2 * per * self.count

    def append(self, kh: np.ndarray, vh: np.ndarray) -> None:
        if self.count == self.k.shape[0]:
            self.k = np.concatenate([self.k, np.zeros_like(self.k)])
            self.v = np.concatenate([self.v, np.zeros_like(self.v)])
        self.k[self.count] = kh
        self.v[self.count] = vh
        self.count += 1

    def filled(self):
        return self.k[: self.count], self.v[: self.count]


class AttentionBlock:
    """Plain pre-norm causal attention block (no gate, no window) + SwiGLU."""

    def __init__(self, rng, d_model: int, *, n_heads: int, rope: bool, out_scale: float, dtype):
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.rope = rope
        self.dtype = dtype
        self.norm1_w = as_param(np.ones(d_model, dtype=dtype))
        qk_std = d_model ** -0.5  # fan-in; see SelectiveAttentionLayer.__init__
        self.w_q = as_param(init_normal(rng, (d_model, d_model), std=qk_std, dtype=dtype))
        self.w_k = as_param(init_normal(rng, (d_model, d_model), std=qk_std, dtype=dtype))
        self.w_v = as_param(init_normal(rng, (d_model, d_model), dtype=dtype))
        self.w_o = as_param(init_normal(rng, (d_model, d_model), std=0.02 * out_scale, dtype=dtype))
        self.norm2_w = as_param(np.ones(d_model, dtype=dtype))
        self.mlp = SwiGLU(rng, d_model, 2 * d_model, out_scale, dtype=dtype)

    def params(self, prefix: str):
        out = [
            (f"{prefix}.norm1_w", self.norm1_w),
            (f"{prefix}.w_q", self.w_q),
            (f"{prefix}.w_k", self.w_k),
            (f"{prefix}.w_v", self.w_v),
            (f"{prefix}.w_o", self.w_o),
            (f"{prefix}.norm2_w", self.norm2_w),
        ]
        out.extend(self.mlp.params(f"{prefix}.mlp"))
        return out

    def forward(self, x: Tensor) -> Tensor:
        b, L, d = x.shape
        n1 = rmsnorm_t(x, self.norm1_w)
        q = split_heads(n1 @ self.w_q, self.n_heads)
        k = split_heads(n1 @ self.w_k, self.n_heads)
        v = split_heads(n1 @ self.w_v, self.n_heads)
        rope = rope_tables(np.arange(L), self.d_head, dtype=self.dtype) if self.rope else None
        allowed = sliding_window_allowed(L, L)  # window >= length == full causal
        o = merge_heads(masked_softmax_attention_t(q, k, v, allowed, rope=rope)) @ self.w_o
        x = x + o
        return x + self.mlp(rmsnorm_t(x, self.norm2_w))

    def alloc_cache(self) -> GrowingKVCache:
        return GrowingKVCache(self.n_heads, self.d_head, self.dtype)

    def step(self, x: np.ndarray, cache: GrowingKVCache, *, pos: int) -> np.ndarray:
        H, dh = self.n_heads, self.d_head
        n1 = rmsnorm_a(x, self.norm1_w.data)
        kh = (n1 @ self.w_k.data).reshape(H, dh)
        qh = (n1 @ self.w_q.data).reshape(H, dh)
        if self.rope:
            cos, sin = rope_tables(np.array([pos]), dh, dtype=self.dtype)
            kh = rope_rotate_a(kh, cos[0], sin[0])
            qh = rope_rotate_a(qh, cos[0], sin[0])
        cache.append(kh, (n1 @ self.w_v.data).reshape(H, dh))
        ks, vs = cache.filled()
        scores = np.einsum("hd,nhd->hn", qh, ks) / np.sqrt(dh)
        scores -= scores.max(axis=-1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=-1, keepdims=True)
        o = np.einsum("hn,nhd->hd", w, vs).reshape(self.d_model) @ self.w_o.data
        x = x + o
        return x + self.mlp.apply_a(rmsnorm_a(x, self.norm2_w.data))


@dataclass
class DecodeState:
    """Per-block decode state plus the running position."""

    blocks: list
    position: int = 0

    @property
    def nbytes(self) -> int:
        return sum(b.nbytes for b in self.blocks)


class TaipanModel:
    """Token embedding -> interleaved block stack -> norm -> tied logits."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        c = config
        # every block contributes two residual branches; scale their output
        # projections down so the stack starts near the identity
        n_residual = 2 * (c.n_mamba_layers + c.n_sal)
        out_scale = 1.0 / np.sqrt(n_residual)

        self.embed = as_param(init_normal(rng, (c.vocab_size, c.d_model), dtype=dtype))
        self.blocks = []
        for i in range(c.n_mamba_layers):
            self.blocks.append(
                Mamba2Block(
                    rng, c.d_model, d_state=c.d_state, n_heads=c.n_heads, expand=c.expand,
                    conv_kernel=c.conv_kernel, out_scale=out_scale, dtype=dtype,
                )
            )
            if (i + 1) % c.sal_interval == 0:
                if c.variant == "full-attention":
                    self.blocks.append(
                        AttentionBlock(
                            rng, c.d_model, n_heads=c.n_heads, rope=c.rope,
                            out_scale=out_scale, dtype=dtype,
                        )
                    )
                else:
                    self.blocks.append(
                        SelectiveAttentionLayer(
                            rng, c.d_model, n_heads=c.n_heads, window=c.window,
                            budget=c.attn_budget, temperature=c.gumbel_temperature,
                            rope=c.rope, out_scale=out_scale, dtype=dtype,
                        )
                    )
        self.final_norm_w = as_param(np.ones(c.d_model, dtype=dtype))

    def params(self):
        out = [("embed.w", self.embed)]
        for i, block in enumerate(self.blocks):
            out.extend(block.params(f"blocks.{i}"))
        out.append(("final_norm_w", self.final_norm_w))
        return out

    def n_params(self) -> int:
        return sum(p.data.size for _, p in self.params())

    def sal_layers(self):
        return [b for b in self.blocks if isinstance(b, SelectiveAttentionLayer)]

    def _gate_mode(self, override: str | None) -> str:
        if self.config.variant == "mamba-only":
            return "off"
        return "hard" if override is None else override

    # -- training / teacher-forced path -----------------------------------

    def forward(
        self,
        tokens: np.ndarray,
        *,
        gate_mode: str | None = None,
        rng: np.random.Generator | None = None,
        noise: list | None = None,
    ):
        """Teacher-forced pass over (B, L) token ids.

        Returns (logits Tensor of shape (B, L, vocab), [GateDecision]) with
        one decision per gated layer in stack order.  ``noise`` replays
        recorded Gumbel draws (a list of (B, L, 2) arrays, one per gated
        layer); otherwise draws are taken from ``rng`` in stack order.
        """
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError(f"tokens must be (batch, length), got shape {tokens.shape}")
        b, L = tokens.shape
        mode = self._gate_mode(gate_mode)
        n_gated = sum(1 for blk in self.blocks if isinstance(blk, SelectiveAttentionLayer))
        if noise is not None and len(noise) != n_gated:
            raise ValueError(f"expected {n_gated} noise arrays, got {len(noise)}")

        x = embedding(self.embed, tokens)
        decisions: list[GateDecision] = []
        si = 0
        for block in self.blocks:
            if isinstance(block, SelectiveAttentionLayer):
                layer_noise = None
                if noise is not None:
                    layer_noise = noise[si]
                elif mode != "off":
                    if rng is None:
                        raise ValueError("hard/soft gating needs an rng or replayed noise")
                    layer_noise = gumbel_noise(rng, (b, L, 2), dtype=self.dtype)
                x, dec = block.forward(x, gate_mode=mode, noise=layer_noise)
                decisions.append(dec)
                si += 1
            else:
                x = block.forward(x)
        h = rmsnorm_t(x, self.final_norm_w)
        logits = h @ self.embed.transpose_last()  # tied output head
        return logits, decisions

    # -- decode path -------------------------------------------------------

    def alloc_decode_state(self) -> DecodeState:
        states = []
        for block in self.blocks:
            if isinstance(block, Mamba2Block):
                states.append(block.alloc_state())
            elif isinstance(block, SelectiveAttentionLayer) and self.config.variant == "mamba-only":
                # a gate that can never open needs no key/value memory
                states.append(WindowKVCache.alloc(0, block.n_heads, block.d_head, block.dtype))
            else:
                states.append(block.alloc_cache())
        return DecodeState(blocks=states)

    def step_decode(
        self,
        token: int,
        state: DecodeState,
        *,
        rng: np.random.Generator | None = None,
        sal_noise: list | None = None,
        gate_mode: str | None = None,
    ):
        """Feed one token, advance all block states, return (logits, selected).

        ``logits`` is a (vocab,) array for the *next* token; ``selected``
        lists the gate outcome of each gated layer at this position.
        ``sal_noise`` replays one (2,) Gumbel draw per gated layer.
        """
        mode = self._gate_mode(gate_mode)
        pos = state.position
        x = self.embed.data[int(token)].copy()
        selected: list[bool] = []
        si = 0
        for block, bstate in zip(self.blocks, state.blocks):
            if isinstance(block, Mamba2Block):
                x = block.step(x, bstate)
            elif isinstance(block, SelectiveAttentionLayer):
                layer_noise = None if sal_noise is None else sal_noise[si]
                x, sel = block.step(
                    x, bstate, pos=pos, rng=rng, noise=layer_noise, gate_mode=mode
                )
                selected.append(sel)
                si += 1
            else:
                x = block.step(x, bstate, pos=pos)
        state.position = pos + 1
        h = rmsnorm_a(x, self.final_norm_w.data)
        return h @ self.embed.data.T, selected

    def decode_sequence(
        self,
        tokens: np.ndarray,
        state: DecodeState | None = None,
        *,
        rng: np.random.Generator | None = None,
        sal_noise: list | None = None,
        gate_mode: str | None = None,
    ):
        """Run ``step_decode`` over a whole token sequence.

        Returns (logits (L, vocab), selected (n_gated, L) bool, state).
        ``sal_noise`` here is per layer of shape (L, 2), matching what a
        teacher-forced forward records in its GateDecisions.
        """
        tokens = np.asarray(tokens)
        if state is None:
            state = self.alloc_decode_state()
        L = tokens.shape[0]
        logits = np.empty((L, self.config.vocab_size), dtype=self.dtype)
        sel_rows: list[list[bool]] = []
        for t in range(L):
            step_noise = None
            if sal_noise is not None:
                step_noise = [arr[t] for arr in sal_noise]
            logits[t], sel = self.step_decode(
                tokens[t], state, rng=rng, sal_noise=step_noise, gate_mode=gate_mode
            )
            sel_rows.append(sel)
        selected = np.array(sel_rows, dtype=bool).T if sel_rows and sel_rows[0] else np.zeros((0, L), dtype=bool)
        return logits, selected, state


# -- checkpoint container --------------------------------------------------

CHECKPOINT_MAGIC = b"TAIPAN01"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def write_container(path, meta: dict, tensors) -> None:
    """Write the binary container atomically (temp file + rename).

    ``meta`` is any JSON-serializable dict; ``tensors`` is an iterable of
    (name, array) pairs stored as little-endian float32.  The model
    checkpoint and the optimizer-state sidecar both ride on this.
    """
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors = list(tensors)
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    buf += struct.pack("<I", len(blob))
    buf += blob
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb))
        buf += nb
        buf += struct.pack("<I", arr.ndim)
        for dim in arr.shape:
            buf += struct.pack("<Q", dim)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(buf))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf)
    os.replace(tmp, path)


def save_checkpoint(path, model: TaipanModel, extras: dict | None = None) -> None:
    """Write model weights as a checkpoint.

    Tensors are committed through float32; ``extras`` rides along in the
    JSON header (it must be JSON-serializable) and comes back verbatim from
    ``load_checkpoint`` — the training loop keeps its step counter and RNG
    state there.
    """
    meta = {"config": model.config.to_dict(), "extras": extras or {}}
    write_container(path, meta, ((name, p.data) for name, p in model.params()))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise CheckpointError("checkpoint truncated")
        out = self.raw[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def read_container(path):
    """Read a container back as (meta dict, {name: float32 array}).

    Fails loudly on a bad magic, an unknown version, or a CRC mismatch — a
    file either reads exactly or not at all.
    """
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 12:
        raise CheckpointError("checkpoint truncated")
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {raw[:8]!r}; not a model checkpoint")
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise CheckpointError("CRC mismatch; checkpoint corrupt or truncated")
    r = _Reader(raw[:-4])
    r.take(len(CHECKPOINT_MAGIC))
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u64() for _ in range(rank))
        size = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape)
    return meta, tensors


def load_checkpoint(path, *, dtype=np.float64, seed: int = 0):
    """Read a checkpoint back into a freshly built model.

    Returns (model, extras).  The architecture is rebuilt from the stored
    config; a tensor-name or shape mismatch is an error, never a partial
    load.
    """
    meta, tensors = read_container(path)
    config = ModelConfig.from_dict(meta["config"])
    model = TaipanModel(config, seed=seed, dtype=dtype)
    by_name = dict(model.params())
    unknown = set(tensors) - set(by_name)
    if unknown:
        raise CheckpointError(f"checkpoint tensors {sorted(unknown)[:4]} have no home in this model")
    missing = set(by_name) - set(tensors)
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {sorted(missing)[:4]}")
    for name, arr in tensors.items():
        if by_name[name].data.shape != arr.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {arr.shape}, model {by_name[name].data.shape}"
            )
        by_name[name].data[...] = arr.astype(dtype)
    return model, meta["extras"]
