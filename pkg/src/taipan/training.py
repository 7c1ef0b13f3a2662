"""Losses, optimizer, synthetic tasks, and the training loop.

The objective is next-token cross-entropy plus a capacity penalty that holds
each gated layer's selection rate near its budget:

    total = ce + lambda * sum_layers mean_batch (budget - selected_frac)^2

Two synthetic tasks drive the experiments.  The recall task plants key/value
pairs shortly before a run of queries, so answering requires retrieving an
exact binding from a few dozen tokens back — easy over an attention window,
awkward for a fixed-size recurrent state.  The language-modeling task is a
seeded Markov chain with verbatim repeat spans spliced in, so both smooth
statistics (which recurrence handles) and literal copying (which rewards
attention) carry probability mass.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import (
    TaipanModel,
    load_checkpoint,
    read_container,
    save_checkpoint,
    write_container,
)
from .tensor import Tensor, record

__all__ = [
    "cross_entropy",
    "constraint_loss",
    "total_loss",
    "AdamW",
    "lr_schedule",
    "RecallTask",
    "LMTask",
    "TrainConfig",
    "train",
    "evaluate_ppl",
    "evaluate_recall",
    "realized_selection",
    "zero_noise",
]

IGNORE_INDEX = -1


# -- losses ----------------------------------------------------------------


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy; target -1 marks positions to skip.

    ``logits`` is (B, L, vocab), ``targets`` (B, L) integer.  The mean runs
    over the non-ignored positions only.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} vs logits {logits.shape}")
    mask = targets != IGNORE_INDEX
    n = int(mask.sum())
    if n == 0:
        raise ValueError("cross_entropy: every position is masked out")
    safe = np.where(mask, targets, 0)
    lp = logits.log_softmax().take_along_last(safe)
    return -((lp * mask.astype(lp.data.dtype)).sum() / n)


def constraint_loss(decisions: list, budget: float) -> Tensor:
    """Capacity penalty: squared gap between realized and target selection.

    Per gated layer, each sequence contributes (budget - fraction)^2 where
    the fraction is the mean of the layer's differentiable gate over the
    sequence; sequences are averaged and layers summed.  Layers whose gate
    is off (no gate tensor) contribute nothing.
    """
    total = None
    for dec in decisions:
        if dec.gate is None:
            continue
        frac = dec.gate.mean(axis=-1)  # (B,)
        term = ((budget - frac) ** 2).mean()
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.asarray(0.0))
    return total


def total_loss(logits: Tensor, targets: np.ndarray, decisions: list, budget: float,
               lam: float = 0.1):
    """Returns (total, ce, constraint) Tensors; total = ce + lam * constraint."""
    ce = cross_entropy(logits, targets)
    con = constraint_loss(decisions, budget)
    return ce + lam * con, ce, con


# -- optimizer -------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay, bias correction, and global clipping.

    Decay only touches tensors of rank >= 2 — norm gains and biases are
    degenerate directions where shrinkage hurts.  The global-norm clip is
    applied before the moment update, i.e. the moments see clipped gradients.
    """

    def __init__(self, named_params, *, betas=(0.9, 0.95), eps=1e-8,
                 weight_decay=0.01, clip=1.0):
        self.named_params = list(named_params)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip = clip
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def step(self, grads: dict, lr: float) -> dict:
        """Apply one update.  ``grads`` maps Tensor -> gradient array.

        Returns {"grad_norm": pre-clip global norm, "clip_scale": factor}.
        Raises FloatingPointError if any gradient is non-finite — a poisoned
        update would silently corrupt every later step.
        """
        b1, b2 = self.betas
        sq = 0.0
        for name, p in self.named_params:
            g = grads[p]
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {name}")
            sq += float((g.astype(np.float64) ** 2).sum())
        gnorm = float(np.sqrt(sq))
        scale = 1.0 if gnorm <= self.clip else self.clip / gnorm
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.named_params:
            g = grads[p] * scale
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data -= lr * update
        return {"grad_norm": gnorm, "clip_scale": scale}

    def state_tensors(self):
        """Moment arrays as named tensors, for the resume sidecar."""
        out = []
        for name, _ in self.named_params:
            out.append((f"m.{name}", self.m[name]))
            out.append((f"v.{name}", self.v[name]))
        return out

    def load_state_tensors(self, tensors: dict, dtype) -> None:
        for name, _ in self.named_params:
            self.m[name] = tensors[f"m.{name}"].astype(dtype)
            self.v[name] = tensors[f"v.{name}"].astype(dtype)

    def commit_f32(self) -> None:
        """Round moments through float32 (checkpoint precision)."""
        for d in (self.m, self.v):
            for name in d:
                d[name] = d[name].astype(np.float32).astype(d[name].dtype)


def lr_schedule(step: int, *, total_steps: int, base_lr: float,
                warmup_steps: int, min_lr: float) -> float:
    """Linear warmup to ``base_lr``, then cosine decay to ``min_lr``.

    Warmup ramps over steps [0, warmup); the cosine leg hits ``min_lr``
    exactly at ``total_steps``.
    """
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    t = (step - warmup_steps) / span
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + np.cos(np.pi * min(t, 1.0)))


# -- synthetic tasks -------------------------------------------------------


@dataclass
class RecallTask:
    """Key/value recall with the bindings parked just before the queries.

    Sequence layout (length ``seq_len``):

        [filler ...] [k v (maybe filler) ...] [echoes] SEP [q a q a ...]

    Keys are unique per sequence; values are sampled with replacement; at
    ``distractor_rate`` extra filler tokens are sprinkled between the pairs.
    Queries repeat ``n_queries`` of the keys and the target at each query
    position is the bound value (everywhere else the target is -1).  The
    whole pairs+queries tail is kept shorter than ``window`` so a sliding
    window of that size can always see every binding — the recurrent path
    has no such guarantee, which is exactly the comparison the task exists
    to make.

    With ``n_echo`` > 0 the binding block is restated that many times (in
    fresh shuffled order), the restatements spread evenly through the
    sequence so each sits within one attention window of the previous one.
    The value positions of the restatements are supervised too: the second
    time a key appears its value is already determined, so predicting it is
    the same retrieval problem the queries pose.  The extra targets make
    the supervision dense enough for the retrieval circuit to form within a
    small step budget; reported recall accuracy still comes from the
    post-separator queries alone (see ``query_start``).
    """

    vocab_size: int = 512
    seq_len: int = 256
    n_pairs: int = 8
    n_queries: int = 4
    n_keys: int = 24
    n_values: int = 24
    distractor_rate: float = 0.25
    window: int = 64
    n_echo: int = 0

    def __post_init__(self):
        if self.n_pairs > self.n_keys:
            raise ValueError("need at least as many key tokens as pairs")
        if self.n_queries > self.n_pairs:
            raise ValueError("cannot query more pairs than exist")
        if self.n_echo < 0:
            raise ValueError("n_echo must be >= 0")
        if 1 + self.n_keys + self.n_values >= self.vocab_size:
            raise ValueError("vocab too small for the requested key/value ranges")
        per_pair = 3 if self.distractor_rate > 0 else 2
        block = self.n_pairs * per_pair
        # the body (everything before SEP) is cut into 1 + n_echo segments,
        # each ending with a binding block; every retrieval must stay
        # window-reachable from the statement before it
        body = self.seq_len - 1 - 2 * self.n_queries
        if body < (1 + self.n_echo) * block:
            raise ValueError("seq_len too short for the binding blocks and queries")
        seg = body // (1 + self.n_echo)
        if self.n_echo > 0 and seg + block - 2 > self.window:
            raise ValueError(
                f"echoed blocks sit up to {seg + block - 2} tokens apart, "
                f"past the window ({self.window}); raise n_echo or shrink the block"
            )
        if block + 1 + 2 * self.n_queries > self.window:
            raise ValueError(
                f"final block plus queries spans {block + 1 + 2 * self.n_queries} "
                f"tokens, past the window ({self.window})"
            )

    @property
    def query_start(self) -> int:
        """First position of the post-separator query region."""
        return self.seq_len - 2 * self.n_queries

    # vocab layout: 0 = SEP, then keys, then values, then filler
    @property
    def sep(self) -> int:
        return 0

    def key_token(self, i) -> np.ndarray:
        return 1 + np.asarray(i)

    def value_token(self, i) -> np.ndarray:
        return 1 + self.n_keys + np.asarray(i)

    def _filler(self, rng, n):
        lo = 1 + self.n_keys + self.n_values
        return rng.integers(lo, self.vocab_size, size=n)

    def sample(self, rng: np.random.Generator, batch_size: int):
        B, L = batch_size, self.seq_len
        inputs = np.empty((B, L), dtype=np.int64)
        targets = np.full((B, L), IGNORE_INDEX, dtype=np.int64)
        body = L - 1 - 2 * self.n_queries
        n_blocks = 1 + self.n_echo
        seg = body // n_blocks
        for b in range(B):
            keys = rng.choice(self.n_keys, size=self.n_pairs, replace=False)
            vals = rng.integers(0, self.n_values, size=self.n_pairs)
            seq, answer_pos = [], []
            for block in range(n_blocks):
                order = (np.arange(self.n_pairs) if block == 0
                         else rng.permutation(self.n_pairs))
                chunk = []
                for i in order:
                    if block > 0:
                        # restated binding: the key determines the value now
                        chunk.append(("answer", int(vals[i])))
                    chunk.append(("tok", int(self.key_token(keys[i]))))
                    chunk.append(("tok", int(self.value_token(vals[i]))))
                    if rng.random() < self.distractor_rate:
                        chunk.append(("tok", int(self._filler(rng, 1)[0])))
                # right-align the block in its segment, filler before it
                seg_len = seg + (body - n_blocks * seg if block == 0 else 0)
                n_tok = sum(1 for kind, _ in chunk if kind == "tok")
                for f in self._filler(rng, seg_len - n_tok):
                    seq.append(("tok", int(f)))
                seq.extend(chunk)
            seq.append(("tok", self.sep))
            q_idx = rng.choice(self.n_pairs, size=self.n_queries, replace=False)
            for qi in q_idx:
                seq.append(("answer", int(vals[qi])))
                seq.append(("tok", int(self.key_token(keys[qi]))))
                seq.append(("tok", int(self.value_token(vals[qi]))))
            pos = 0
            for kind, v in seq:
                if kind == "answer":
                    answer_pos.append((pos, v))
                else:
                    inputs[b, pos] = v
                    pos += 1
            assert pos == L, f"layout built {pos} tokens for length {L}"
            for p, v in answer_pos:
                targets[b, p] = int(self.value_token(v))
        return inputs, targets


@dataclass
class LMTask:
    """Markov-chain text with verbatim repeat spans.

    The transition table is built once from ``task_seed``: each token gets
    ``branching`` successors with Dirichlet weights, so the chain has low
    entropy but no exact determinism.  While emitting, with probability
    ``copy_prob`` per step the generator splices in an exact copy of a span
    seen ``copy_distance`` tokens ago — a lag chosen to sit inside an
    attention window.  Targets are the inputs shifted left (last target is
    ignored).
    """

    vocab_size: int = 512
    seq_len: int = 256
    branching: int = 6
    copy_prob: float = 0.03
    copy_span: int = 16
    copy_distance: int = 32
    task_seed: int = 1234

    def __post_init__(self):
        if self.copy_distance < self.copy_span:
            raise ValueError("copy_distance must be at least copy_span")
        r = np.random.default_rng(self.task_seed)
        V = self.vocab_size
        self.successors = np.empty((V, self.branching), dtype=np.int64)
        self.weights = np.empty((V, self.branching))
        for tok in range(V):
            self.successors[tok] = r.choice(V, size=self.branching, replace=False)
            w = r.dirichlet(np.ones(self.branching) * 0.5)
            self.weights[tok] = w

    def _emit(self, rng, length: int) -> np.ndarray:
        out = np.empty(length, dtype=np.int64)
        out[0] = rng.integers(0, self.vocab_size)
        t = 1
        while t < length:
            if t > self.copy_distance and rng.random() < self.copy_prob:
                span = min(self.copy_span, length - t)
                out[t : t + span] = out[t - self.copy_distance : t - self.copy_distance + span]
                t += span
                continue
            prev = out[t - 1]
            out[t] = rng.choice(self.successors[prev], p=self.weights[prev])
            t += 1
        return out

    def sample(self, rng: np.random.Generator, batch_size: int):
        inputs = np.stack([self._emit(rng, self.seq_len) for _ in range(batch_size)])
        targets = np.full_like(inputs, IGNORE_INDEX)
        targets[:, :-1] = inputs[:, 1:]
        return inputs, targets


# -- evaluation ------------------------------------------------------------


def zero_noise(model: TaipanModel, batch_size: int, seq_len: int) -> list:
    """Zero Gumbel draws: the deterministic most-likely gate decisions.

    One array per gated layer actually present — the full-attention
    variant has none, so it gets an empty list.
    """
    n_gated = len(model.sal_layers())
    return [np.zeros((batch_size, seq_len, 2), dtype=model.dtype)
            for _ in range(n_gated)]


def evaluate_ppl(model: TaipanModel, task, rng, *, n_batches: int, batch_size: int) -> dict:
    """Perplexity under deterministic (noise-free) gating."""
    nll, n = 0.0, 0
    for _ in range(n_batches):
        inputs, targets = task.sample(rng, batch_size)
        logits, _ = model.forward(inputs, noise=zero_noise(model, *inputs.shape))
        mask = targets != IGNORE_INDEX
        k = int(mask.sum())
        nll += float(cross_entropy(logits, targets).data) * k
        n += k
    return {"ppl": float(np.exp(nll / n)), "n_tokens": n}


def realized_selection(model: TaipanModel, task, rng, *, n_batches: int,
                       batch_size: int, sampled: bool = True) -> np.ndarray:
    """Per-gated-layer fraction of tokens actually routed to attention.

    With ``sampled=True`` the gates run as they do in training — Gumbel
    draws from ``rng`` — which is the regime the budget penalty constrains.
    With ``sampled=False`` the gates are noise-free (most-likely decision),
    measuring how many tokens the model would select deterministically.
    Returns an array of length ``n_sal`` averaged over all sampled tokens.
    """
    per = np.zeros(model.config.n_sal)
    for _ in range(n_batches):
        inputs, _ = task.sample(rng, batch_size)
        if sampled:
            _, decisions = model.forward(inputs, rng=rng)
        else:
            _, decisions = model.forward(inputs, noise=zero_noise(model, *inputs.shape))
        for i, dec in enumerate(decisions):
            per[i] += float(dec.hard.mean())
    return per / n_batches


def evaluate_recall(model: TaipanModel, task, rng, *, n_batches: int,
                    batch_size: int, gate_mode: str | None = None) -> dict:
    """Fraction of query positions answered exactly (argmax == bound value).

    Only positions from ``task.query_start`` on are scored, so echoed
    binding restatements (supervised during training) do not inflate the
    number.
    """
    hit, n = 0, 0
    qs = getattr(task, "query_start", 0)
    for _ in range(n_batches):
        inputs, targets = task.sample(rng, batch_size)
        logits, _ = model.forward(
            inputs, gate_mode=gate_mode, noise=zero_noise(model, *inputs.shape)
        )
        mask = targets != IGNORE_INDEX
        mask[:, :qs] = False
        pred = np.argmax(logits.data, axis=-1)
        hit += int((pred[mask] == targets[mask]).sum())
        n += int(mask.sum())
    return {"accuracy": hit / n, "n_queries": n}


# -- training loop ---------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 2
    base_lr: float = 5e-4
    min_lr: float = 1e-5
    warmup_steps: int = 100
    weight_decay: float = 0.01
    clip: float = 1.0
    lambda_constraint: float = 0.1
    seed: int = 0
    log_every: int = 10
    ckpt_every: int = 0  # 0 = only at the end
    out_dir: str | None = None

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.warmup_steps >= self.steps:
            raise ValueError("warmup_steps must be smaller than steps")


def _ckpt_paths(out_dir: str):
    d = Path(out_dir)
    return d / "checkpoint.bin", d / "checkpoint.opt.bin"


def train(model: TaipanModel, task, cfg: TrainConfig, *, resume: bool = False,
          on_step=None) -> list:
    """Run the training loop; returns one metrics row (dict) per step.

    Checkpointing commits weights and optimizer moments through float32 and
    stores the RNG state, so a run resumed from disk continues bit-for-bit
    identically to one that never stopped (both trajectories include the
    same commits).  ``resume=True`` picks up from ``cfg.out_dir``.
    """
    opt = AdamW(
        model.params(),
        weight_decay=cfg.weight_decay,
        clip=cfg.clip,
    )
    rng = np.random.default_rng(cfg.seed)
    start = 0
    if resume:
        if cfg.out_dir is None:
            raise ValueError("resume needs cfg.out_dir")
        mpath, opath = _ckpt_paths(cfg.out_dir)
        loaded, extras = load_checkpoint(mpath, dtype=model.dtype)
        if loaded.config != model.config:
            raise ValueError("resume checkpoint was trained with a different model config")
        for (_, p), (_, q) in zip(model.params(), loaded.params()):
            p.data[...] = q.data
        meta, tensors = read_container(opath)
        opt.load_state_tensors(tensors, model.dtype)
        opt.t = int(extras["opt_t"])
        start = int(extras["step"])
        rng.bit_generator.state = extras["rng_state"]

    budget = model.config.attn_budget
    rows = []

    def save(step):
        if cfg.out_dir is None:
            return
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        # commit to checkpoint precision *before* writing, so the live run
        # and a later resume walk the same float grid
        for _, p in model.params():
            p.data[...] = p.data.astype(np.float32)
        opt.commit_f32()
        extras = {
            "step": step,
            "opt_t": opt.t,
            "rng_state": rng.bit_generator.state,
        }
        mpath, opath = _ckpt_paths(cfg.out_dir)
        save_checkpoint(mpath, model, extras=extras)
        write_container(opath, {"step": step}, opt.state_tensors())

    for step in range(start, cfg.steps):
        t0 = time.perf_counter()
        for _, p in opt.named_params:
            p.grad = None  # graph accumulation would otherwise carry over
        inputs, targets = task.sample(rng, cfg.batch_size)
        with record() as g:
            logits, decisions = model.forward(inputs, rng=rng)
            loss, ce, con = total_loss(
                logits, targets, decisions, budget, lam=cfg.lambda_constraint
            )
        grads = g.backward(loss, params=[p for _, p in opt.named_params])
        lr = lr_schedule(
            step, total_steps=cfg.steps, base_lr=cfg.base_lr,
            warmup_steps=cfg.warmup_steps, min_lr=cfg.min_lr,
        )
        try:
            info = opt.step(grads, lr)
        except FloatingPointError as e:
            raise FloatingPointError(f"step {step}: {e}") from e
        fracs = [float(d.hard.mean()) for d in decisions]
        row = {
            "step": step,
            "ce_loss": float(ce.data),
            "constraint_loss": float(con.data),
            "total_loss": float(loss.data),
            "lr": lr,
            "sel_frac_mean": float(np.mean(fracs)) if fracs else 0.0,
            "sel_frac_per_sal": fracs,
            "grad_norm": info["grad_norm"],
            "step_time_s": time.perf_counter() - t0,
        }
        rows.append(row)
        if on_step is not None:
            on_step(row)
        if cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0:
            save(step + 1)
    save(cfg.steps)
    return rows
