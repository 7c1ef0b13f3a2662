"""taipan: hybrid Mamba-2 / selective-attention sequence model, from scratch.

A desk-scale implementation of a state-space language model whose stack
interleaves Mamba-2 style SSD blocks with sparsely-gated sliding-window
attention layers under an explicit attention budget.  Everything numerical
is built on numpy with an in-package reverse-mode autodiff.

The public surface, roughly by layer of the stack:

- :mod:`taipan.tensor` -- ``Tensor``, ``record``/``Graph``, and
  ``finite_difference_check``.
- :mod:`taipan.mamba2` -- the SSD scan in both recurrent and quadratic
  matrix forms, plus the full ``Mamba2Block``.
- :mod:`taipan.attention` -- sliding-window attention, its decoding cache,
  and the unnormalized linear-attention forms used for equivalence checks.
- :mod:`taipan.sal` -- the budgeted selective attention layer and its
  straight-through Gumbel gate.
- :mod:`taipan.model` -- ``TaipanModel`` / ``ModelConfig``, checkpoint
  container I/O, and stepwise decoding.
- :mod:`taipan.training` -- losses, AdamW, the lr schedule, synthetic
  tasks, ``train``, and the evaluation helpers.
- :mod:`taipan.cli` -- the ``taipan`` command-line entry point.
"""

from .tensor import Graph, Tensor, finite_difference_check, record
from .mamba2 import Mamba2Block, ssd_matrix, ssd_recurrent
from .attention import (
    causal_softmax_attention,
    linear_attention_matmul,
    linear_attention_recurrent,
    sliding_window_allowed,
)
from .sal import GateDecision, SelectiveAttentionLayer, WindowKVCache, gumbel_gate
from .model import (
    ModelConfig,
    TaipanModel,
    load_checkpoint,
    read_container,
    save_checkpoint,
    write_container,
)
from .training import (
    AdamW,
    LMTask,
    RecallTask,
    TrainConfig,
    cross_entropy,
    constraint_loss,
    evaluate_ppl,
    evaluate_recall,
    lr_schedule,
    total_loss,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "GateDecision",
    "Graph",
    "LMTask",
    "Mamba2Block",
    "ModelConfig",
    "RecallTask",
    "SelectiveAttentionLayer",
    "TaipanModel",
    "Tensor",
    "TrainConfig",
    "WindowKVCache",
    "causal_softmax_attention",
    "constraint_loss",
    "cross_entropy",
    "evaluate_ppl",
    "evaluate_recall",
    "finite_difference_check",
    "gumbel_gate",
    "linear_attention_matmul",
    "linear_attention_recurrent",
    "load_checkpoint",
    "lr_schedule",
    "read_container",
    "record",
    "save_checkpoint",
    "sliding_window_allowed",
    "ssd_matrix",
    "ssd_recurrent",
    "total_loss",
    "train",
    "write_container",
]
