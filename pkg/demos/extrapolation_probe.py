"""Do models trained short survive being run long?

Two copies of the same small hybrid are trained on 64-token chunks of a
Markov-chain language, one with rotary position encodings in its gated
attention and one with none.  Both are then scored on far longer chunks
than they ever saw.  With windowed attention the encodings are relative and
bounded, so neither has a built-in cliff — the probe records what actually
happens rather than assuming the textbook answer.
"""

import numpy as np

from taipan.model import ModelConfig, TaipanModel
from taipan.training import LMTask, TrainConfig, evaluate_ppl, train


def main():
    train_len = 64
    base = dict(vocab_size=64, d_model=32, n_mamba_layers=2, sal_interval=2,
                n_heads=4, window=16)
    task = LMTask(vocab_size=64, seq_len=train_len)
    models = {}
    for rope in (False, True):
        cfg = ModelConfig(rope=rope, **base)
        model = TaipanModel(cfg, seed=0, dtype=np.float32)
        tc = TrainConfig(steps=300, batch_size=4, warmup_steps=50,
                         base_lr=1e-3, seed=1)
        rows = train(model, task, tc)
        models[rope] = model
        print(f"rope={rope}: trained {tc.steps} steps at L={train_len}, "
              f"final ce {rows[-1]['ce_loss']:.4f}")

    print(f"\n{'eval length':>12} {'ppl (no rope)':>14} {'ppl (rope)':>12}")
    for L in (64, 128, 256, 512):
        ppls = {}
        for rope, model in models.items():
            ev = LMTask(vocab_size=64, seq_len=L)
            out = evaluate_ppl(model, ev, np.random.default_rng(5),
                               n_batches=2, batch_size=4)
            ppls[rope] = out["ppl"]
        marker = "  <- beyond training length" if L > train_len else ""
        print(f"{L:>12} {ppls[False]:>14.3f} {ppls[True]:>12.3f}{marker}")


if __name__ == "__main__":
    main()
