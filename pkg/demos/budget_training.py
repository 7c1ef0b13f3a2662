"""Watch the capacity penalty hold the selection rate to its budget.

Train the same small model at two attention budgets on the recall task and
track what fraction of tokens the gated layer actually routes to attention.
The penalty term is tiny compared to the cross-entropy, yet it is enough to
pin the average selection rate — that is the entire budgeting mechanism.
"""

import numpy as np

from taipan.model import ModelConfig, TaipanModel
from taipan.training import RecallTask, TrainConfig, train


def main():
    task = RecallTask(vocab_size=64, seq_len=64, n_pairs=4, n_queries=2,
                      n_keys=8, n_values=8, window=24)
    for budget in (0.15, 0.35):
        cfg = ModelConfig(vocab_size=64, d_model=32, n_mamba_layers=2,
                          sal_interval=2, n_heads=4, window=24,
                          attn_budget=budget)
        model = TaipanModel(cfg, seed=0, dtype=np.float32)
        tc = TrainConfig(steps=120, batch_size=4, warmup_steps=20, seed=1)
        print(f"\nbudget {budget}:")
        rows = train(model, task, tc)
        for lo in range(0, 120, 30):
            chunk = rows[lo : lo + 30]
            sel = np.mean([r["sel_frac_mean"] for r in chunk])
            ce = np.mean([r["ce_loss"] for r in chunk])
            con = np.mean([r["constraint_loss"] for r in chunk])
            print(f"  steps {lo:3d}-{lo+29:3d}: selected {sel:.3f}   "
                  f"ce {ce:.3f}   penalty {con:.5f}")
        tail = np.mean([r["sel_frac_mean"] for r in rows[-30:]])
        print(f"  final selection rate {tail:.3f} vs budget {budget}")


if __name__ == "__main__":
    main()
