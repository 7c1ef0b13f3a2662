"""How a layer decides which tokens deserve attention.

Each token gets two scores (skip, attend).  Adding Gumbel noise and taking
the argmax samples a discrete decision whose probability is exactly
sigmoid(s_attend - s_skip) — no temperature involved.  The temperature only
shapes the *relaxed* probabilities that gradients flow through: the forward
pass stays binary, the backward pass pretends the choice was soft.  A
squared penalty on the selected fraction keeps the average near a budget.
"""

import numpy as np

from taipan.sal import gumbel_gate, gumbel_noise
from taipan.tensor import Tensor, record
from taipan.training import constraint_loss


class OneGate:
    def __init__(self, gate):
        self.gate = gate


def main():
    rng = np.random.default_rng(0)

    # a single token with scores [0, ln 3]: attend-probability 3/4
    scores = Tensor(np.array([[[0.0, np.log(3.0)]]]))
    noise = np.zeros((1, 1, 2))
    gate, dec = gumbel_gate(scores, noise, temperature=1.0, mode="hard")
    print(f"scores [0, ln3], zero noise: decision {dec.hard[0,0]:.0f}, "
          f"relaxed p(attend) {float(dec.soft[0,0]):.4f}")

    # the sampled rate really is sigmoid of the score gap
    budget = 0.15
    s = np.zeros((1, 20000, 2))
    s[..., 1] = np.log(budget / (1 - budget))   # sigmoid^-1(0.15)
    g = gumbel_noise(rng, s.shape)
    _, dec = gumbel_gate(Tensor(s), g, temperature=1.0, mode="hard")
    print(f"scores at logit(0.15), sampled 20k tokens: "
          f"selected fraction {dec.hard.mean():.4f} (expect ~{budget})")

    # temperature changes gradients, not decisions
    for tau in (0.25, 1.0, 4.0):
        _, d = gumbel_gate(Tensor(s[:, :5000]), g[:, :5000], temperature=tau, mode="hard")
        print(f"  tau={tau:4.2f}: fraction {d.hard.mean():.4f}, "
              f"mean relaxed p {float(d.soft.mean()):.4f}")

    # straight-through: forward is hard, backward is the relaxation
    sc = Tensor(np.zeros((1, 8, 2)), requires_grad=True)
    nz = gumbel_noise(rng, (1, 8, 2))
    with record() as graph:
        gate, dec = gumbel_gate(sc, nz, temperature=1.0, mode="hard")
        loss = gate.sum()
    graph.backward(loss)
    print(f"hard forward values: {dec.hard[0].astype(int)}")
    print(f"...but d loss/d scores is smooth: {np.round(sc.grad[0, :3, 1], 4)}")

    # the budget penalty in action: selecting everything is expensive
    for frac in (1.0, 0.5, 0.25, 0.15):
        m = np.zeros((1, 20)); m[0, : int(frac * 20)] = 1.0
        c = constraint_loss([OneGate(Tensor(m))], budget=0.15)
        print(f"selected {frac:4.2f} of tokens vs budget 0.15: "
              f"penalty {float(c.data):.4f}")


if __name__ == "__main__":
    main()
