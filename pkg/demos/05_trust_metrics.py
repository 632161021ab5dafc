"""
Trust entropy and error growth
==============================

If verifiers land on platforms whose outputs differ, a random verifier
disagrees with the provider with probability 1 - 2**-H_T.
"""
from detq import (PlatformDistribution, decay_bound, reduction_tree_count, reject_prob,
                  trust_entropy)
from detq.trustlab import simulate_protocol

for probs in ([1.0], [0.9, 0.1], [0.5, 0.5], [0.25] * 4):
    d = PlatformDistribution.from_probs(probs)
    h = trust_entropy(d)
    sim = simulate_protocol(d, 100_000, seed=0)
    print(f"{str(probs):28s} H_T={h:.3f}  reject={reject_prob(h):.4f}  simulated={sim:.4f}")

# per-layer rounding error eps, amplified by (1 + lambda) each layer
for layers in (8, 16, 32, 64):
    print(f"L={layers:2d}  bound={decay_bound(1e-5, 0.3, layers):.4g}")

# how many ways a d-term sum can be associated
for d in (4, 8, 16, 32):
    print(f"d={d:2d}  trees={reduction_tree_count(d)}")
