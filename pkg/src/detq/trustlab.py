"""Trust-entropy and divergence-growth metrics (double precision diagnostics)."""
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PlatformDistribution:
    """Probability mass over distinct outputs, one entry per equivalence class."""

    classes: tuple

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple((y, float(p)) for y, p in self.classes))
        if not self.classes:
            raise ValueError("distribution needs at least one output class")
        probs = self.probs
        if np.any(probs <= 0) or not np.all(np.isfinite(probs)):
            raise ValueError("class probabilities must be positive and finite")
        if abs(math.fsum(probs) - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {math.fsum(probs)!r}, not 1")
        if len({y for y, _ in self.classes}) != len(self.classes):
            raise ValueError("output identifiers must be distinct")

    @classmethod
    def from_probs(cls, probs) -> "PlatformDistribution":
        return cls(tuple(enumerate(probs)))

    @classmethod
    def from_platform_outputs(cls, outputs, weights=None) -> "PlatformDistribution":
        """Group platforms by identical output; ``weights`` default to uniform."""
        outputs = list(outputs)
        if weights is None:
            weights = [1.0 / len(outputs)] * len(outputs)
        mass = {}
        for y, w in zip(outputs, weights):
            mass[y] = mass.get(y, 0.0) + w
        return cls(tuple(mass.items()))

    @property
    def probs(self) -> np.ndarray:
        return np.array([p for _, p in self.classes])


def trust_entropy(dist: PlatformDistribution) -> float:
    """Collision (Renyi order-2) entropy in bits: -log2 sum p^2."""
    if len(dist.classes) == 1:
        return 0.0
    collision = math.fsum(p * p for p in dist.probs)
    return -math.log2(collision)


def reject_prob(h_t: float) -> float:
    """Honest-vs-honest rejection rate 1 - 2**-h_t."""
    if h_t < 0 or math.isnan(h_t):
        raise ValueError("trust entropy must be non-negative")
    return -math.expm1(-h_t * math.log(2))


def simulate_protocol(dist: PlatformDistribution, trials: int, seed: int) -> float:
    """Monte Carlo rejection rate with independent prover/verifier platform draws."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    p = dist.probs
    prover = rng.choice(p.size, size=trials, p=p)
    verifier = rng.choice(p.size, size=trials, p=p)
    return float(np.count_nonzero(prover != verifier)) / trials


def decay_bound(eps: float, lam: float, layers: int) -> float:
    """Uniform residual-network divergence bound eps*((1+lam)^L - 1)/lam."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if layers < 1:
        raise ValueError("layers must be >= 1")
    if eps == 0:
        return 0.0
    if lam == 0:
        return eps * layers
    return eps * math.expm1(layers * math.log1p(lam)) / lam


def decay_bound_layers(eps_list, lam_list) -> float:
    """Per-layer bound: sum_i eps_i * prod_{j>i} (1 + lam_j)."""
    eps_list, lam_list = list(eps_list), list(lam_list)
    if len(eps_list) != len(lam_list) or not eps_list:
        raise ValueError("need matching, non-empty eps and lambda lists")
    # unrolled recurrence d_{i+1} = (1 + lam_i) d_i + eps_i, from d = 0
    total = 0.0
    for eps, lam in zip(eps_list, lam_list):
        if eps < 0 or lam < 0:
            raise ValueError("eps and lambda must be >= 0")
        total = total * (1.0 + lam) + eps
    return total


def reduction_tree_count(d: int) -> int:
    """Number of binary reduction trees of a d-term sum: Catalan(d - 1)."""
    if d < 2:
        raise ValueError("need at least two terms")
    c = 1
    for n in range(d - 1):
        c = c * 2 * (2 * n + 1) // (n + 2)
    return c
