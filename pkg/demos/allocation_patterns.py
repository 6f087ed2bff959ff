"""
Layer allocation: masks, priors and sampling
============================================

Clients differ in how many adapter layers they can afford to train. This
script walks through the geometric masks, the prior that a population of
masks induces over layers, and weighted sampling of a client's layers.
"""
import numpy as np

from fedlora_sim.allocation import (
    CapabilityProfile,
    base_capability_probs,
    fim_allocation_probs,
    gd_mask,
    rgd_prior,
    sample_allocation,
)
from fedlora_sim.numerics import RngStream

l = 12
rng = RngStream(0, "demo")

# Each geometric pattern places c ones along the depth of the network.
for pattern in ("Triangle", "InvertedTriangle", "Bottleneck", "Uniform"):
    print(f"{pattern:>16}", gd_mask(pattern, l, 7, rng))

# A fleet where 60% of clients train half the layers, 30% three quarters, 10% all.
profile = CapabilityProfile((6, 9, 12), (0.6, 0.3, 0.1))
print("\nbase probability per level:", np.round(base_capability_probs(profile), 5))

# Column mass of the whole fleet's Bottleneck masks, normalized.
prior = rgd_prior(profile, "Bottleneck", l, n=100)
print("bottleneck prior:", np.round(prior, 4))

# Suppose layer scores came back like this; three score clusters map to three levels.
gamma = np.array([9.0, 8.5, 7.9, 4.0, 3.8, 3.5, 3.1, 1.0, 0.9, 0.8, 0.5, 0.4])
probs = fim_allocation_probs(gamma, profile)
print("score-driven probabilities:", np.round(probs, 4))

# A 6-layer client draws its layers without replacement.
draws = np.array([sample_allocation(probs, 6, rng) for _ in range(5000)])
print("inclusion rate per layer:", np.round(draws.mean(axis=0), 3))
