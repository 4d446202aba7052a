"""Compare the output-variance ceiling with Monte Carlo and print a distance threshold.

Run with ``python3 demos/bound_checks.py``.
"""

import numpy as np

from adaloc.bounds import (
    BoundConstants,
    VarianceProfile,
    distance_threshold,
    mc_output_variance,
    ordering_statistics,
    variance_bound,
)

x = np.random.default_rng(0).normal(size=8)
for depth in (1, 2, 3):
    profile = VarianceProfile([2.0 / 16] * depth, [0.01] * depth, (16,) * depth)
    mc, se = mc_output_variance(profile, x, trials=10_000, seed=depth, return_stderr=True)
    bound = variance_bound(profile, float(np.linalg.norm(x)))
    print(f"depth {depth}: Monte Carlo {mc:.4f} +- {se:.4f}, ceiling {bound:.4f}")

th = distance_threshold(BoundConstants(L=3, B_sigma=1.0, B_theta=0.9, B_x=1.0, epsilon=1.0, t=2.0))
print(f"threshold {th.threshold:.4f} holding with probability {th.success_probability:.4f}")

he = ordering_statistics(models=20, seed=0)
nonneg = ordering_statistics(models=20, seed=0, nonnegative_weights=True)
print(f"gradient ordering respected: He init {he['mean_fraction']:.3f}, nonnegative weights {nonneg['mean_fraction']:.3f}")
