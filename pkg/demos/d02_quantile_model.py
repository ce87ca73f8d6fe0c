"""
Quantile vectors and the normal model
=====================================

Each batch's deltas for one pair collapse to 9 quantiles. Fifty normal
batches give a mean and covariance; a fresh batch is scored by its
Mahalanobis distance and a chi-square tail probability.
"""

import numpy as np

from tracetime.stat_model import chi2_sf, fit_pair_model, mahalanobis_sq, quantile_vector

rng = np.random.default_rng(1)


def batch_deltas(shift=0.0):
    scale = np.exp(rng.normal(0, 0.02))
    return 900 * scale * rng.lognormal(0, 0.1, size=400) + shift


train = [quantile_vector(batch_deltas(), 9) for _ in range(50)]
model = fit_pair_model(train)
print("mean quantiles (ns):", np.round(model.mean, 1))
print("ridge added:", model.ridge_used)

for shift in (0, 30, 90):
    x = quantile_vector(batch_deltas(shift), 9)
    d2 = mahalanobis_sq(x, model)
    print(f"shift {shift:>3} ns  d2 = {d2:10.2f}  p = {chi2_sf(d2, 9):.3e}")

# with θ = 1e-10 only the largest shift is called anomalous
