"""Importance weights undo the label distortion of a short observation window.

With true rate p and tail = P(outcome arrives after the window | outcome),
a click first looks positive with probability p * (1 - tail) and later
reappears as a duplicate positive with probability p * tail. The observed
stream therefore has q_pos = p / (1 + p * tail) positives. The weights
below bring the weighted label back to p.

Run: python demos/02_importance_weights.py
"""

import numpy as np

from netcvr.objective import cvr_weights, observed_distribution, weighted_bce

p = np.array([0.02, 0.1, 0.3])
tail = np.array([0.95, 0.6, 0.2])
q_pos, q_neg = observed_distribution(p, tail)
w_pos, w_neg = cvr_weights(p, tail)
print("p      tail   q_pos    w_pos    w_neg    w_pos*q_pos")
for row in zip(p, tail, q_pos, w_pos, w_neg, w_pos * q_pos):
    print("  ".join(f"{v:.4f}" for v in row))

# simulate the observed stream for one click type and minimise the weighted loss
rng = np.random.default_rng(0)
p_true, tail_true, n = 0.1, 0.8, 400_000
converts = rng.random(n) < p_true
late = converts & (rng.random(n) < tail_true)
labels = np.concatenate([converts & ~late, np.ones(late.sum(), bool)]).astype(float)
print(f"\nobserved positive rate {labels.mean():.4f}  (true rate {p_true})")

# the weights use the model's own estimate but are held fixed inside the
# gradient, so the estimate settles where the weighted gradient vanishes
grid = np.linspace(0.05, 0.15, 201)
plain, debiased = [], []
for g in grid:
    o = np.full(labels.size, np.log(g / (1 - g)))
    plain.append(weighted_bce(labels, o)[1].sum())
    wp, wn = cvr_weights(np.full(labels.size, g), np.full(labels.size, tail_true))
    debiased.append(weighted_bce(labels, o, wp, wn)[1].sum())
print(f"plain gradient vanishes at      {grid[np.argmin(np.abs(plain))]:.4f}")
print(f"weighted gradient vanishes at   {grid[np.argmin(np.abs(debiased))]:.4f}")
