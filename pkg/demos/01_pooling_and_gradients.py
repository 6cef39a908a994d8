#!/usr/bin/env python3
"""Adaptive max pooling and the gradient engine, on toy data.

Voxel recordings differ in length across subjects; adaptive max pooling
maps any length L to a fixed size m by taking window maxima, with windows
[floor(i*L/m), ceil((i+1)*L/m)). This script shows the pooling on a spiky
signal, the exactly-one-route-per-window backward pass, and a finite
difference check of a small network built from the same primitives.
"""

import numpy as np

from crossbrain import numerics as nm
from crossbrain.precision import use_precision

rng = np.random.default_rng(0)

# A sparse, thresholded signal: mostly silence, a few strong activations.
length = 48
signal = np.maximum(rng.standard_normal(length) - 1.0, 0.0) * 3.0
signal[[7, 19, 33]] = [4.0, 5.5, 3.2]

pooled = nm.adaptive_max_pool_array(signal, 12)
print("signal (48):", np.array2string(signal, precision=1, suppress_small=True))
print("pooled (12):", np.array2string(pooled, precision=1))
print("-> every strong activation survives pooling; silence collapses.\n")

# Backward: each pooled output routes its gradient to one input position.
v = nm.Var(signal.copy())
out = nm.adaptive_max_pool(v, 12)
nm.vsum(out).backward()
print("gradient nonzeros:", np.nonzero(v.grad)[0])
print("gradient sum:", v.grad.sum(), "(= number of windows)\n")

# Finite differences vs the analytic backward pass for a small network.
with use_precision("f64"):
    w1 = nm.Var(rng.standard_normal((10, 6)) * 0.4)
    b1 = nm.Var(np.zeros(6))
    gamma = nm.Var(np.ones(6))
    beta = nm.Var(np.zeros(6))
    w2 = nm.Var(rng.standard_normal((6, 3)) * 0.4)
    b2 = nm.Var(np.zeros(3))
    x = rng.standard_normal((5, 10))

    def loss():
        h = nm.gelu(nm.layer_norm(nm.affine(x, w1, b1), gamma, beta))
        return nm.mean_all(nm.affine(h, w2, b2) ** 2.0)

    err = nm.finite_diff_check(loss, [w1, b1, gamma, beta, w2, b2],
                               eps=1e-5, max_coords_per_param=None)
print(f"finite-difference max relative error: {err:.2e} (reference: < 1e-4)")
