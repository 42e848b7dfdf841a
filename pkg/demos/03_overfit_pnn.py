"""
Overfitting eight synthetic slices
==================================

A sanity run: the PNN at 1/16 width trains full-batch on eight synthetic
64x64 slices (a disc labelled 1, a bar labelled 2) until its training Dice
passes 0.95. Takes around a minute on one core.
"""

import time

from pnnunet.runner import ExperimentConfig, build_model, overfit
from pnnunet.volumedata import Rng, derive_seed, synthetic_slices

x, y = synthetic_slices(8, 0)
print(x.shape, y.shape, x.dtype)

net = build_model(ExperimentConfig(model="pnn", scale=16), Rng(derive_seed(1) + 1))
start = time.perf_counter()
result = overfit(net, x, y, steps=500, target=0.95)
print(f"dice {result.dice:.4f} after {result.steps} steps, {time.perf_counter() - start:.0f} s")
for step in (1, 10, 20, 40, result.steps):
    print(step, round(result.losses[step - 1], 4))
