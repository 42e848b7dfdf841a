"""
Networks and a gradient check
=============================

Parameter counts are exact for the full-size models. Training code runs on
scaled-down copies (filters divided by a factor), and the autodiff is checked
against central differences on a tiny float64 PNN.
"""

import numpy as np

from pnnunet import gradcore as gc
from pnnunet.ensembles import PNNConfig, build_pnn
from pnnunet.gradcore import Tensor
from pnnunet.netzoo import DEEP, WIDE, DenseAEConfig, UNetConfig, count_parameters
from pnnunet.volumedata import Rng

print("Deep-UNet", f"{count_parameters(DEEP):,}")
print("Wide-UNet", f"{count_parameters(WIDE):,}")
for f in (4, 8, 16):
    print(f"scale 1/{f}:", count_parameters(DEEP.scaled(f)), count_parameters(WIDE.scaled(f)))

cfg = PNNConfig(DenseAEConfig(stage_growths=(2, 4), bottleneck_growth=4),
                UNetConfig(depth=3, init_filters=2), UNetConfig(depth=2, init_filters=4))
pnn = build_pnn(cfg, Rng(5))
gen = np.random.default_rng(0)
x = Tensor(gen.random((2, 1, 8, 8)))
y = gen.integers(0, 3, (2, 8, 8))

# d loss / d theta along a random direction, analytic vs numeric
for _ in range(3):
    analytic, numeric = gc.directional_check(lambda: pnn.loss(x, y), pnn.params.tensors(), gen)
    print(f"{analytic:+.8f} {numeric:+.8f} rel {gc.relative_error(analytic, numeric):.1e}")
