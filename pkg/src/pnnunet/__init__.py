"""Deep, wide, ensemble and PNN UNets for two-label slice segmentation, on numpy.

Modules:

- ``gradcore``: tape-based reverse-mode autodiff, conv/pool/loss primitives, Adam
- ``netzoo``: UNet and dense autoencoder builders, parameter counting
- ``ensembles``: soft voting, Transfer/Retrain ensembles, PNN-UNet joint loss
- ``volumedata``: SplitMix64 streams, seeds, splits, NIfTI, framing, cache
- ``augmentor``: elastic warps and horizontal flips per split
- ``evalstat``: overlap metrics, run aggregation, paired t-test
- ``runner``: training, checkpoints, evaluation, reports and the CLI
"""

from .ensembles import EnsembleStrategy, EnsembleUNet, PNNConfig, PNNUNet, build_ensemble, build_pnn
from .evalstat import paired_t_test, volume_report
from .netzoo import DEEP, WIDE, DenseAEConfig, UNetConfig, build_dense_autoencoder, build_unet, count_parameters
from .volumedata import Rng, derive_seed, split_dataset

__version__ = "0.1.0"

__all__ = [
    "DEEP", "WIDE", "DenseAEConfig", "EnsembleStrategy", "EnsembleUNet", "PNNConfig", "PNNUNet", "Rng",
    "UNetConfig", "build_dense_autoencoder", "build_ensemble", "build_pnn", "build_unet", "count_parameters",
    "derive_seed", "paired_t_test", "split_dataset", "volume_report",
]
