"""Soft voting, the two Ensemble-UNet strategies, and PNN-UNet.

PNN-UNet runs the dense autoencoder first; its output is fed to both the
deep and the wide UNet, whose softmax maps are averaged. The autoencoder
output doubles as a reconstruction of the input, which the joint loss
penalises with a weighted mean-squared error.

Jointly trained ensembles minimise the cross-entropy of the vote. That
objective alone is a mixture likelihood: once one member is confidently
wrong on a pixel its gradient there vanishes and the other member is left
to carry the class, which can stall the vote at a tie. Each member's own
cross-entropy is therefore added with weight ``member_weight`` (0 disables
it).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import gradcore as gc
from .errors import ConfigError, DomainError, NumericError, ShapeError
from .gradcore import Tensor
from .netzoo import (DEEP, WIDE, DenseAEConfig, DenseAutoencoder, ParameterStore, UNet, UNetConfig,
                     build_dense_autoencoder, build_unet)

SIMPLEX_TOL = 1e-6


class EnsembleStrategy(enum.Enum):
    TRANSFER = "transfer"
    RETRAIN = "retrain"


def soft_vote(probs: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of per-member class-probability maps (N, C, H, W)."""
    if len(probs) < 2:
        raise ConfigError("soft voting needs at least two members")
    shape = probs[0].shape
    for p in probs:
        if p.shape != shape:
            raise ShapeError(f"member shapes differ: {shape} vs {p.shape}")
        tol = max(SIMPLEX_TOL, 10 * np.finfo(p.dtype).eps * shape[1])
        if p.data.min() < -tol or np.abs(p.data.sum(axis=1) - 1.0).max() > tol:
            raise DomainError("member output is not a per-pixel probability distribution")
    return gc.mean_of(list(probs))


def predict_labels(probs) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lowest class index."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return data.argmax(axis=1)


def ensemble_forward(deep: UNet, wide: UNet, batch) -> Tensor:
    return soft_vote([deep.probabilities(batch), wide.probabilities(batch)])


class EnsembleUNet:
    """Deep-UNet and Wide-UNet merged by soft voting.

    The two strategies share one forward function. ``TRANSFER`` wraps
    pre-trained members and refuses weight updates; ``RETRAIN`` is trained
    jointly through the vote.
    """

    def __init__(self, deep: UNet, wide: UNet, strategy: EnsembleStrategy, member_weight: float = 1.0):
        if deep.cfg.class_count != wide.cfg.class_count:
            raise ConfigError("members disagree on class count")
        if member_weight < 0:
            raise ConfigError("member loss weight must be non-negative")
        self.deep = deep
        self.wide = wide
        self.strategy = strategy
        self.member_weight = member_weight
        self.params = ParameterStore()
        for prefix, net in (("deep", deep), ("wide", wide)):
            for name, t in net.params.items():
                self.params[f"{prefix}.{name}"] = t

    @property
    def class_count(self) -> int:
        return self.deep.cfg.class_count

    @property
    def trainable(self) -> bool:
        return self.strategy is EnsembleStrategy.RETRAIN

    def probabilities(self, x) -> Tensor:
        return ensemble_forward(self.deep, self.wide, gc.as_tensor(x))

    def loss(self, x, targets) -> Tensor:
        if not self.trainable:
            raise ConfigError("a transfer ensemble is assembled from trained members and is not trained further")
        x = gc.as_tensor(x)
        logits = [self.deep.forward(x), self.wide.forward(x)]
        vote = soft_vote([gc.softmax(z, axis=1) for z in logits])
        return joint_loss(vote, logits, targets, self.member_weight)


@dataclass(frozen=True)
class PNNConfig:
    ae: DenseAEConfig = field(default_factory=DenseAEConfig)
    deep: UNetConfig = DEEP
    wide: UNetConfig = WIDE
    recon_weight: float = 0.1
    ae_in_vote: bool = False
    member_weight: float = 1.0

    def __post_init__(self):
        if self.deep.class_count != self.wide.class_count:
            raise ConfigError("deep and wide UNets must predict the same classes")
        if self.ae.out_channels != self.deep.in_channels or self.ae.out_channels != self.wide.in_channels:
            raise ConfigError("autoencoder output channels must equal the UNet input channels")
        if self.recon_weight < 0:
            raise ConfigError("reconstruction weight must be non-negative")
        if self.member_weight < 0:
            raise ConfigError("member loss weight must be non-negative")

    def scaled(self, factor: int) -> "PNNConfig":
        return replace(self, ae=self.ae.scaled(factor), deep=self.deep.scaled(factor), wide=self.wide.scaled(factor))


class PNNUNet:
    def __init__(self, cfg: PNNConfig, ae: DenseAutoencoder, deep: UNet, wide: UNet):
        if cfg.ae_in_vote and ae.seg_classes != deep.cfg.class_count:
            raise ConfigError("ae_in_vote needs an autoencoder segmentation head")
        self.cfg = cfg
        self.ae = ae
        self.deep = deep
        self.wide = wide
        self.params = ParameterStore()
        for prefix, net in (("ae", ae), ("deep", deep), ("wide", wide)):
            for name, t in net.params.items():
                self.params[f"{prefix}.{name}"] = t

    @property
    def class_count(self) -> int:
        return self.cfg.deep.class_count

    def forward(self, x) -> tuple[Tensor, Tensor]:
        return pnn_forward(self.cfg, self, gc.as_tensor(x))

    def probabilities(self, x) -> Tensor:
        return self.forward(x)[0]

    def loss(self, x, targets) -> Tensor:
        x = gc.as_tensor(x)
        out = pnn_outputs(self.cfg, self, x)
        return pnn_loss(out.vote, out.recon, targets, x, self.cfg.recon_weight,
                        out.member_logits, self.cfg.member_weight)


@dataclass
class PNNOutputs:
    vote: Tensor
    recon: Tensor
    member_logits: list[Tensor]


def pnn_outputs(cfg: PNNConfig, nets: PNNUNet, batch: Tensor) -> PNNOutputs:
    batch = gc.as_tensor(batch)
    if batch.data.ndim != 4 or batch.shape[1] != cfg.ae.in_channels:
        raise ConfigError(f"batch shape {batch.shape} does not match {cfg.ae.in_channels} input channels")
    if cfg.ae_in_vote:
        coordinated, ae_logits = nets.ae.forward_with_segmentation(batch)
    else:
        coordinated = nets.ae.forward(batch)
    logits = [nets.deep.forward(coordinated), nets.wide.forward(coordinated)]
    if cfg.ae_in_vote:
        logits.append(ae_logits)
    vote = soft_vote([gc.softmax(z, axis=1) for z in logits])
    return PNNOutputs(vote, coordinated, logits)


def pnn_forward(cfg: PNNConfig, nets: PNNUNet, batch: Tensor) -> tuple[Tensor, Tensor]:
    """Voted probabilities and the autoencoder reconstruction."""
    out = pnn_outputs(cfg, nets, batch)
    return out.vote, out.recon


def joint_loss(voted_probs: Tensor, member_logits: Sequence[Tensor], targets, member_weight: float) -> Tensor:
    """Vote cross-entropy plus ``member_weight`` times the mean member cross-entropy."""
    classes = voted_probs.shape[1]
    loss = gc.nll_probs(voted_probs, targets, classes)
    if member_weight > 0 and member_logits:
        ce = gc.mean_of([gc.softmax_cross_entropy(z, targets, classes)[0] for z in member_logits])
        loss = gc.add(loss, gc.scale(ce, member_weight))
    return loss


def pnn_loss(voted_probs: Tensor, recon: Tensor, targets, batch, recon_weight: float,
             member_logits: Sequence[Tensor] = (), member_weight: float = 0.0) -> Tensor:
    """Joint segmentation loss plus ``recon_weight`` times the reconstruction MSE."""
    if recon_weight < 0 or member_weight < 0:
        raise ConfigError("loss weights must be non-negative")
    loss = joint_loss(voted_probs, member_logits, targets, member_weight)
    if recon_weight > 0:
        batch = batch.detach() if isinstance(batch, Tensor) else Tensor(batch)
        loss = gc.add(loss, gc.scale(gc.mse(recon, batch), recon_weight))
    if not np.isfinite(loss.data).all():
        raise NumericError("joint loss is not finite")
    return loss


def build_ensemble(deep_cfg: UNetConfig, wide_cfg: UNetConfig, rng, strategy=EnsembleStrategy.RETRAIN,
                   member_weight: float = 1.0) -> EnsembleUNet:
    return EnsembleUNet(build_unet(deep_cfg, rng), build_unet(wide_cfg, rng), strategy, member_weight)


def build_pnn(cfg: PNNConfig, rng) -> PNNUNet:
    """Autoencoder, deep and wide weights are drawn in that order from one stream."""
    seg = cfg.deep.class_count if cfg.ae_in_vote else 0
    ae = build_dense_autoencoder(cfg.ae, rng, seg_classes=seg)
    return PNNUNet(cfg, ae, build_unet(cfg.deep, rng), build_unet(cfg.wide, rng))
