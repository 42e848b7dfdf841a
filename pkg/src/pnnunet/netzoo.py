"""UNet family and the dense autoencoder, with exact parameter accounting.

A UNet level is two 3x3 convolutions (stride 1, padding 1, with bias). The
encoder doubles channels per level starting from ``init_filters``, the
bottleneck doubles once more, and each decoder level is a 2x2/stride-2
transposed convolution halving channels, a concatenation with the matching
encoder output, and two 3x3 convolutions. A 1x1 head maps to class logits.
With ``depth=4, init_filters=64`` this gives 31,030,723 parameters and with
``depth=2, init_filters=256`` it gives 29,762,307.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from . import gradcore as gc
from .errors import ConfigError, ShapeError
from .gradcore import Tensor
from .volumedata import Rng

SLOPE = 0.01


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    init_filters: int = 64
    in_channels: int = 1
    class_count: int = 3

    def __post_init__(self):
        if self.depth < 1 or self.init_filters < 1 or self.in_channels < 1 or self.class_count < 1:
            raise ConfigError(f"invalid UNet config {self}")

    def scaled(self, factor: int) -> "UNetConfig":
        return replace(self, init_filters=max(1, self.init_filters // factor))


DEEP = UNetConfig(depth=4, init_filters=64)
WIDE = UNetConfig(depth=2, init_filters=256)


@dataclass(frozen=True)
class DenseAEConfig:
    stage_growths: tuple[int, ...] = (32, 64)
    bottleneck_growth: int = 128
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "stage_growths", tuple(self.stage_growths))
        if not self.stage_growths:
            raise ConfigError("dense autoencoder needs at least one stage")
        if min(self.stage_growths) < 1 or self.bottleneck_growth < 1:
            raise ConfigError(f"growths must be >= 1, got {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError(f"invalid channel counts in {self}")

    @property
    def depth(self) -> int:
        return len(self.stage_growths)

    def scaled(self, factor: int) -> "DenseAEConfig":
        return replace(self, stage_growths=tuple(max(1, g // factor) for g in self.stage_growths),
                       bottleneck_growth=max(1, self.bottleneck_growth // factor))


class ParameterStore(dict):
    """Name -> Tensor map; iteration order is insertion order."""

    def add(self, name: str, shape: tuple[int, ...]) -> None:
        if name in self:
            raise ConfigError(f"duplicate parameter name {name}")
        self[name] = Tensor(np.zeros(shape), requires_grad=True, name=name)

    def numel(self) -> int:
        return sum(t.size for t in self.values())

    def tensors(self) -> list[Tensor]:
        return list(self.values())

    def astype(self, dtype) -> None:
        for t in self.values():
            t.data = t.data.astype(dtype)


# ---------------------------------------------------------------------------
# layer plans: (name, kind, cin, cout, k)


def _conv(name, cin, cout, k=3):
    return (name, "conv", cin, cout, k)


def _up(name, cin, cout):
    return (name, "up", cin, cout, 2)


def unet_layers(cfg: UNetConfig) -> list[tuple]:
    layers = []
    ch = cfg.in_channels
    for i in range(cfg.depth):
        out = cfg.init_filters * 2 ** i
        layers += [_conv(f"enc{i}.conv1", ch, out), _conv(f"enc{i}.conv2", out, out)]
        ch = out
    out = cfg.init_filters * 2 ** cfg.depth
    layers += [_conv("bottleneck.conv1", ch, out), _conv("bottleneck.conv2", out, out)]
    ch = out
    for i in reversed(range(cfg.depth)):
        out = cfg.init_filters * 2 ** i
        layers += [_up(f"dec{i}.up", ch, out), _conv(f"dec{i}.conv1", 2 * out, out), _conv(f"dec{i}.conv2", out, out)]
        ch = out
    layers.append(_conv("head", ch, cfg.class_count, 1))
    return layers


def _dense_block(prefix, cin, growth):
    return [_conv(f"{prefix}.conv1", cin, growth), _conv(f"{prefix}.conv2", cin + growth, growth)]


def autoencoder_layers(cfg: DenseAEConfig, seg_classes: int = 0) -> list[tuple]:
    layers = []
    ch = cfg.in_channels
    for i, g in enumerate(cfg.stage_growths):
        layers += _dense_block(f"enc{i}", ch, g)
        ch = g
    layers += _dense_block("bottleneck", ch, cfg.bottleneck_growth)
    ch = cfg.bottleneck_growth
    for i in reversed(range(cfg.depth)):
        g = cfg.stage_growths[i]
        layers.append(_up(f"dec{i}.up", ch, g))
        layers += _dense_block(f"dec{i}", 2 * g, g)
        ch = g
    layers.append(_conv("head", ch, cfg.out_channels, 1))
    if seg_classes:
        layers.append(_conv("seg_head", ch, seg_classes, 1))
    return layers


def _layer_params(kind, cin, cout, k):
    wshape = (cout, cin, k, k) if kind == "conv" else (cin, cout, k, k)
    return wshape, (cout,)


def count_parameters(cfg: UNetConfig | DenseAEConfig) -> int:
    """Analytic parameter count; no weights are allocated."""
    layers = unet_layers(cfg) if isinstance(cfg, UNetConfig) else autoencoder_layers(cfg)
    total = 0
    for _, kind, cin, cout, k in layers:
        total += cout * cin * k * k + cout
    return total


def init_parameters(store: ParameterStore, layers: list[tuple], rng: Rng | None) -> None:
    """He-uniform weights drawn in sorted-name order; zero biases.

    The bound is sqrt(6 / ((1 + slope**2) * Cin*k*k)), which keeps activation
    scale roughly constant through leaky-ReLU stacks. ``rng=None`` leaves
    every parameter at zero.
    """
    fan_in = {f"{name}.weight": cin * k * k for name, _, cin, _, k in layers}
    if rng is None:
        return
    for name in sorted(store):
        if name in fan_in:
            bound = math.sqrt(6.0 / ((1.0 + SLOPE ** 2) * fan_in[name]))
            t = store[name]
            t.data = (rng.uniform_array(t.shape) * 2.0 - 1.0) * bound


def _make_store(layers) -> ParameterStore:
    store = ParameterStore()
    for name, kind, cin, cout, k in layers:
        wshape, bshape = _layer_params(kind, cin, cout, k)
        store.add(f"{name}.weight", wshape)
        store.add(f"{name}.bias", bshape)
    return store


class _Net:
    params: ParameterStore
    depth: int

    def _conv(self, name, x, act=True, padding=1):
        y = gc.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], stride=1, padding=padding)
        return gc.leaky_relu(y, SLOPE) if act else y

    def _up(self, name, x):
        return gc.conv_transpose2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], stride=2)

    def _check_input(self, x: Tensor, channels: int):
        if x.data.ndim != 4:
            raise ShapeError(f"expected an NCHW batch, got shape {x.shape}")
        if x.shape[1] != channels:
            raise ShapeError(f"expected {channels} input channels, got {x.shape[1]}")
        step = 2 ** self.depth
        if x.shape[2] % step or x.shape[3] % step:
            raise ShapeError(f"spatial extents {x.shape[2:]} not divisible by {step}")

    def parameters(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def numel(self) -> int:
        return self.params.numel()


class UNet(_Net):
    def __init__(self, cfg: UNetConfig, params: ParameterStore):
        self.cfg = cfg
        self.depth = cfg.depth
        self.params = params

    def forward(self, x: Tensor) -> Tensor:
        """Logits with the same spatial extents as ``x``."""
        x = gc.as_tensor(x)
        self._check_input(x, self.cfg.in_channels)
        skips = []
        for i in range(self.depth):
            x = self._conv(f"enc{i}.conv2", self._conv(f"enc{i}.conv1", x))
            skips.append(x)
            x = gc.maxpool2d(x)
        x = self._conv("bottleneck.conv2", self._conv("bottleneck.conv1", x))
        for i in reversed(range(self.depth)):
            x = gc.concat_channels(skips[i], self._up(f"dec{i}.up", x))
            x = self._conv(f"dec{i}.conv2", self._conv(f"dec{i}.conv1", x))
        return self._conv("head", x, act=False, padding=0)

    __call__ = forward

    def probabilities(self, x: Tensor) -> Tensor:
        return gc.softmax(self.forward(x), axis=1)

    def loss(self, x: Tensor, targets) -> Tensor:
        return gc.softmax_cross_entropy(self.forward(x), targets, self.cfg.class_count)[0]


class DenseAutoencoder(_Net):
    """Encoder/decoder of dense blocks with encoder-to-decoder concatenations.

    A dense block maps ``cin`` channels to ``growth`` channels through two
    3x3 convolutions, the second of which sees the block input concatenated
    with the first convolution's output.
    """

    def __init__(self, cfg: DenseAEConfig, params: ParameterStore, seg_classes: int = 0):
        self.cfg = cfg
        self.depth = cfg.depth
        self.params = params
        self.seg_classes = seg_classes

    def _block(self, prefix, x):
        first = self._conv(f"{prefix}.conv1", x)
        return self._conv(f"{prefix}.conv2", gc.concat_channels(x, first))

    def features(self, x: Tensor) -> Tensor:
        x = gc.as_tensor(x)
        self._check_input(x, self.cfg.in_channels)
        skips = []
        for i in range(self.depth):
            x = self._block(f"enc{i}", x)
            skips.append(x)
            x = gc.maxpool2d(x)
        x = self._block("bottleneck", x)
        for i in reversed(range(self.depth)):
            x = self._block(f"dec{i}", gc.concat_channels(skips[i], self._up(f"dec{i}.up", x)))
        return x

    def forward(self, x: Tensor) -> Tensor:
        return self._conv("head", self.features(x), act=False, padding=0)

    __call__ = forward

    def forward_with_segmentation(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Reconstruction plus class logits from the optional segmentation head."""
        if not self.seg_classes:
            raise ConfigError("autoencoder was built without a segmentation head")
        feats = self.features(x)
        return (self._conv("head", feats, act=False, padding=0),
                self._conv("seg_head", feats, act=False, padding=0))


def build_unet(cfg: UNetConfig, rng: Rng | None) -> UNet:
    layers = unet_layers(cfg)
    store = _make_store(layers)
    init_parameters(store, layers, rng)
    return UNet(cfg, store)


def build_dense_autoencoder(cfg: DenseAEConfig, rng: Rng | None, seg_classes: int = 0) -> DenseAutoencoder:
    layers = autoencoder_layers(cfg, seg_classes)
    store = _make_store(layers)
    init_parameters(store, layers, rng)
    return DenseAutoencoder(cfg, store, seg_classes)


def forward_unet(net: UNet, batch) -> Tensor:
    return net.forward(gc.as_tensor(batch))


def forward_autoencoder(net: DenseAutoencoder, batch) -> Tensor:
    return net.forward(gc.as_tensor(batch))
