import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pnnunet import gradcore as gc
from pnnunet.errors import ConfigError, ShapeError
from pnnunet.gradcore import Tensor
from pnnunet.netzoo import (DEEP, SLOPE, WIDE, DenseAEConfig, UNetConfig, autoencoder_layers,
                            build_dense_autoencoder, build_unet, count_parameters, unet_layers)
from pnnunet.volumedata import Rng

from conftest import analytic_grad, numeric_grad, rel_err


def test_published_parameter_counts():
    assert count_parameters(DEEP) == 31_030_723
    assert count_parameters(WIDE) == 29_762_307


def test_smallest_unet_count_by_hand():
    # enc 1->1, 1->1; bottleneck 1->2, 2->2; up 2->1; dec 2->1, 1->1; head 1->1
    want = (9 + 1) * 2 + (18 + 2) + (36 + 2) + (8 + 1) + (18 + 1) + (9 + 1) + 2
    assert want == 118
    assert count_parameters(UNetConfig(depth=1, init_filters=1, class_count=1)) == 118


def test_dense_autoencoder_count_by_hand():
    cfg = DenseAEConfig(stage_growths=(2,), bottleneck_growth=4)
    # enc0: 1->2, 3->2; bottleneck: 2->4, 6->4; up 4->2; dec0: 4->2, 6->2; head 2->1
    want = (18 + 2) + (54 + 2) + (72 + 4) + (216 + 4) + (32 + 2) + (72 + 2) + (108 + 2) + (2 + 1)
    assert count_parameters(cfg) == want == 593


@settings(max_examples=40, deadline=None)
@given(depth=st.integers(1, 4), init=st.integers(1, 6), cin=st.integers(1, 3), classes=st.integers(1, 4))
def test_count_matches_built_network(depth, init, cin, classes):
    cfg = UNetConfig(depth=depth, init_filters=init, in_channels=cin, class_count=classes)
    assert build_unet(cfg, None).numel() == count_parameters(cfg)


@settings(max_examples=30, deadline=None)
@given(growths=st.lists(st.integers(1, 5), min_size=1, max_size=3), bottleneck=st.integers(1, 6))
def test_autoencoder_count_matches_built_network(growths, bottleneck):
    cfg = DenseAEConfig(stage_growths=tuple(growths), bottleneck_growth=bottleneck)
    assert build_dense_autoencoder(cfg, None).numel() == count_parameters(cfg)


def test_layer_names_unique():
    for layers in (unet_layers(DEEP), unet_layers(WIDE), autoencoder_layers(DenseAEConfig(), seg_classes=3)):
        names = [l[0] for l in layers]
        assert len(names) == len(set(names))


def test_config_validation():
    with pytest.raises(ConfigError):
        UNetConfig(depth=0)
    with pytest.raises(ConfigError):
        DenseAEConfig(stage_growths=())
    assert DEEP.scaled(8).init_filters == 8 and WIDE.scaled(8).init_filters == 32
    assert DenseAEConfig().scaled(16).stage_growths == (2, 4)


@pytest.mark.parametrize("cfg", [DEEP.scaled(16), WIDE.scaled(16)])
def test_forward_preserves_extents(cfg):
    net = build_unet(cfg, Rng(0))
    out = net(Tensor(np.zeros((2, 1, 64, 64))))
    assert out.shape == (2, 3, 64, 64)


def test_autoencoder_forward_shape():
    ae = build_dense_autoencoder(DenseAEConfig().scaled(16), Rng(0), seg_classes=3)
    recon, seg = ae.forward_with_segmentation(Tensor(np.zeros((1, 1, 64, 64))))
    assert recon.shape == (1, 1, 64, 64) and seg.shape == (1, 3, 64, 64)
    with pytest.raises(ConfigError):
        build_dense_autoencoder(DenseAEConfig().scaled(16), Rng(0)).forward_with_segmentation(Tensor(np.zeros((1, 1, 8, 8))))


def test_indivisible_extent_rejected():
    net = build_unet(DEEP.scaled(16), None)
    with pytest.raises(ShapeError):
        net(Tensor(np.zeros((1, 1, 60, 60))))
    with pytest.raises(ShapeError):
        net(Tensor(np.zeros((1, 2, 64, 64))))


def test_zero_weights_output_head_bias():
    net = build_unet(UNetConfig(depth=2, init_filters=2), None)
    net.params["head.bias"].data[:] = [0.5, -1.0, 2.0]
    out = net(Tensor(np.random.default_rng(0).standard_normal((1, 1, 16, 16)))).data
    np.testing.assert_array_equal(out[0], np.broadcast_to([[[0.5]], [[-1.0]], [[2.0]]], (3, 16, 16)))


def test_init_bounds_and_determinism():
    a = build_unet(UNetConfig(depth=2, init_filters=4), Rng(5))
    b = build_unet(UNetConfig(depth=2, init_filters=4), Rng(5))
    for (name, ta), tb in zip(a.params.items(), b.params.values()):
        np.testing.assert_array_equal(ta.data, tb.data)
        if name.endswith(".bias"):
            assert not ta.data.any()
        else:
            cin, k = (ta.shape[1], ta.shape[2]) if not name.endswith(".up.weight") else (ta.shape[0], 2)
            bound = math.sqrt(6.0 / ((1 + SLOPE ** 2) * cin * k * k))
            assert np.abs(ta.data).max() <= bound
            assert np.abs(ta.data).max() > 0.5 * bound


def test_init_keeps_activation_scale():
    net = build_unet(DEEP.scaled(16), Rng(2))
    x = np.random.default_rng(0).random((2, 1, 64, 64))
    out = net(Tensor(x)).data
    assert 0.05 < out.std() < 20


def _net_loss(net, x, y):
    return lambda: net.loss(x, y)


def test_unet_gradient_elementwise():
    rng = np.random.default_rng(0)
    net = build_unet(UNetConfig(depth=1, init_filters=2), Rng(11))
    x = Tensor(rng.standard_normal((2, 1, 8, 8)))
    y = rng.integers(0, 3, (2, 8, 8))
    params = net.params.tensors()
    grads = analytic_grad(_net_loss(net, x, y), params)
    for p, g in zip(params, grads):
        num = numeric_grad(lambda: float(net.loss(x, y).data), p.data)
        assert rel_err(g, num) < 1e-4, p.name


@pytest.mark.parametrize("cfg", [UNetConfig(depth=3, init_filters=4), UNetConfig(depth=2, init_filters=4)])
def test_unet_gradient_directional(cfg):
    rng = np.random.default_rng(1)
    net = build_unet(cfg, Rng(3))
    x = Tensor(rng.standard_normal((1, 1, 8, 8)))
    y = rng.integers(0, 3, (1, 8, 8))
    for _ in range(3):
        a, n = gc.directional_check(_net_loss(net, x, y), net.params.tensors(), rng)
        assert gc.relative_error(a, n) < 1e-4


def test_autoencoder_gradient_directional():
    rng = np.random.default_rng(2)
    ae = build_dense_autoencoder(DenseAEConfig(stage_growths=(2, 3), bottleneck_growth=4), Rng(4))
    x = Tensor(rng.standard_normal((1, 1, 8, 8)))
    target = rng.standard_normal((1, 1, 8, 8))
    for _ in range(3):
        a, n = gc.directional_check(lambda: gc.mse(ae(x), target), ae.params.tensors(), rng)
        assert gc.relative_error(a, n) < 1e-4
