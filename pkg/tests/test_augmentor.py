import numpy as np
import pytest
from scipy.ndimage import map_coordinates

from pnnunet.augmentor import (AugmentPolicy, ElasticParams, Split, apply_policy, augment_volume, elastic_deform,
                               gaussian_kernel, horizontal_flip, make_displacement, smooth)
from pnnunet.errors import ConfigError, ShapeError
from pnnunet.volumedata import Rng


def pair(seed=0, shape=(16, 12)):
    gen = np.random.default_rng(seed)
    return gen.random(shape), gen.integers(0, 3, shape)


def test_policies_per_split():
    train = AugmentPolicy.for_split(Split.TRAIN)
    assert train.flip_probability == 0.25 and train.elastic == ElasticParams(34 * 64 / 28, 4 * 64 / 28)
    val = AugmentPolicy.for_split(Split.VAL)
    assert val.flip_probability == 0.25 and val.elastic is None
    assert AugmentPolicy.for_split(Split.TEST).is_identity
    with pytest.raises(ConfigError):
        AugmentPolicy(1.5)
    with pytest.raises(ConfigError):
        ElasticParams(1.0, 0.0)


def test_kernel_normalised_and_truncated():
    k = gaussian_kernel(2.0)
    assert len(k) == 2 * 6 + 1
    assert k.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(k, k[::-1])


def test_smoothing_keeps_constants():
    np.testing.assert_allclose(smooth(np.full((20, 20), 0.3), 3.0), 0.3, atol=1e-14)


def test_zero_alpha_gives_zero_field():
    dy, dz = make_displacement((8, 8), 0.0, 2.0, Rng(1))
    assert not dy.any() and not dz.any()


def test_field_bounded_by_alpha():
    for seed in range(10):
        dy, dz = make_displacement((64, 64), 77.7, 9.1, Rng(seed))
        assert np.abs(dy).max() < 77.7 and np.abs(dz).max() < 77.7
        assert np.isfinite(dy).all() and np.isfinite(dz).all()


def test_zero_field_is_identity():
    img, msk = pair()
    out_img, out_msk = elastic_deform(img, msk, (np.zeros(img.shape), np.zeros(img.shape)))
    np.testing.assert_array_equal(out_img, img)
    np.testing.assert_array_equal(out_msk, msk)


def test_integer_shift_moves_content_one_pixel():
    img, msk = pair(1)
    out_img, out_msk = elastic_deform(img, msk, (np.ones(img.shape), np.zeros(img.shape)))
    np.testing.assert_array_equal(out_img[:-1], img[1:])
    np.testing.assert_array_equal(out_msk[:-1], msk[1:])
    assert not out_img[-1].any() and not out_msk[-1].any()


def test_bilinear_matches_scipy():
    img, msk = pair(2)
    dy, dz = make_displacement(img.shape, 6.0, 1.5, Rng(3))
    gy, gz = np.meshgrid(np.arange(img.shape[0]), np.arange(img.shape[1]), indexing="ij")
    want = map_coordinates(img, [gy + dy, gz + dz], order=1, mode="grid-constant", cval=0.0)
    got, _ = elastic_deform(img, msk, (dy, dz))
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_mask_labels_preserved():
    img, msk = pair(3, (32, 32))
    for seed in range(5):
        _, warped = elastic_deform(img, msk, make_displacement(img.shape, 8.0, 2.0, Rng(seed)))
        assert set(np.unique(warped)) <= set(np.unique(msk)) | {0}


def test_image_and_mask_share_the_transform():
    # with integer displacements bilinear and nearest sampling coincide
    _, msk = pair(10, (32, 32))
    for seed in range(5):
        dy, dz = (np.rint(f) for f in make_displacement(msk.shape, 8.0, 2.0, Rng(seed)))
        as_image, as_mask = elastic_deform(msk.astype(float), msk, (dy, dz))
        np.testing.assert_array_equal(as_image, as_mask)


def test_background_grows_under_boundary_fill():
    msk = np.ones((16, 16), dtype=np.int64)
    for seed in range(5):
        _, warped = elastic_deform(msk.astype(float), msk, make_displacement(msk.shape, 10.0, 2.0, Rng(seed)))
        assert (warped == 0).mean() >= (msk == 0).mean()


def test_shape_mismatch():
    img, msk = pair()
    with pytest.raises(ShapeError):
        elastic_deform(img, msk[:-1], (np.zeros(img.shape), np.zeros(img.shape)))


def test_flip():
    img, msk = pair(4)
    fi, fm = horizontal_flip(img, msk)
    np.testing.assert_array_equal(fi[:, 0], img[:, -1])
    np.testing.assert_array_equal(horizontal_flip(fi, fm)[0], img)
    np.testing.assert_array_equal(horizontal_flip(fi, fm)[1], msk)


def test_flip_probability_extremes():
    img, msk = pair(5)
    rng = Rng(0)
    for _ in range(20):
        np.testing.assert_array_equal(apply_policy((img, msk), AugmentPolicy(0.0, None, Split.VAL), rng)[0], img)
        np.testing.assert_array_equal(apply_policy((img, msk), AugmentPolicy(1.0, None, Split.VAL), rng)[0], img[:, ::-1])


def test_flip_rate_near_p():
    img, msk = pair(6)
    rng = Rng(9)
    flips = sum(not np.array_equal(apply_policy((img, msk), AugmentPolicy.for_split(Split.VAL), rng)[0], img)
                for _ in range(4000))
    assert abs(flips / 4000 - 0.25) < 0.03


def test_test_policy_bitwise_identity():
    img, msk = pair(7)
    rng = Rng(1)
    state = rng.state
    out = apply_policy((img, msk), AugmentPolicy.for_split(Split.TEST), rng)
    assert out[0] is img and out[1] is msk and rng.state == state


def test_warp_precedes_flip():
    img, msk = pair(8)
    policy = AugmentPolicy(1.0, ElasticParams(5.0, 2.0), Split.TRAIN)
    rng = Rng(4)
    rng.uniform()
    field = make_displacement(img.shape, 5.0, 2.0, rng)
    want = horizontal_flip(*elastic_deform(img, msk, field))
    got = apply_policy((img, msk), policy, Rng(4))
    np.testing.assert_array_equal(got[0], want[0])
    np.testing.assert_array_equal(got[1], want[1])


def test_reproducible_from_stream_state():
    img, msk = pair(9)
    policy = AugmentPolicy.for_split(Split.TRAIN, width=img.shape[1])
    a = apply_policy((img, msk), policy, Rng(12))
    b = apply_policy((img, msk), policy, Rng(12))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_volume_flip_is_shared_across_slices():
    gen = np.random.default_rng(0)
    imgs, msks = gen.random((6, 8, 8)), gen.integers(0, 3, (6, 8, 8))
    policy = AugmentPolicy(0.5, None, Split.VAL)
    for seed in range(20):
        out, _ = augment_volume(imgs, msks, policy, Rng(seed))
        flipped = [np.array_equal(o, i[:, ::-1]) for o, i in zip(out, imgs)]
        assert all(flipped) or not any(flipped)
