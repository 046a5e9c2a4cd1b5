import numpy as np
import pytest

from dermfuse.errors import ValidationError
from dermfuse.preprocess import (
    IDENTITY_TAG,
    AugmentTag,
    apply_tag,
    augment,
    center_rgb,
    dump_tensor,
    load_tensor,
    resize_bicubic,
)


# --- independent scalar oracle: direct 2-D summation over the 4x4 support ---

def _keys(x):
    a = -0.5
    x = abs(x)
    if x <= 1.0:
        return (a + 2) * x**3 - (a + 3) * x**2 + 1
    if x < 2.0:
        return a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a
    return 0.0


def _oracle_sample(img, side, oi, oj, c):
    h, w = img.shape[:2]
    sy = (oi + 0.5) * h / side - 0.5
    sx = (oj + 0.5) * w / side - 0.5
    iy, ix = int(np.floor(sy)), int(np.floor(sx))
    total = 0.0
    for dy in (-1, 0, 1, 2):
        for dx in (-1, 0, 1, 2):
            wy = _keys(sy - (iy + dy))
            wx = _keys(sx - (ix + dx))
            py = min(max(iy + dy, 0), h - 1)
            px = min(max(ix + dx, 0), w - 1)
            total += wy * wx * img[py, px, c]
    return total


class TestCenterRgb:
    def test_constant_image(self):
        img = np.full((3, 5, 3), 50, dtype=np.uint8)
        out = center_rgb(img, (10.0, 20.0, 30.0))
        assert np.allclose(out[..., 0], 40.0)
        assert np.allclose(out[..., 1], 30.0)
        assert np.allclose(out[..., 2], 20.0)

    def test_zero_mean_is_identity(self):
        img = np.arange(24, dtype=np.uint8).reshape(2, 4, 3)
        out = center_rgb(img, (0.0, 0.0, 0.0))
        assert out.dtype == np.float64
        assert np.array_equal(out, img.astype(np.float64))

    def test_single_pixel_arithmetic(self):
        img = np.array([[[10, 20, 30]]], dtype=np.uint8)
        out = center_rgb(img, (1.0, 2.0, 3.0))
        assert np.array_equal(out[0, 0], [9.0, 18.0, 27.0])

    def test_nonfinite_mean_rejected(self):
        with pytest.raises(ValidationError):
            center_rgb(np.zeros((2, 2, 3), dtype=np.uint8), (np.nan, 0.0, 0.0))


class TestResizeBicubic:
    def test_constant_stays_constant(self):
        img = np.full((6, 9, 3), 7.5)
        for side in (224, 227, 4):
            out = resize_bicubic(img, side)
            assert out.shape == (side, side, 3)
            assert np.max(np.abs(out - 7.5)) < 1e-9

    def test_ramp_downsize_stays_in_range(self):
        ramp = np.linspace(0.0, 1.0, 16).reshape(4, 4)[..., None] * np.ones(3)
        out = resize_bicubic(ramp, 2)
        assert out.min() >= ramp.min() - 1e-12
        assert out.max() <= ramp.max() + 1e-12

    def test_matches_scalar_oracle_upsample(self):
        rng = np.random.default_rng(42)
        img = rng.uniform(0.0, 255.0, size=(8, 8, 3))
        out = resize_bicubic(img, 224)
        probes = rng.integers(0, 224, size=(200, 2))
        for oi, oj in probes:
            for c in range(3):
                assert out[oi, oj, c] == pytest.approx(_oracle_sample(img, 224, oi, oj, c), abs=1e-9)

    def test_matches_scalar_oracle_full_grid(self):
        rng = np.random.default_rng(7)
        img = rng.uniform(-10.0, 10.0, size=(7, 5, 3))
        side = 4
        out = resize_bicubic(img, side)
        expected = np.array(
            [[[_oracle_sample(img, side, i, j, c) for c in range(3)] for j in range(side)] for i in range(side)]
        )
        assert np.max(np.abs(out - expected)) < 1e-9

    def test_degenerate_input_rejected(self):
        with pytest.raises(ValidationError):
            resize_bicubic(np.zeros((1, 5, 3)), 4)


class TestAugment:
    def test_eight_distinct_tags(self):
        img = np.random.default_rng(0).integers(0, 255, size=(6, 6, 3)).astype(np.uint8)
        variants = augment(img)
        assert len(variants) == 8
        assert len({tag for tag, _ in variants}) == 8

    def test_identity_variant_bit_exact(self):
        img = np.random.default_rng(1).integers(0, 255, size=(5, 5, 3)).astype(np.uint8)
        variants = dict(augment(img))
        assert np.array_equal(variants[IDENTITY_TAG], img)

    def test_rot90_twice_equals_rot180(self):
        img = np.random.default_rng(2).integers(0, 255, size=(9, 9, 3)).astype(np.uint8)
        twice = apply_tag(apply_tag(img, AugmentTag(90, False)), AugmentTag(90, False))
        assert np.array_equal(twice, apply_tag(img, AugmentTag(180, False)))

    def test_dihedral_identities(self):
        rng = np.random.default_rng(3)
        img = rng.integers(0, 255, size=(8, 8, 3)).astype(np.uint8)
        r90 = AugmentTag(90, False)
        out = img
        for _ in range(4):
            out = apply_tag(out, r90)
        assert np.array_equal(out, img)
        flip = AugmentTag(0, True)
        assert np.array_equal(apply_tag(apply_tag(img, flip), flip), img)

    def test_commutes_with_centering(self):
        rng = np.random.default_rng(4)
        img = rng.integers(0, 255, size=(6, 6, 3)).astype(np.uint8)
        centered_then_aug = augment(center_rgb(img))
        aug_then_centered = [(tag, center_rgb(v)) for tag, v in augment(img)]
        for (t1, a), (t2, b) in zip(centered_then_aug, aug_then_centered):
            assert t1 == t2
            assert np.array_equal(a, b)

    def test_non_square_rejected(self):
        with pytest.raises(ValidationError):
            augment(np.zeros((4, 6, 3)))


class TestTensorDump:
    def test_roundtrip(self, tmp_path):
        t = np.random.default_rng(5).normal(size=(4, 4, 3)).astype(np.float32)
        path = tmp_path / "tensor.bin"
        dump_tensor(path, t)
        back = load_tensor(path)
        assert back.shape == t.shape
        assert np.array_equal(back, t)
