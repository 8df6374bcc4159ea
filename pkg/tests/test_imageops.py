import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resdistill.errors import ValidationError
from resdistill.imageops import (
    bilinear_downsample,
    crop_patches,
    min_max_normalize,
    psnr,
    quantize8,
    shannon_entropy,
    ssim,
)


def entropy_oracle(img):
    """Independent histogram-entropy reference (plain loops over quantized luminance)."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3:
        y = 0.299 * a[:, :, 0] + 0.587 * a[:, :, 1] + 0.114 * a[:, :, 2]
    else:
        y = a
    counts = {}
    for v in y.ravel():
        b = min(255, max(0, int(math.floor(v * 255.0 + 0.5))))
        counts[b] = counts.get(b, 0) + 1
    total = sum(counts.values())
    return -sum((c / total) * math.log2(c / total) for c in counts.values())


class TestEntropy:
    def test_constant_image_zero_bits(self):
        assert shannon_entropy(np.full((16, 16, 3), 0.37)) == 0.0

    def test_two_equal_bins_one_bit(self):
        img = np.zeros((2, 8))
        img[1, :] = 1.0
        assert shannon_entropy(img) == pytest.approx(1.0, abs=1e-12)

    def test_uniform_256_levels_eight_bits(self):
        img = (np.arange(256, dtype=np.float64) / 255.0).reshape(16, 16)
        assert shannon_entropy(img) == pytest.approx(8.0, abs=1e-12)

    def test_matches_independent_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            img = rng.random((24, 17, 3))
            assert shannon_entropy(img) == pytest.approx(entropy_oracle(img), abs=1e-12)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(8)
        img = rng.random((12, 12))
        flat = img.ravel().copy()
        rng.shuffle(flat)
        assert shannon_entropy(flat.reshape(12, 12)) == pytest.approx(shannon_entropy(img), abs=1e-12)

    def test_range(self):
        rng = np.random.default_rng(9)
        for _ in range(5):
            e = shannon_entropy(rng.random((20, 20, 3)))
            assert 0.0 <= e <= 8.0


class TestMinMaxNormalize:
    def test_affine_map(self):
        assert np.allclose(min_max_normalize([2, 4, 6]), [0.0, 0.5, 1.0])

    def test_degenerate_all_equal(self):
        assert np.array_equal(min_max_normalize([5, 5, 5]), [0.0, 0.0, 0.0])

    def test_singleton(self):
        assert np.array_equal(min_max_normalize([3]), [0.0])

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            min_max_normalize([])

    @given(st.lists(st.floats(min_value=-1e6, max_value=1e6), min_size=2, max_size=50))
    @settings(max_examples=50, deadline=None)
    def test_order_preserved_and_bounded(self, xs):
        out = min_max_normalize(xs)
        assert out.min() >= 0.0 and out.max() <= 1.0
        order = np.argsort(xs, kind="stable")
        assert np.all(np.diff(out[order]) >= -1e-12)

    def test_idempotent_on_spanning_input(self):
        x = np.array([0.0, 0.25, 0.8, 1.0])
        assert np.allclose(min_max_normalize(min_max_normalize(x)), min_max_normalize(x))


class TestPsnr:
    def test_identical_inputs_inf(self):
        x = np.random.default_rng(0).random((8, 8, 3))
        assert psnr(x, x) == float("inf")

    def test_zero_vs_one_is_zero_db(self):
        assert psnr(np.zeros((4, 4)), np.ones((4, 4))) == pytest.approx(0.0, abs=1e-12)

    def test_known_mse_closed_form(self):
        a = np.zeros((10, 10))
        b = np.full((10, 10), 0.1)  # MSE = 0.01
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((6, 6)), rng.random((6, 6))
        assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            psnr(np.zeros((4, 4)), np.zeros((5, 4)))


class TestSsim:
    def test_self_similarity_is_one(self):
        x = np.random.default_rng(2).random((32, 32, 3))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-9)

    def test_constant_zero_vs_one(self):
        c1 = 0.01**2
        got = ssim(np.zeros((16, 16)), np.ones((16, 16)))
        assert got == pytest.approx(c1 / (1.0 + c1), rel=1e-9)

    def test_tiny_perturbation_stays_high(self):
        x = np.random.default_rng(3).random((32, 32)) * 0.9
        assert ssim(x, x + 1e-4) > 0.999

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        a, b = rng.random((20, 20)), rng.random((20, 20))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_smaller_than_window_rejected(self):
        with pytest.raises(ValidationError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestBilinear:
    def test_constant_preserved(self):
        img = np.full((9, 13, 3), 0.7)
        out = bilinear_downsample(img, (4, 5))
        assert np.allclose(out, 0.7, atol=1e-12)
        assert out.shape == (4, 5, 3)

    def test_identity_at_source_size(self):
        img = np.random.default_rng(5).random((11, 7, 3))
        assert np.array_equal(bilinear_downsample(img, (11, 7)), img)

    def test_2x2_average_under_edge_centered_convention(self):
        img = np.array([[0.0, 1.0], [0.0, 1.0]])
        assert bilinear_downsample(img, (1, 1))[0, 0] == pytest.approx(0.5, abs=1e-12)

    def test_zero_target_rejected(self):
        with pytest.raises(ValidationError):
            bilinear_downsample(np.zeros((4, 4)), (0, 2))

    def test_two_step_equals_one_step_for_constants(self):
        img = np.full((32, 32), 0.42)
        once = bilinear_downsample(img, (8, 8))
        twice = bilinear_downsample(bilinear_downsample(img, (16, 16)), (8, 8))
        assert np.allclose(once, twice, atol=1e-12)

    def test_values_stay_in_range(self):
        img = np.random.default_rng(6).random((33, 21, 3))
        out = bilinear_downsample(img, (10, 14))
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestCropPatches:
    def test_full_size_single_crop_is_whole_image(self):
        img = np.random.default_rng(7).random((16, 16, 3))
        (patch,) = crop_patches(img, 16, 1, seed=3)
        assert np.array_equal(patch, img)

    def test_count_and_size(self):
        img = np.random.default_rng(8).random((32, 40, 3))
        patches = crop_patches(img, 12, 8, seed=4)
        assert len(patches) == 8
        assert all(p.shape == (12, 12, 3) for p in patches)

    def test_deterministic(self):
        img = np.random.default_rng(9).random((32, 32))
        a = crop_patches(img, 8, 5, seed=11)
        b = crop_patches(img, 8, 5, seed=11)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_oversized_rejected(self):
        with pytest.raises(ValidationError):
            crop_patches(np.zeros((8, 8)), 9, 1, seed=0)


def test_quantize8_is_idempotent_and_on_grid():
    rng = np.random.default_rng(10)
    x = rng.random((6, 6, 3))
    q = quantize8(x)
    assert np.array_equal(quantize8(q), q)
    assert np.allclose(q * 255.0, np.round(q * 255.0), atol=1e-9)
