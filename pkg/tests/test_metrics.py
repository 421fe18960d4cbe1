import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semsatlink.metrics import (
    MetricReport,
    ber,
    miou,
    mse,
    proxy_ploss,
    required_mse,
    ssim,
)


def miou_counting_oracle(a, b, num_categories):
    """Per-pixel loop oracle, no vectorization."""
    scores = []
    for c in range(num_categories):
        inter = union = 0
        for pa, pb in zip(a.ravel(), b.ravel()):
            if pa == c or pb == c:
                union += 1
                if pa == c and pb == c:
                    inter += 1
        if union:
            scores.append(inter / union)
    return sum(scores) / len(scores)


class TestMse:
    def test_identical_zero(self):
        img = np.random.default_rng(0).random((8, 8, 3))
        assert mse(img, img) == 0.0

    def test_hand_value(self):
        a = np.zeros((2, 2))
        b = np.array([[1.0, 0.0], [0.0, 0.0]])
        assert mse(a, b) == 0.25


class TestRequiredMse:
    def test_identical_zero(self):
        img = np.random.default_rng(0).random((4, 6, 3))
        mask = np.ones((4, 6))
        assert required_mse(img, img, mask) == 0.0

    def test_all_ones_mask_equals_plain_mse(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((4, 6, 3)), rng.random((4, 6, 3))
        assert required_mse(a, b, np.ones((4, 6))) == pytest.approx(
            mse(a, b), abs=1e-15)

    def test_differences_outside_mask_ignored(self):
        a = np.zeros((4, 4, 3))
        b = np.zeros((4, 4, 3))
        mask = np.zeros((4, 4))
        mask[:2] = 1
        b[2:, :, :] = 0.7
        assert required_mse(a, b, mask) == 0.0

    def test_empty_mask_raises(self):
        img = np.zeros((4, 4, 3))
        with pytest.raises(ValueError, match="no pixels"):
            required_mse(img, img, np.zeros((4, 4)))

    def test_hand_value(self):
        a = np.zeros((1, 2))
        b = np.array([[0.5, 0.1]])
        mask = np.array([[1, 0]])
        assert required_mse(a, b, mask) == 0.25


class TestSsim:
    def test_identical_is_one(self):
        img = np.random.default_rng(0).random((16, 16, 3))
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_negative_image_scores_low(self):
        # mid-contrast scene: smooth gradient plus texture
        rng = np.random.default_rng(2)
        base = np.linspace(0.25, 0.75, 32)[None, :] * np.ones((32, 1))
        img = np.clip(base + 0.1 * rng.standard_normal((32, 32)), 0, 1)
        assert ssim(img, 1.0 - img) < 0.3

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        a, b = rng.random((16, 16)), rng.random((16, 16))
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-12

    def test_bounded(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            a, b = rng.random((12, 12)), rng.random((12, 12))
            assert -1.0 <= ssim(a, b) <= 1.0

    def test_too_small_raises(self):
        with pytest.raises(ValueError, match="window"):
            ssim(np.zeros((4, 4)), np.zeros((4, 4)))


class TestProxyPloss:
    def test_identical_zero(self):
        img = np.random.default_rng(0).random((16, 16, 3))
        assert proxy_ploss(img, img) == 0.0

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        assert abs(proxy_ploss(a, b) - proxy_ploss(b, a)) < 1e-12

    def test_monotone_under_noise(self):
        # averaged over many scenes, sigma 0.2 must exceed sigma 0.05
        rng = np.random.default_rng(5)
        lo = hi = 0.0
        for _ in range(100):
            img = rng.random((16, 16, 3))
            lo += proxy_ploss(img, np.clip(
                img + 0.05 * rng.standard_normal(img.shape), 0, 1))
            hi += proxy_ploss(img, np.clip(
                img + 0.2 * rng.standard_normal(img.shape), 0, 1))
        assert hi > lo

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        assert proxy_ploss(a, b) == proxy_ploss(a, b)


class TestBer:
    def test_identical_zero(self):
        bits = np.random.default_rng(0).integers(0, 2, 100)
        assert ber(bits, bits) == 0.0

    def test_complement_is_one(self):
        bits = np.random.default_rng(1).integers(0, 2, 100)
        assert ber(bits, 1 - bits) == 1.0

    def test_hand_value(self):
        assert ber(np.array([0, 1, 1, 0]), np.array([0, 1, 0, 0])) == 0.25

    def test_length_mismatch_raises(self):
        with pytest.raises(ValueError):
            ber(np.zeros(4), np.zeros(5))


class TestMiou:
    def test_identical_is_one(self):
        seg = np.random.default_rng(0).integers(0, 4, (8, 8))
        assert miou(seg, seg, 4) == 1.0

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(7)
        a = rng.integers(0, 4, (32, 64))
        b = rng.integers(0, 4, (32, 64))
        assert miou(a, b, 4) == pytest.approx(
            miou_counting_oracle(a, b, 4), abs=1e-15)

    def test_absent_categories_excluded(self):
        a = np.zeros((4, 4), dtype=int)
        b = np.zeros((4, 4), dtype=int)
        b[0, 0] = 1
        # category 2 and 3 never appear: mean over {0, 1} only
        expected = (15 / 16 + 0 / 1) / 2
        assert miou(a, b, 4) == pytest.approx(expected, abs=1e-15)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_oracle_agreement_property(self, seed):
        rng = np.random.default_rng(seed)
        c = int(rng.integers(2, 6))
        shape = (int(rng.integers(2, 10)), int(rng.integers(2, 10)))
        a = rng.integers(0, c, shape)
        b = rng.integers(0, c, shape)
        assert miou(a, b, c) == pytest.approx(
            miou_counting_oracle(a, b, c), abs=1e-15)


class TestMetricReport:
    def test_valid(self):
        r = MetricReport(mse=0.1, required_mse=0.2, ssim=0.5, proxy_ploss=1.0)
        assert r.ber is None and r.miou is None

    def test_invalid_rejected(self):
        with pytest.raises(ValueError):
            MetricReport(mse=-0.1, required_mse=0, ssim=0, proxy_ploss=0)
        with pytest.raises(ValueError):
            MetricReport(mse=0, required_mse=0, ssim=1.5, proxy_ploss=0)
