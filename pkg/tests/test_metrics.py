import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.lib.stride_tricks import sliding_window_view

from scdm.labelmap import SemanticMap, class_ious
from scdm.metrics import (
    GroupAssignment,
    capped_psnr,
    frechet_from_moments,
    frechet_gaussian,
    grouped_miou,
    psnr,
    ssim,
)


class TestGroupedMiou:
    def test_identical(self, rng):
        m = SemanticMap(rng.integers(0, 6, (8, 8)), 6)
        g = GroupAssignment.from_products(np.arange(1, 7))
        assert grouped_miou(m, m, g) == {"all": 1.0, "frequent": 1.0, "common": 1.0, "rare": 1.0}

    def test_absent_groups(self):
        m = SemanticMap(np.array([[0, 1]]), 6)
        g = GroupAssignment.from_products([1, 2, 3, 4, 5, 6])
        out = grouped_miou(m, m, g)
        assert out["common"] is None and out["rare"] is None and out["frequent"] == 1.0

    def test_hand_example_one_group(self):
        pred = SemanticMap(np.array([[0, 0], [1, 1]]), 3)
        truth = SemanticMap(np.array([[0, 1], [1, 1]]), 3)
        g = GroupAssignment({0: "rare", 1: "rare", 2: "frequent"})
        assert grouped_miou(pred, truth, g)["rare"] == pytest.approx(7 / 12, abs=1e-15)

    def test_terciles(self):
        g = GroupAssignment.from_products([30.0, 1.0, 500.0, 2.0, 90.0, 4.0])
        assert g.classes("frequent") == [1, 3]
        assert g.classes("common") == [0, 5]
        assert g.classes("rare") == [2, 4]

    @given(st.integers(0, 2**31))
    def test_bounds(self, seed):
        rng = np.random.default_rng(seed)
        a = SemanticMap(rng.integers(0, 6, (6, 6)), 6)
        b = SemanticMap(rng.integers(0, 6, (6, 6)), 6)
        out = grouped_miou(a, b, GroupAssignment.from_products(rng.uniform(1, 100, 6)))
        ious = list(class_ious(a, b).values())
        for v in out.values():
            assert v is None or 0.0 <= v <= 1.0
        assert min(ious) - 1e-15 <= out["all"] <= max(ious) + 1e-15


class TestPsnr:
    def test_identical(self, rng):
        x = rng.standard_normal((4, 4, 3))
        assert psnr(x, x) == math.inf
        assert capped_psnr(psnr(x, x)) == 99.0

    def test_unit_difference(self):
        assert psnr(np.zeros((3, 3)), np.ones((3, 3)), data_range=1.0) == pytest.approx(0.0, abs=1e-12)

    def test_half_difference(self):
        v = psnr(np.zeros((3, 3)), np.full((3, 3), 0.5), data_range=1.0)
        assert v == pytest.approx(10 * math.log10(4), abs=1e-12)
        assert v == pytest.approx(6.0206, abs=1e-4)

    def test_monotone_in_noise(self, rng):
        x = rng.uniform(-1, 1, (16, 16))
        noise = rng.standard_normal(x.shape)
        vals = [psnr(x, x + a * noise) for a in (0.01, 0.1, 0.5)]
        assert vals[0] > vals[1] > vals[2]


def ssim_direct(a, b, window, data_range=2.0, k1=0.01, k2=0.03):
    """Straight transcription of the SSIM formula, one window at a time."""
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    vals = []
    for i in range(a.shape[0] - window + 1):
        for j in range(a.shape[1] - window + 1):
            pa = a[i:i + window, j:j + window].ravel()
            pb = b[i:i + window, j:j + window].ravel()
            ma, mb = pa.mean(), pb.mean()
            va, vb = pa.var(), pb.var()
            cov = ((pa - ma) * (pb - mb)).mean()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestSsim:
    def test_self(self, rng):
        x = rng.uniform(-1, 1, (10, 10, 3))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-15)

    def test_symmetric(self, rng):
        a, b = rng.uniform(-1, 1, (2, 9, 9))
        assert ssim(a, b) == ssim(b, a)

    def test_single_window(self, rng):
        a, b = rng.uniform(-1, 1, (2, 4, 4))
        assert ssim(a, b, window=4) == pytest.approx(ssim_direct(a, b, 4), abs=1e-10)

    def test_sliding(self, rng):
        a, b = rng.uniform(-1, 1, (2, 11, 13))
        assert ssim(a, b, window=5) == pytest.approx(ssim_direct(a, b, 5), abs=1e-10)

    def test_against_skimage(self, rng):
        skm = pytest.importorskip("skimage.metrics")
        a, b = rng.uniform(-1, 1, (2, 20, 20))
        ref = skm.structural_similarity(a, b, win_size=7, data_range=2.0, use_sample_covariance=False)
        # skimage averages over the cropped interior, which equals all full windows here
        assert ssim(a, b, window=7) == pytest.approx(ref, abs=1e-10)

    def test_gaussian_window_runs(self, rng):
        a = rng.uniform(-1, 1, (12, 12))
        assert ssim(a, a, window=7, gaussian=True) == pytest.approx(1.0)

    def test_window_too_big(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((3, 3)), np.zeros((3, 3)), window=7)


class TestFrechet:
    def test_identical(self, rng):
        a = rng.standard_normal((200, 4))
        assert frechet_gaussian(a, a) < 1e-8

    def test_mean_shift(self):
        cov = np.array([[2.0, 0.3], [0.3, 1.0]])
        d = np.array([1.5, -2.0])
        assert frechet_from_moments(np.zeros(2), cov, d, cov) == pytest.approx(d @ d, abs=1e-9)

    def test_scalar_closed_form(self):
        assert frechet_from_moments(0.0, 1.0, 1.0, 4.0) == pytest.approx(2.0, abs=1e-12)

    def test_symmetric_and_rotation_invariant(self, rng):
        a = rng.standard_normal((300, 3)) @ rng.standard_normal((3, 3))
        b = rng.standard_normal((300, 3)) + 0.5
        Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        d = frechet_gaussian(a, b)
        assert frechet_gaussian(b, a) == pytest.approx(d, abs=1e-6)
        assert frechet_gaussian(a @ Q.T, b @ Q.T) == pytest.approx(d, abs=1e-6)

    def test_few_samples_shrinkage(self, rng):
        a = rng.standard_normal((3, 5))
        b = rng.standard_normal((3, 5))
        assert math.isfinite(frechet_gaussian(a, b))
