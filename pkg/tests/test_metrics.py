import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from reference import windowed_ssim

from splatmaps.metrics import depth_metrics, psnr, ssim


def naive_psnr(a, b):
    err = sum((x - y) ** 2 for x, y in zip(np.ravel(a), np.ravel(b))) / np.size(a)
    return 10 * math.log10(1 / err)


def test_psnr_known_value():
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0, abs=1e-9)
    assert psnr(np.ones(5), np.ones(5)) == math.inf
    with pytest.raises(ValueError):
        psnr(np.ones(3), np.ones(4))


@given(st.integers(0, 10_000))
def test_psnr_matches_naive(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((6, 5, 3)), rng.random((6, 5, 3))
    assert psnr(a, b) == pytest.approx(naive_psnr(a, b), abs=1e-9)


def test_psnr_decreases_with_noise(rng):
    img = rng.random((16, 16, 3))
    noise = rng.normal(size=img.shape)
    vals = [psnr(img, img + s * noise) for s in (0.01, 0.03, 0.1)]
    assert vals[0] > vals[1] > vals[2]


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_windowed_loop(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((20, 18, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(windowed_ssim(a, b), abs=1e-6)


def test_ssim_properties(rng):
    a, b = rng.random((16, 16)), rng.random((16, 16))
    assert ssim(a, a) == pytest.approx(1.0)
    assert ssim(a, b) == pytest.approx(ssim(b, a))
    assert ssim(a, 1 - a) < 0
    with pytest.raises(ValueError):
        ssim(np.ones((8, 8)), np.ones((8, 8)))


def test_depth_metrics_scaled_prediction():
    gt = np.random.default_rng(0).uniform(1, 4, size=(8, 8))
    m = depth_metrics(1.1 * gt, gt)
    assert m["abs_rel"] == pytest.approx(0.1, abs=1e-12)
    assert m["rmse"] == pytest.approx(0.1 * np.sqrt(np.mean(gt**2)))
    assert m["sq_rel"] == pytest.approx(0.01 * gt.mean())


def test_depth_metrics_match_naive_and_respect_mask(rng):
    gt = rng.uniform(1, 3, size=(10, 10))
    gt[0, :] = np.inf
    d = gt + rng.normal(0, 0.1, gt.shape)
    alpha = rng.random(gt.shape)
    pairs = [(p, g) for p, g, a in zip(d.ravel(), gt.ravel(), alpha.ravel()) if np.isfinite(g) and a > 0.5]
    m = depth_metrics(d, gt, alpha)
    assert m["abs_rel"] == pytest.approx(sum(abs(p - g) / g for p, g in pairs) / len(pairs), rel=1e-12)
    assert m["sq_rel"] == pytest.approx(sum((p - g) ** 2 / g for p, g in pairs) / len(pairs), rel=1e-12)
    assert m["rmse"] == pytest.approx(math.sqrt(sum((p - g) ** 2 for p, g in pairs) / len(pairs)), rel=1e-12)
    with pytest.raises(ValueError):
        depth_metrics(d, np.full(gt.shape, np.inf))
