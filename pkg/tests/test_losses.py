import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from reference import brute_force_chamfer, naive_depth_loss
from scipy.spatial.transform import Rotation

from splatmaps.core import DepthMap, PointCloud, PointMap
from splatmaps.losses import LossWeights, alpha_loss, chamfer, depth_loss, rgb_loss, sample_pointmap


@given(st.integers(0, 10_000), st.integers(1, 200), st.integers(1, 200))
def test_chamfer_matches_brute_force(seed, n, m):
    rng = np.random.default_rng(seed)
    s, t = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    assert abs(chamfer(s, t) - brute_force_chamfer(s, t)) < 1e-9


def test_chamfer_with_duplicates_matches_brute_force(rng):
    s = rng.normal(size=(50, 3))[rng.integers(50, size=400)]
    t = rng.normal(size=(300, 3))
    assert abs(chamfer(s, t) - brute_force_chamfer(s, t)) < 1e-9


def test_chamfer_symmetry_and_rigid_invariance(rng):
    s, t = rng.normal(size=(120, 3)), rng.normal(size=(90, 3))
    r = Rotation.random(random_state=3).as_matrix()
    shift = rng.normal(size=3)
    base = chamfer(PointCloud(s), PointCloud(t))
    assert abs(base - chamfer(t, s)) < 1e-12
    assert abs(base - chamfer(s @ r.T + shift, t @ r.T + shift)) < 1e-6
    assert chamfer(s, s) == 0.0


def test_chamfer_rejects_empty():
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), np.ones((2, 3)))


def test_chamfer_gradient_matches_finite_differences(rng):
    s = torch.tensor(rng.normal(size=(20, 3)), requires_grad=True)
    t = torch.tensor(rng.normal(size=(25, 3)))
    chamfer(s, t).backward()
    h = 1e-6
    for i, c in [(0, 0), (7, 2), (19, 1)]:
        sp, sm = s.detach().numpy().copy(), s.detach().numpy().copy()
        sp[i, c] += h
        sm[i, c] -= h
        fd = (chamfer(sp, t.numpy()) - chamfer(sm, t.numpy())) / (2 * h)
        assert s.grad[i, c].item() == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_depth_loss_constant_offset_is_two():
    gt = np.random.default_rng(0).uniform(1, 3, size=(16, 16))
    mask = np.ones((16, 16), bool)
    assert depth_loss(DepthMap(gt + 0.1, mask), DepthMap(gt, mask)) == pytest.approx(2.0, abs=1e-12)


@given(st.integers(0, 10_000))
def test_depth_loss_matches_naive_loop(seed):
    rng = np.random.default_rng(seed)
    d, gt = rng.uniform(1, 3, size=(2, 9, 7)), rng.uniform(1, 3, size=(2, 9, 7))
    mask = rng.random((2, 9, 7)) > 0.3
    mask[0, 0, 0] = True
    got = depth_loss(DepthMap(d, mask), DepthMap(gt, mask))
    assert got == pytest.approx(naive_depth_loss(d, gt, mask), rel=1e-12)


def test_depth_loss_weights_and_empty_mask():
    d, gt = np.full((4, 4), 2.0), np.full((4, 4), 1.0)
    m = np.ones((4, 4), bool)
    assert depth_loss(DepthMap(d, m), DepthMap(gt, m), LossWeights(depth_l1=1, depth_grad=0)) == 1.0
    with pytest.raises(ValueError):
        depth_loss(DepthMap(d, ~m), DepthMap(gt, m))
    with pytest.raises(ValueError):
        LossWeights(depth_l1=-1)


def test_depth_loss_gradient(rng):
    gt = rng.uniform(1, 2, size=(6, 6))
    mask = np.ones((6, 6), bool)
    d = torch.tensor(gt + rng.normal(0, 0.05, size=(6, 6)), requires_grad=True)
    depth_loss(DepthMap(d, mask), DepthMap(gt, mask)).backward()
    h = 1e-7
    dp, dm = d.detach().numpy().copy(), d.detach().numpy().copy()
    dp[2, 3] += h
    dm[2, 3] -= h
    fd = (depth_loss(DepthMap(dp, mask), DepthMap(gt, mask)) - depth_loss(DepthMap(dm, mask), DepthMap(gt, mask))) / (
        2 * h
    )
    assert d.grad[2, 3].item() == pytest.approx(fd, rel=1e-5)


def test_rgb_loss_perceptual_weight():
    a, b = np.full((4, 4, 3), 0.5), np.full((4, 4, 3), 0.3)
    unit = lambda x, y: torch.ones((), dtype=torch.float64)  # noqa: E731
    assert rgb_loss(a, b) == pytest.approx(0.04)
    assert rgb_loss(a, b, unit) == pytest.approx(0.04 + 0.05, abs=1e-12)
    assert rgb_loss(a, a, unit) == pytest.approx(0.05, abs=1e-15)


def test_alpha_loss_and_shape_check():
    assert alpha_loss(np.ones((3, 3)), np.full((3, 3), 0.5)) == 0.25
    with pytest.raises(ValueError):
        alpha_loss(np.ones((3, 3)), np.ones((3, 4)))


def test_tensor_inputs_return_differentiable_tensor():
    x = torch.zeros((2, 2, 3), dtype=torch.float64, requires_grad=True)
    out = rgb_loss(x, torch.ones((2, 2, 3), dtype=torch.float64))
    assert isinstance(out, torch.Tensor) and out.requires_grad


def test_sample_pointmap_only_valid_and_deterministic():
    vals = np.arange(4 * 4 * 3, dtype=float).reshape(4, 4, 3)
    mask = np.zeros((4, 4), bool)
    mask[1, 2] = mask[3, 0] = True
    pc = sample_pointmap(PointMap(vals, mask), 50, seed=1)
    assert len(pc) == 50
    assert {tuple(p) for p in pc.points} <= {tuple(vals[1, 2]), tuple(vals[3, 0])}
    assert np.array_equal(pc.points, sample_pointmap(PointMap(vals, mask), 50, seed=1).points)
    with pytest.raises(ValueError):
        sample_pointmap(PointMap(vals, np.zeros((4, 4), bool)), 3, 0)


def test_sample_pointmap_uniform_over_valid_pixels():
    vals = np.zeros((2, 5, 3))
    vals[..., 0] = np.arange(10).reshape(2, 5)
    mask = np.ones((2, 5), bool)
    mask[0, 0] = False
    draws = sample_pointmap(PointMap(vals, mask), 1_000_000, seed=5).points[:, 0].astype(int)
    counts = np.bincount(draws, minlength=10)
    assert counts[0] == 0
    expected = 1_000_000 / 9
    # ~5 sigma band for a multinomial cell
    assert np.all(np.abs(counts[1:] - expected) < 5 * np.sqrt(expected))
