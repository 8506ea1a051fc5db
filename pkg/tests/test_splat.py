import numpy as np
import pytest
import torch
from conftest import front_camera, random_gaussians
from reference import brute_force_render

from splatmaps.core import Camera
from splatmaps.gsmap import GaussianSet
from splatmaps.splat import backend, bin_tiles, project, project_gaussians, rasterize, rasterize_backward
from splatmaps.splat.autograd import render, render_rows


def single(mean, scale, opacity, color, quat=(1, 0, 0, 0)):
    return GaussianSet([mean], [scale], [quat], [opacity], [color])


def concat(*sets):
    return GaussianSet.from_rows(np.concatenate([s.to_rows() for s in sets]))


CAM128 = Camera(100, 100, 64, 64, 128, 128, np.eye(3), np.zeros(3))


def test_project_on_axis():
    p = project(single([0, 0, 2], [0.1] * 3, 0.5, [1, 0, 0])[0], CAM128)
    assert np.allclose(p.mean2d, [64, 64]) and p.depth == 2.0


def test_project_isotropic_covariance_closed_form():
    s = 0.07
    p = project(single([0, 0, 2], [s] * 3, 0.5, [1, 0, 0])[0], CAM128)
    assert np.allclose(p.cov2d, ((100 * s / 2) ** 2 + 0.3) * np.eye(2), atol=1e-12)
    assert np.linalg.det(p.cov2d) > 0


def test_project_culls_behind_and_outside():
    assert project(single([0, 0, -1], [0.1] * 3, 0.5, [1, 0, 0])[0], CAM128) is None
    assert project(single([50, 0, 2], [0.01] * 3, 0.5, [1, 0, 0])[0], CAM128) is None


def test_single_gaussian_half_alpha():
    cam = Camera(100, 100, 8, 8, 17, 17)
    out = rasterize(single([0, 0, 2], [0.05] * 3, 0.5, [1, 0, 0]), cam)
    assert np.allclose(out.rgb[8, 8], [0.5, 0, 0], atol=1e-15)
    assert out.alpha[8, 8] == pytest.approx(0.5, abs=1e-15)
    assert out.depth[8, 8] == pytest.approx(2.0)


def test_two_gaussians_with_alpha_clamp():
    cam = Camera(100, 100, 8, 8, 17, 17)
    gs = concat(single([0, 0, 3], [0.05] * 3, 1.0, [0, 0, 1]), single([0, 0, 2], [0.05] * 3, 0.5, [1, 0, 0]))
    out = rasterize(gs, cam)
    assert np.allclose(out.rgb[8, 8], [0.5, 0, 0.495], atol=1e-12)


def test_single_saturated_contributor():
    cam = Camera(100, 100, 8, 8, 17, 17)
    out = rasterize(single([0, 0, 2], [0.05] * 3, 1.0, [0.2, 0.4, 0.6]), cam)
    assert np.allclose(out.rgb[8, 8], 0.99 * np.array([0.2, 0.4, 0.6]), atol=1e-15)


def test_empty_set_renders_background():
    out = rasterize(GaussianSet.empty(), front_camera())
    assert not out.rgb.any() and not out.alpha.any() and not out.depth.any()


@pytest.mark.parametrize("seed", range(4))
def test_matches_brute_force_reference(seed):
    rng = np.random.default_rng(seed)
    gs = random_gaussians(rng, n=8)
    cam = front_camera(24)
    out = rasterize(gs, cam)
    rgb, alpha, depth = brute_force_render(gs, cam)
    assert np.abs(out.rgb - rgb).max() < 1e-6
    assert np.abs(out.alpha - alpha).max() < 1e-6
    assert np.abs(out.depth - depth).max() < 1e-6


def test_output_invariants(rng):
    for _ in range(5):
        out = rasterize(random_gaussians(rng, n=20, opacity=(0.3, 1.0)), front_camera(32))
        assert out.alpha.min() >= 0 and out.alpha.max() <= 1
        assert np.all(out.rgb <= out.alpha[..., None] + 1e-12)


def test_permutation_invariance(rng):
    gs = random_gaussians(rng, n=12)
    perm = rng.permutation(12)
    a = rasterize(gs, front_camera()).rgb
    b = rasterize(GaussianSet.from_rows(gs.to_rows()[perm]), front_camera()).rgb
    assert np.abs(a - b).max() < 1e-6


def test_tiles_are_depth_sorted(rng):
    gs = random_gaussians(rng, n=30)
    cam = front_camera(40)
    proj = project_gaussians(gs, cam)
    ranges, lst = bin_tiles(proj, cam.width, cam.height)
    assert len(ranges) == 3 * 3 + 1
    for t in range(9):
        ids = lst[ranges[t] : ranges[t + 1]]
        assert np.all(np.diff(proj.depth[ids]) >= 0)


def test_resolution_doubling_preserves_coverage(rng):
    gs = random_gaussians(rng, n=6, scale=(0.15, 0.3), opacity=(0.3, 0.6))
    lo = rasterize(gs, Camera(40, 40, 15.5, 15.5, 32, 32, np.eye(3), [0, 0, 2.5]))
    hi = rasterize(gs, Camera(80, 80, 31.5, 31.5, 64, 64, np.eye(3), [0, 0, 2.5]))
    assert abs(hi.alpha.mean() - lo.alpha.mean()) / lo.alpha.mean() < 0.02


def test_rendering_is_deterministic(rng):
    gs = random_gaussians(rng, n=15)
    cam = front_camera()
    g = np.full((32, 32, 3), 0.01)
    a = rasterize_backward(gs, cam, g).as_array()
    b = rasterize_backward(gs, cam, g).as_array()
    assert a.tobytes() == b.tobytes()


def _fd_check(gs, cam, h=1e-4, tol=1e-3):
    n = cam.width * cam.height * 3
    grads = rasterize_backward(gs, cam, np.full((cam.height, cam.width, 3), 1.0 / n)).as_array()
    rows = gs.to_rows()
    worst = 0.0
    for i in range(len(gs)):
        for c in range(14):
            rp, rm = rows.copy(), rows.copy()
            rp[i, c] += h
            rm[i, c] -= h
            fd = (
                rasterize(GaussianSet.from_rows(rp), cam).rgb.mean()
                - rasterize(GaussianSet.from_rows(rm), cam).rgb.mean()
            ) / (2 * h)
            worst = max(worst, abs(grads[i, c] - fd) / max(abs(fd), 1e-6))
    return worst


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    assert _fd_check(random_gaussians(rng), front_camera()) < 1e-3


def test_zero_upstream_gradient(rng):
    gs = random_gaussians(rng)
    g = rasterize_backward(gs, front_camera(), np.zeros((32, 32, 3)), np.zeros((32, 32)))
    assert not g.as_array().any()


def test_occluded_gaussian_gets_no_gradient():
    cam = Camera(100, 100, 8, 8, 17, 17)
    # three near-opaque wide layers push T below the cutoff before the small one
    fronts = [single([0, 0, z], [2.0] * 3, 1.0, [1, 0, 0]) for z in (2.0, 2.1, 2.2)]
    back = single([0, 0, 3], [0.05] * 3, 0.8, [0, 0, 1])
    g = rasterize_backward(concat(*fronts, back), cam, np.ones((17, 17, 3)), np.ones((17, 17))).as_array()
    assert np.abs(g[3]).max() < 1e-6


def test_culled_gaussian_gets_zero_gradient():
    gs = concat(single([0, 0, 0.5], [0.1] * 3, 0.5, [1, 0, 0]), single([0, 0, 5.0], [0.1] * 3, 0.5, [1, 0, 0]))
    cam = front_camera(dist=-1.0)  # first Gaussian ends up behind the camera
    g = rasterize_backward(gs, cam, np.ones((32, 32, 3)), np.ones((32, 32))).as_array()
    assert not g[0].any() and np.abs(g[1]).max() > 0


def test_backends_agree(rng):
    if "cython" not in backend.available():
        pytest.skip("compiled kernels not built")
    gs = random_gaussians(rng, n=25)
    cam = front_camera(40)
    g_rgb, g_a = rng.normal(size=(40, 40, 3)), rng.normal(size=(40, 40))
    results = []
    prev = backend.current()
    try:
        for name in ("numpy", "cython"):
            backend.use(name)
            results.append((rasterize(gs, cam), rasterize_backward(gs, cam, g_rgb, g_a).as_array()))
    finally:
        backend.use(prev)
    (o1, g1), (o2, g2) = results
    assert np.abs(o1.rgb - o2.rgb).max() < 1e-12
    assert np.array_equal(o1.n_contrib, o2.n_contrib)
    assert np.abs(g1 - g2).max() < 1e-10


def test_autograd_bridge_matches_analytic(rng):
    gs = random_gaussians(rng)
    cam = front_camera()
    rows = torch.tensor(gs.to_rows(), requires_grad=True)
    rgb, alpha, depth = render_rows(rows, cam)
    (rgb.sum() + 2 * alpha.sum()).backward()
    ref = rasterize_backward(gs, cam, np.ones((32, 32, 3)), 2 * np.ones((32, 32))).as_array()
    assert np.allclose(rows.grad.numpy(), ref, atol=1e-12)
    assert not depth.requires_grad


def test_autograd_gradcheck(rng):
    gs = random_gaussians(rng, n=3)
    cam = front_camera(16, f=20.0)
    args = [torch.tensor(a, requires_grad=True) for a in (gs.means, gs.scales, gs.quats, gs.opacities, gs.colors)]
    fn = lambda *a: render(*a, cam)[:2]  # noqa: E731
    assert torch.autograd.gradcheck(fn, args, eps=1e-6, atol=1e-5, rtol=1e-3)
