"""EWA projection of 3D Gaussians to screen space and its analytic adjoint."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import Camera
from ..gsmap import GaussianSet, quat_to_rotmat

Z_NEAR = 0.01
COV2D_DILATION = 0.3  # px^2 low-pass added to every screen covariance
ALPHA_MIN = 1e-8  # contributions below this are skipped; bounds each footprint
ALPHA_MAX = 0.99
FRAME_SIGMAS = 3.0


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray  # (2,) pixels
    cov2d: np.ndarray  # (2, 2) pixels^2
    depth: float
    opacity: float
    color: np.ndarray


@dataclass
class Projection:
    """Screen-space state of a whole Gaussian set under one camera.

    Intermediates needed by :func:`projection_backward` are kept alongside
    the outputs used by the compositing kernels.
    """

    t: np.ndarray  # (N, 3) camera-space means
    xy: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2)
    conic: np.ndarray  # (N, 3) inverse covariance as (a, b, c)
    depth: np.ndarray  # (N,)
    visible: np.ndarray  # (N,) bool
    bbox: np.ndarray  # (N, 4) int32 inclusive pixel box x0, x1, y0, y1
    rotmat: np.ndarray  # (N, 3, 3)
    qnorm: np.ndarray  # (N, 4) normalised quaternions
    qlen: np.ndarray  # (N,)
    cov3d: np.ndarray  # (N, 3, 3)
    jac: np.ndarray  # (N, 2, 3)


def project_gaussians(gs: GaussianSet, cam: Camera) -> Projection:
    n = len(gs)
    w = cam.rotation
    t = gs.means @ w.T + cam.translation
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    front = tz > Z_NEAR
    tz_safe = np.where(front, tz, 1.0)

    qlen = np.linalg.norm(gs.quats, axis=1)
    qn = gs.quats / np.where(qlen > 0, qlen, 1.0)[:, None]
    rot = quat_to_rotmat(qn)
    m = rot * gs.scales[:, None, :]
    cov3d = m @ np.swapaxes(m, 1, 2)

    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / tz_safe
    jac[:, 0, 2] = -cam.fx * tx / tz_safe**2
    jac[:, 1, 1] = cam.fy / tz_safe
    jac[:, 1, 2] = -cam.fy * ty / tz_safe**2
    tmat = jac @ w
    cov2d = tmat @ cov3d @ np.swapaxes(tmat, 1, 2)
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION

    xy = np.stack([cam.fx * tx / tz_safe + cam.cx, cam.fy * ty / tz_safe + cam.cy], axis=1)
    sxx, sxy, syy = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = sxx * syy - sxy * sxy
    conic = np.stack([syy / det, -sxy / det, sxx / det], axis=1)

    sig_x, sig_y = np.sqrt(sxx), np.sqrt(syy)
    in_frame = (
        (xy[:, 0] + FRAME_SIGMAS * sig_x >= 0)
        & (xy[:, 0] - FRAME_SIGMAS * sig_x <= cam.width - 1)
        & (xy[:, 1] + FRAME_SIGMAS * sig_y >= 0)
        & (xy[:, 1] - FRAME_SIGMAS * sig_y <= cam.height - 1)
    )
    op = gs.opacities
    visible = front & in_frame & (op > ALPHA_MIN) & (qlen > 0)

    # Axis-aligned box of the ellipse where opacity * G >= ALPHA_MIN.
    reach = 2.0 * np.log(np.maximum(op, ALPHA_MIN) / ALPHA_MIN)
    hx, hy = np.sqrt(reach * sxx), np.sqrt(reach * syy)
    bbox = np.stack(
        [
            np.ceil(xy[:, 0] - hx),
            np.floor(xy[:, 0] + hx),
            np.ceil(xy[:, 1] - hy),
            np.floor(xy[:, 1] + hy),
        ],
        axis=1,
    )
    bbox[:, 0:2] = np.clip(bbox[:, 0:2], -1, cam.width)
    bbox[:, 2:4] = np.clip(bbox[:, 2:4], -1, cam.height)
    bbox = np.where(visible[:, None], bbox, [0, -1, 0, -1]).astype(np.int32)
    bbox[:, 0] = np.maximum(bbox[:, 0], 0)
    bbox[:, 1] = np.minimum(bbox[:, 1], cam.width - 1)
    bbox[:, 2] = np.maximum(bbox[:, 2], 0)
    bbox[:, 3] = np.minimum(bbox[:, 3], cam.height - 1)

    return Projection(t, xy, cov2d, conic, tz.copy(), visible, bbox, rot, qn, qlen, cov3d, jac)


def project(g, cam: Camera) -> ProjectedGaussian | None:
    """Project one :class:`~splatmaps.gsmap.Gaussian3D`; ``None`` if culled."""
    gs = GaussianSet(g.mean, g.scale, g.rotation, [g.opacity], g.color)
    p = project_gaussians(gs, cam)
    if not p.visible[0]:
        return None
    return ProjectedGaussian(p.xy[0], p.cov2d[0], float(p.depth[0]), float(g.opacity), np.asarray(g.color))


def _rotmat_adjoint(q, g):
    """Gradient w.r.t. a unit quaternion given the gradient w.r.t. its rotation matrix."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = g.reshape(-1, 9)
    g00, g01, g02, g10, g11, g12, g20, g21, g22 = (g[:, i] for i in range(9))
    gw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    gx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    gy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    gz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    return np.stack([gw, gx, gy, gz], axis=1)


def projection_backward(gs: GaussianSet, cam: Camera, proj: Projection, d_xy, d_conic):
    """Chain screen-space gradients back to means, scales and quaternions.

    ``d_conic`` holds plain partials w.r.t. the conic entries ``(a, b, c)``
    where the pixel falloff is ``0.5 * (a dx^2 + c dy^2) + b dx dy``.
    Returns ``(d_means, d_scales, d_quats)``; culled Gaussians get zeros.
    """
    vis = proj.visible
    d_xy = np.where(vis[:, None], d_xy, 0.0)
    d_conic = np.where(vis[:, None], d_conic, 0.0)
    w = cam.rotation
    t = proj.t
    tx, ty = t[:, 0], t[:, 1]
    tz = np.where(vis, t[:, 2], 1.0)

    a, b, c = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    con = np.stack([np.stack([a, b], 1), np.stack([b, c], 1)], 1)
    g_con = np.stack(
        [np.stack([d_conic[:, 0], 0.5 * d_conic[:, 1]], 1), np.stack([0.5 * d_conic[:, 1], d_conic[:, 2]], 1)], 1
    )
    g_cov2d = -con @ g_con @ con

    tmat = proj.jac @ w
    g_cov3d = np.swapaxes(tmat, 1, 2) @ g_cov2d @ tmat
    g_tmat = 2.0 * g_cov2d @ tmat @ proj.cov3d
    g_jac = g_tmat @ w.T

    fx, fy = cam.fx, cam.fy
    d_t = np.zeros_like(t)
    d_t[:, 0] = d_xy[:, 0] * fx / tz - g_jac[:, 0, 2] * fx / tz**2
    d_t[:, 1] = d_xy[:, 1] * fy / tz - g_jac[:, 1, 2] * fy / tz**2
    d_t[:, 2] = (
        -d_xy[:, 0] * fx * tx / tz**2
        - d_xy[:, 1] * fy * ty / tz**2
        - g_jac[:, 0, 0] * fx / tz**2
        + g_jac[:, 0, 2] * 2 * fx * tx / tz**3
        - g_jac[:, 1, 1] * fy / tz**2
        + g_jac[:, 1, 2] * 2 * fy * ty / tz**3
    )
    d_means = d_t @ w

    rot = proj.rotmat
    m = rot * gs.scales[:, None, :]
    g_m = 2.0 * g_cov3d @ m
    d_scales = (g_m * rot).sum(axis=1)
    g_rot = g_m * gs.scales[:, None, :]
    g_qn = _rotmat_adjoint(proj.qnorm, g_rot)
    qn = proj.qnorm
    qlen = np.where(proj.qlen > 0, proj.qlen, 1.0)
    d_quats = (g_qn - qn * (qn * g_qn).sum(axis=1, keepdims=True)) / qlen[:, None]

    zero = ~vis
    d_means[zero] = 0.0
    d_scales[zero] = 0.0
    d_quats[zero] = 0.0
    return d_means, d_scales, d_quats
