"""Tile-based front-to-back Gaussian compositing with analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import Camera
from ..gsmap import GaussianSet
from . import _backend
from .projection import Projection, project_gaussians, projection_backward

TILE = 16


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W) alpha-normalised expected depth, 0 where alpha < 1e-6
    n_contrib: np.ndarray  # (H, W) int32


@dataclass
class GradientBuffer:
    means: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    def as_array(self) -> np.ndarray:
        """``(N, 14)`` in GS-map channel order."""
        return np.concatenate(
            [self.means, self.scales, self.quats, self.opacities[:, None], self.colors], axis=1
        )


@dataclass
class RenderState:
    """Everything the backward pass needs from a forward call."""

    proj: Projection
    tile_ranges: np.ndarray
    tile_list: np.ndarray
    final_t: np.ndarray
    last: np.ndarray


def bin_tiles(proj: Projection, width: int, height: int, tile: int = TILE):
    """Per-tile lists of Gaussian indices, each in ascending depth order.

    Returns ``(tile_ranges, tile_list)``: tile ``i`` owns
    ``tile_list[tile_ranges[i]:tile_ranges[i + 1]]``. Depth ties keep input
    order (stable sort).
    """
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    bbox = proj.bbox
    live = np.flatnonzero(proj.visible & (bbox[:, 0] <= bbox[:, 1]) & (bbox[:, 2] <= bbox[:, 3]))
    order = live[np.argsort(proj.depth[live], kind="stable")]
    tx0, tx1 = bbox[order, 0] // tile, bbox[order, 1] // tile
    ty0, ty1 = bbox[order, 2] // tile, bbox[order, 3] // tile
    nx = tx1 - tx0 + 1
    counts = nx * (ty1 - ty0 + 1)
    total = int(counts.sum())
    gid = np.repeat(order, counts)
    first = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - first
    nx_rep = np.repeat(nx, counts)
    tile_id = (np.repeat(ty0, counts) + local // nx_rep) * ntx + np.repeat(tx0, counts) + local % nx_rep
    perm = np.argsort(tile_id, kind="stable")
    tile_list = np.ascontiguousarray(gid[perm], dtype=np.int32)
    tile_ranges = np.zeros(ntx * nty + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile_id, minlength=ntx * nty), out=tile_ranges[1:])
    return tile_ranges, tile_list


def _c(a, dtype=np.float64):
    return np.ascontiguousarray(a, dtype=dtype)


def rasterize(gs: GaussianSet, cam: Camera, return_state: bool = False):
    """Render a Gaussian set over a black background.

    Per pixel, Gaussians are composited front to back in depth order with
    ``alpha_i = min(0.99, opacity_i * exp(-0.5 d^T cov2d^-1 d))``; terms below
    1e-8 are skipped and traversal stops once transmittance drops below 1e-4.
    """
    w, h = cam.width, cam.height
    proj = project_gaussians(gs, cam)
    tile_ranges, tile_list = bin_tiles(proj, w, h)
    rgb, final_t, dsum, ncon, last = _backend.kernels.forward(
        _c(proj.xy),
        _c(proj.conic),
        _c(gs.opacities),
        _c(gs.colors),
        _c(proj.depth),
        _c(proj.bbox, np.int32),
        tile_ranges,
        tile_list,
        w,
        h,
        TILE,
    )
    alpha = 1.0 - final_t
    ok = alpha >= 1e-6
    depth = np.where(ok, dsum / np.where(ok, alpha, 1.0), 0.0)
    out = RenderOutput(rgb, alpha, depth, ncon)
    if return_state:
        return out, RenderState(proj, tile_ranges, tile_list, final_t, last)
    return out


def rasterize_backward(gs: GaussianSet, cam: Camera, grad_rgb, grad_alpha=None, state: RenderState | None = None):
    """Gradient of a scalar image loss w.r.t. every Gaussian parameter.

    ``grad_rgb`` (H, W, 3) and ``grad_alpha`` (H, W) are the upstream
    gradients of the loss w.r.t. the rendered colour and alpha. The forward
    pass is recomputed unless its ``state`` is supplied.
    """
    if state is None:
        _, state = rasterize(gs, cam, return_state=True)
    h, w = cam.height, cam.width
    grad_rgb = _c(np.broadcast_to(grad_rgb, (h, w, 3)))
    grad_alpha = _c(np.zeros((h, w)) if grad_alpha is None else np.broadcast_to(grad_alpha, (h, w)))
    proj = state.proj
    d_xy, d_conic, d_opac, d_color = _backend.kernels.backward(
        _c(proj.xy),
        _c(proj.conic),
        _c(gs.opacities),
        _c(gs.colors),
        _c(proj.bbox, np.int32),
        state.tile_ranges,
        state.tile_list,
        _c(state.last, np.int32),
        w,
        h,
        TILE,
        _c(state.final_t),
        grad_rgb,
        grad_alpha,
    )
    d_means, d_scales, d_quats = projection_backward(gs, cam, proj, d_xy, d_conic)
    return GradientBuffer(d_means, d_scales, d_quats, np.asarray(d_opac), np.asarray(d_color))
