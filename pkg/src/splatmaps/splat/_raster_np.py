"""Pure numpy compositing kernels, vectorised per tile.

Same contract as the compiled ``_raster_ext`` module; used when the
extension is unavailable or when ``SPLATMAPS_BACKEND=numpy``.
"""

import numpy as np

from .projection import ALPHA_MAX, ALPHA_MIN

T_MIN = 1e-4


def _tile_alphas(xy, conic, opac, bbox, ids, px, py):
    """Raw and clamped alphas of tile members (rows) at tile pixels (cols)."""
    dx = px[None, :] - xy[ids, 0][:, None]
    dy = py[None, :] - xy[ids, 1][:, None]
    a, b, c = conic[ids, 0][:, None], conic[ids, 1][:, None], conic[ids, 2][:, None]
    power = 0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy
    g = np.exp(-power)
    raw = opac[ids][:, None] * g
    bb = bbox[ids]
    inside = (
        (px[None, :] >= bb[:, 0:1])
        & (px[None, :] <= bb[:, 1:2])
        & (py[None, :] >= bb[:, 2:3])
        & (py[None, :] <= bb[:, 3:4])
    )
    live = inside & (raw >= ALPHA_MIN)
    alpha = np.where(live, np.minimum(raw, ALPHA_MAX), 0.0)
    return dx, dy, g, raw, live, alpha


def _transmittance(alpha):
    """Transmittance before each row and the mask of rows actually composited."""
    t_after = np.cumprod(1.0 - alpha, axis=0)
    t_before = np.vstack([np.ones((1, alpha.shape[1])), t_after[:-1]])
    used = t_before >= T_MIN
    return t_before, used


def _tiles(width, height, tile):
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    for ty in range(nty):
        for tx in range(ntx):
            x0, y0 = tx * tile, ty * tile
            x1, y1 = min(x0 + tile, width), min(y0 + tile, height)
            py, px = np.mgrid[y0:y1, x0:x1]
            yield ty * ntx + tx, (y0, y1, x0, x1), px.ravel().astype(np.float64), py.ravel().astype(np.float64)


def forward(xy, conic, opac, color, depth, bbox, tile_ranges, tile_list, width, height, tile):
    rgb = np.zeros((height, width, 3))
    final_t = np.ones((height, width))
    dep = np.zeros((height, width))
    ncontrib = np.zeros((height, width), dtype=np.int32)
    last = np.zeros((height, width), dtype=np.int32)
    for tid, (y0, y1, x0, x1), px, py in _tiles(width, height, tile):
        start, stop = tile_ranges[tid], tile_ranges[tid + 1]
        shape = (y1 - y0, x1 - x0)
        last[y0:y1, x0:x1] = start
        if stop == start:
            continue
        ids = tile_list[start:stop]
        _, _, _, _, live, alpha = _tile_alphas(xy, conic, opac, bbox, ids, px, py)
        t_before, used = _transmittance(alpha)
        alpha = np.where(used, alpha, 0.0)
        w = alpha * t_before
        rgb[y0:y1, x0:x1] = (w.T @ color[ids]).reshape(shape + (3,))
        dep[y0:y1, x0:x1] = (w.T @ depth[ids]).reshape(shape)
        final_t[y0:y1, x0:x1] = np.prod(1.0 - alpha, axis=0).reshape(shape)
        ncontrib[y0:y1, x0:x1] = (live & used).sum(axis=0).reshape(shape)
        n_used = used.sum(axis=0)
        # index one past the last traversed list entry
        stopped = n_used < len(ids)
        last_local = np.where(stopped, n_used, len(ids))
        last[y0:y1, x0:x1] = (start + last_local).reshape(shape)
    return rgb, final_t, dep, ncontrib, last


def backward(
    xy, conic, opac, color, bbox, tile_ranges, tile_list, last, width, height, tile, final_t, grad_rgb, grad_alpha
):
    m = len(opac)
    d_xy = np.zeros((m, 2))
    d_conic = np.zeros((m, 3))
    d_opac = np.zeros(m)
    d_color = np.zeros((m, 3))
    for tid, (y0, y1, x0, x1), px, py in _tiles(width, height, tile):
        start, stop = tile_ranges[tid], tile_ranges[tid + 1]
        if stop == start:
            continue
        ids = tile_list[start:stop]
        dx, dy, g, raw, live, alpha = _tile_alphas(xy, conic, opac, bbox, ids, px, py)
        t_before, used = _transmittance(alpha)
        alpha = np.where(used, alpha, 0.0)
        live = live & used
        gc = grad_rgb[y0:y1, x0:x1].reshape(-1, 3)
        ga = grad_alpha[y0:y1, x0:x1].reshape(-1)
        tf = final_t[y0:y1, x0:x1].reshape(-1)
        w = alpha * t_before
        cg = color[ids] @ gc.T  # (rows, pixels) c_i . dL/dC
        contrib = w * cg
        behind = np.cumsum(contrib[::-1], axis=0)[::-1] - contrib
        inv = 1.0 / (1.0 - alpha)
        d_alpha = t_before * cg - behind * inv + ga[None, :] * tf[None, :] * inv
        d_alpha = np.where(live, d_alpha, 0.0)
        np.add.at(d_color, ids, w @ gc)
        unclamped = live & (raw <= ALPHA_MAX)
        d_raw = np.where(unclamped, d_alpha, 0.0)
        d_power = -raw * d_raw
        np.add.at(d_opac, ids, (g * d_raw).sum(axis=1))
        a, b, c = conic[ids, 0][:, None], conic[ids, 1][:, None], conic[ids, 2][:, None]
        gx = (d_power * -(a * dx + b * dy)).sum(axis=1)
        gy = (d_power * -(b * dx + c * dy)).sum(axis=1)
        np.add.at(d_xy, ids, np.stack([gx, gy], axis=1))
        dcon = np.stack(
            [(0.5 * d_power * dx * dx).sum(1), (d_power * dx * dy).sum(1), (0.5 * d_power * dy * dy).sum(1)],
            axis=1,
        )
        np.add.at(d_conic, ids, dcon)
    return d_xy, d_conic, d_opac, d_color
