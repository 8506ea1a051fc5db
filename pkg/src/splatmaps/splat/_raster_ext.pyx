# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-pixel compositing kernels (forward and backward).

Tiles and pixels are visited in a fixed order so gradient accumulation is
bitwise reproducible.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

cdef double ALPHA_MIN = 1e-8
cdef double ALPHA_MAX = 0.99
cdef double T_MIN = 1e-4


def _pack(xy, conic, opac, color, depth, bbox, tile_list):
    """Gather per-entry data into contiguous rows so list traversal is sequential.

    Row layout: x, y, conic a, b, c, opacity, box x0, x1, y0, y1 and the
    falloff ``ln(opacity / ALPHA_MIN)`` beyond which a term is skipped
    without evaluating ``exp``. Colour rows carry r, g, b, depth.
    """
    idx = np.asarray(tile_list, dtype=np.intp)
    ent = np.empty((len(idx), 11))
    ent[:, 0:2] = np.asarray(xy)[idx]
    ent[:, 2:5] = np.asarray(conic)[idx]
    ent[:, 5] = np.asarray(opac)[idx]
    ent[:, 6:10] = np.asarray(bbox)[idx]
    with np.errstate(divide="ignore"):
        ent[:, 10] = np.log(ent[:, 5] / ALPHA_MIN) + 1e-9
    col = np.empty((len(idx), 4))
    col[:, 0:3] = np.asarray(color)[idx]
    col[:, 3] = np.asarray(depth)[idx]
    return ent, col


def forward(
    const double[:, ::1] xy,
    const double[:, ::1] conic,
    const double[::1] opac,
    const double[:, ::1] color,
    const double[::1] depth,
    const int[:, ::1] bbox,
    const long long[::1] tile_ranges,
    const int[::1] tile_list,
    int width,
    int height,
    int tile,
):
    rgb_a = np.zeros((height, width, 3))
    final_a = np.ones((height, width))
    dep_a = np.zeros((height, width))
    ncon_a = np.zeros((height, width), dtype=np.int32)
    last_a = np.zeros((height, width), dtype=np.int32)
    cdef double[:, :, ::1] rgb = rgb_a
    cdef double[:, ::1] final_t = final_a
    cdef double[:, ::1] dep = dep_a
    cdef int[:, ::1] ncon = ncon_a
    cdef int[:, ::1] last = last_a

    ent_a, col_a = _pack(xy, conic, opac, color, depth, bbox, tile_list)
    cdef double[:, ::1] ent = ent_a
    cdef double[:, ::1] col = col_a
    cdef int ntx = (width + tile - 1) // tile
    cdef int nty = (height + tile - 1) // tile
    cdef int tx, ty, x, y, n
    cdef long long k, start, stop, end
    cdef double px, py, dx, dy, power, a, t, w, r, gg, bb, d
    with nogil:
        for ty in range(nty):
            for tx in range(ntx):
                start = tile_ranges[ty * ntx + tx]
                stop = tile_ranges[ty * ntx + tx + 1]
                for y in range(ty * tile, min(ty * tile + tile, height)):
                    for x in range(tx * tile, min(tx * tile + tile, width)):
                        px = x
                        py = y
                        t = 1.0
                        r = 0.0
                        gg = 0.0
                        bb = 0.0
                        d = 0.0
                        n = 0
                        end = stop
                        k = start
                        while k < stop:
                            k = k + 1
                            if px < ent[k - 1, 6] or px > ent[k - 1, 7] or py < ent[k - 1, 8] or py > ent[k - 1, 9]:
                                continue
                            dx = px - ent[k - 1, 0]
                            dy = py - ent[k - 1, 1]
                            power = 0.5 * (ent[k - 1, 2] * dx * dx + ent[k - 1, 4] * dy * dy) + ent[k - 1, 3] * dx * dy
                            if power > ent[k - 1, 10]:
                                continue
                            a = ent[k - 1, 5] * exp(-power)
                            if a < ALPHA_MIN:
                                continue
                            if a > ALPHA_MAX:
                                a = ALPHA_MAX
                            w = a * t
                            r = r + col[k - 1, 0] * w
                            gg = gg + col[k - 1, 1] * w
                            bb = bb + col[k - 1, 2] * w
                            d = d + col[k - 1, 3] * w
                            t = t * (1.0 - a)
                            n = n + 1
                            if t < T_MIN:
                                end = k
                                break
                        rgb[y, x, 0] = r
                        rgb[y, x, 1] = gg
                        rgb[y, x, 2] = bb
                        dep[y, x] = d
                        final_t[y, x] = t
                        ncon[y, x] = n
                        last[y, x] = <int>end
    return rgb_a, final_a, dep_a, ncon_a, last_a


def backward(
    const double[:, ::1] xy,
    const double[:, ::1] conic,
    const double[::1] opac,
    const double[:, ::1] color,
    const int[:, ::1] bbox,
    const long long[::1] tile_ranges,
    const int[::1] tile_list,
    const int[:, ::1] last,
    int width,
    int height,
    int tile,
    const double[:, ::1] final_t,
    const double[:, :, ::1] grad_rgb,
    const double[:, ::1] grad_alpha,
):
    cdef Py_ssize_t m = opac.shape[0]
    d_xy_a = np.zeros((m, 2))
    d_conic_a = np.zeros((m, 3))
    d_opac_a = np.zeros(m)
    d_color_a = np.zeros((m, 3))
    cdef double[:, ::1] d_xy = d_xy_a
    cdef double[:, ::1] d_conic = d_conic_a
    cdef double[::1] d_opac = d_opac_a
    cdef double[:, ::1] d_color = d_color_a

    ent_a, col_a = _pack(xy, conic, opac, color, np.zeros(m), bbox, tile_list)
    cdef double[:, ::1] ent = ent_a
    cdef double[:, ::1] col = col_a
    cdef int ntx = (width + tile - 1) // tile
    cdef int nty = (height + tile - 1) // tile
    cdef int tx, ty, x, y, g
    cdef long long k, start
    cdef double px, py, dx, dy, power, a, ex, t, t_i, tf, inv
    cdef double gr, ggr, gbl, ga, sr, sg, sb, cg, da, dp, w
    cdef bint clamped
    with nogil:
        for ty in range(nty):
            for tx in range(ntx):
                start = tile_ranges[ty * ntx + tx]
                for y in range(ty * tile, min(ty * tile + tile, height)):
                    for x in range(tx * tile, min(tx * tile + tile, width)):
                        px = x
                        py = y
                        tf = final_t[y, x]
                        t = tf
                        gr = grad_rgb[y, x, 0]
                        ggr = grad_rgb[y, x, 1]
                        gbl = grad_rgb[y, x, 2]
                        ga = grad_alpha[y, x]
                        sr = 0.0
                        sg = 0.0
                        sb = 0.0
                        k = last[y, x]
                        while k > start:
                            k = k - 1
                            if px < ent[k, 6] or px > ent[k, 7] or py < ent[k, 8] or py > ent[k, 9]:
                                continue
                            g = tile_list[k]
                            dx = px - ent[k, 0]
                            dy = py - ent[k, 1]
                            power = 0.5 * (ent[k, 2] * dx * dx + ent[k, 4] * dy * dy) + ent[k, 3] * dx * dy
                            if power > ent[k, 10]:
                                continue
                            ex = exp(-power)
                            a = ent[k, 5] * ex
                            if a < ALPHA_MIN:
                                continue
                            clamped = a > ALPHA_MAX
                            if clamped:
                                a = ALPHA_MAX
                            inv = 1.0 / (1.0 - a)
                            t_i = t * inv
                            w = a * t_i
                            cg = col[k, 0] * gr + col[k, 1] * ggr + col[k, 2] * gbl
                            da = t_i * cg - (sr * gr + sg * ggr + sb * gbl) * inv + ga * tf * inv
                            d_color[g, 0] += w * gr
                            d_color[g, 1] += w * ggr
                            d_color[g, 2] += w * gbl
                            sr = sr + col[k, 0] * w
                            sg = sg + col[k, 1] * w
                            sb = sb + col[k, 2] * w
                            t = t_i
                            if clamped:
                                continue
                            d_opac[g] += ex * da
                            dp = -a * da
                            d_xy[g, 0] += -dp * (ent[k, 2] * dx + ent[k, 3] * dy)
                            d_xy[g, 1] += -dp * (ent[k, 3] * dx + ent[k, 4] * dy)
                            d_conic[g, 0] += 0.5 * dp * dx * dx
                            d_conic[g, 1] += dp * dx * dy
                            d_conic[g, 2] += 0.5 * dp * dy * dy
    return d_xy_a, d_conic_a, d_opac_a, d_color_a
