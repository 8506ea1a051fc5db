"""Slow, independent reference implementations used as test oracles."""

import numpy as np

ALPHA_MIN = 1e-8
ALPHA_MAX = 0.99
T_MIN = 1e-4
DILATION = 0.3


def rotmat(q):
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def project_one(mean, scale, quat, cam):
    """Screen mean, screen covariance and depth of one Gaussian, or None when culled."""
    t = cam.rotation @ np.asarray(mean) + cam.translation
    if t[2] <= 0.01:
        return None
    r = rotmat(quat)
    sigma = r @ np.diag(np.asarray(scale) ** 2) @ r.T
    j = np.array(
        [
            [cam.fx / t[2], 0, -cam.fx * t[0] / t[2] ** 2],
            [0, cam.fy / t[2], -cam.fy * t[1] / t[2] ** 2],
        ]
    )
    cov = j @ cam.rotation @ sigma @ cam.rotation.T @ j.T + DILATION * np.eye(2)
    mu = np.array([cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy])
    sx, sy = 3 * np.sqrt(cov[0, 0]), 3 * np.sqrt(cov[1, 1])
    if mu[0] + sx < 0 or mu[0] - sx > cam.width - 1 or mu[1] + sy < 0 or mu[1] - sy > cam.height - 1:
        return None
    return mu, cov, t[2]


def brute_force_render(gs, cam, record_transmittance=False):
    """Per-pixel front-to-back compositing with a global exact depth sort and no tiling."""
    items = []
    for i in range(len(gs)):
        if gs.opacities[i] <= ALPHA_MIN:
            continue
        p = project_one(gs.means[i], gs.scales[i], gs.quats[i], cam)
        if p is not None:
            items.append((p[2], i, p[0], np.linalg.inv(p[1])))
    items.sort(key=lambda it: (it[0], it[1]))
    h, w = cam.height, cam.width
    rgb = np.zeros((h, w, 3))
    alpha = np.zeros((h, w))
    depth = np.zeros((h, w))
    trans = {}
    for v in range(h):
        for u in range(w):
            t = 1.0
            seq = [t]
            c = np.zeros(3)
            dz = 0.0
            for z, i, mu, inv in items:
                d = np.array([u, v]) - mu
                a = min(ALPHA_MAX, gs.opacities[i] * np.exp(-0.5 * d @ inv @ d))
                if a < ALPHA_MIN:
                    continue
                c += gs.colors[i] * a * t
                dz += z * a * t
                t *= 1 - a
                seq.append(t)
                if t < T_MIN:
                    break
            rgb[v, u] = c
            alpha[v, u] = 1 - t
            depth[v, u] = dz / alpha[v, u] if alpha[v, u] >= 1e-6 else 0.0
            trans[(v, u)] = seq
    if record_transmittance:
        return rgb, alpha, depth, trans
    return rgb, alpha, depth


def brute_force_chamfer(s, t):
    s, t = np.asarray(s, dtype=np.float64), np.asarray(t, dtype=np.float64)
    d = ((s[:, None, :] - t[None, :, :]) ** 2).sum(-1)
    return d.min(1).mean() + d.min(0).mean()


def naive_depth_loss(d, gt, mask, a=20.0, b=20.0):
    """Loop-based evaluation of the masked L1 + forward-difference gradient loss."""
    d, gt, mask = np.asarray(d, dtype=np.float64), np.asarray(gt, dtype=np.float64), np.asarray(mask, bool)
    if d.ndim == 2:
        d, gt, mask = d[None], gt[None], mask[None]
    n = l1 = grad = 0.0
    views, h, w = d.shape
    for k in range(views):
        for y in range(h):
            for x in range(w):
                if not mask[k, y, x]:
                    continue
                n += 1
                l1 += abs(d[k, y, x] - gt[k, y, x])
                if x + 1 < w and mask[k, y, x + 1]:
                    grad += abs((d[k, y, x + 1] - d[k, y, x]) - (gt[k, y, x + 1] - gt[k, y, x]))
                if y + 1 < h and mask[k, y + 1, x]:
                    grad += abs((d[k, y + 1, x] - d[k, y, x]) - (gt[k, y + 1, x] - gt[k, y, x]))
    return a * l1 / n + b * grad / n


def windowed_ssim(x, y, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Explicit double loop over every fully-inside window."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 3:
        x, y = x.mean(-1), y.mean(-1)
    g = np.exp(-((np.arange(size) - (size - 1) / 2) ** 2) / (2 * sigma**2))
    win = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = k1**2, k2**2
    vals = []
    for i in range(x.shape[0] - size + 1):
        for j in range(x.shape[1] - size + 1):
            a = x[i : i + size, j : j + size]
            b = y[i : i + size, j : j + size]
            ma, mb = (win * a).sum(), (win * b).sum()
            va = (win * (a - ma) ** 2).sum()
            vb = (win * (b - mb) ** 2).sum()
            cab = (win * (a - ma) * (b - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cab + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))
