"""Training losses: Chamfer, depth (L1 + gradient), RGB and alpha.

The loss functions accept numpy arrays or torch tensors. With numpy inputs
they return a Python float; with tensors they return a differentiable
0-d tensor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from scipy.spatial import cKDTree

from .core import DepthMap, PointCloud, PointMap

PerceptualHook = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class LossWeights:
    depth_l1: float = 20.0
    depth_grad: float = 20.0
    perceptual: float = 0.05

    def __post_init__(self):
        if min(self.depth_l1, self.depth_grad, self.perceptual) < 0:
            raise ValueError("loss weights must be non-negative")


def _tensors(*xs):
    is_np = not any(isinstance(x, torch.Tensor) for x in xs)
    out = [x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64)) for x in xs]
    return is_np, out


def _finish(is_np, value):
    return float(value) if is_np else value


def sample_pointmap(pm: PointMap, k: int, seed: int) -> PointCloud:
    """Draw ``k`` valid points uniformly with replacement."""
    values = np.asarray(pm.values).reshape(-1, 3)
    valid = np.flatnonzero(np.asarray(pm.mask).reshape(-1))
    if len(valid) == 0:
        raise ValueError("point map has no valid pixels to sample")
    rng = np.random.default_rng(seed)
    return PointCloud(values[valid[rng.integers(len(valid), size=k)]])


def nearest_indices(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Index into ``dst`` of the nearest neighbour of every ``src`` point."""
    # Clouds sampled with replacement repeat points; duplicate queries are
    # slow when far from the tree, so query each distinct point once.
    dst_u, dst_first = np.unique(dst, axis=0, return_index=True)
    src_u, src_inv = np.unique(src, axis=0, return_inverse=True)
    idx = cKDTree(dst_u).query(src_u, k=1)[1]
    return dst_first[idx][src_inv.reshape(-1)]


def chamfer(s, t):
    """Symmetric mean squared nearest-neighbour distance between two clouds.

    Neighbours are found with a k-d tree; squared distances are then
    recomputed exactly, so tensor inputs get exact gradients.
    """
    s = s.points if isinstance(s, PointCloud) else s
    t = t.points if isinstance(t, PointCloud) else t
    if len(s) == 0 or len(t) == 0:
        raise ValueError("chamfer distance needs two non-empty clouds")
    is_np, (s, t) = _tensors(s, t)
    s_np = s.detach().cpu().double().numpy()
    t_np = t.detach().cpu().double().numpy()
    i_st = torch.from_numpy(nearest_indices(s_np, t_np))
    i_ts = torch.from_numpy(nearest_indices(t_np, s_np))
    d_st = ((s - t[i_st]) ** 2).sum(-1).mean()
    d_ts = ((t - s[i_ts]) ** 2).sum(-1).mean()
    return _finish(is_np, d_st + d_ts)


def _forward_diff(x, valid, axis):
    """Forward difference along ``axis`` and where it is defined."""
    n = x.shape[axis]
    lo = [slice(None)] * x.ndim
    hi = [slice(None)] * x.ndim
    lo[axis], hi[axis] = slice(0, n - 1), slice(1, n)
    diff = torch.zeros_like(x)
    ok = torch.zeros_like(valid)
    diff[tuple(lo)] = x[tuple(hi)] - x[tuple(lo)]
    ok[tuple(lo)] = valid[tuple(hi)] & valid[tuple(lo)]
    return diff, ok


def depth_loss(d: DepthMap, gt: DepthMap, w: LossWeights | None = None):
    """``a * mean|D - D'| + b * mean(|dx D - dx D'| + |dy D - dy D'|)``.

    Means run over pixels valid in both maps (across all views when the
    maps are stacked). Forward differences are used; a difference touching
    an invalid pixel or the last row/column counts as 0.
    """
    w = w or LossWeights()
    is_np, (dv, gv) = _tensors(d.values, gt.values)
    valid = torch.as_tensor(np.asarray(d.mask) if not isinstance(d.mask, torch.Tensor) else d.mask, dtype=torch.bool)
    valid = valid & torch.as_tensor(
        np.asarray(gt.mask) if not isinstance(gt.mask, torch.Tensor) else gt.mask, dtype=torch.bool
    )
    n = valid.sum()
    if n == 0:
        raise ValueError("depth maps share no valid pixels")
    dv = torch.where(valid, dv, torch.zeros_like(dv))
    gv = torch.where(valid, gv, torch.zeros_like(gv))
    l1 = (dv - gv).abs()[valid].sum() / n
    grad = torch.zeros((), dtype=dv.dtype)
    for axis in (-1, -2):
        dd, ok = _forward_diff(dv, valid, axis)
        dg, _ = _forward_diff(gv, valid, axis)
        grad = grad + (dd - dg).abs()[ok].sum()
    return _finish(is_np, w.depth_l1 * l1 + w.depth_grad * grad / n)


def mse(a, b):
    is_np, (a, b) = _tensors(a, b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return _finish(is_np, ((a - b) ** 2).mean())


def rgb_loss(render, gt, perceptual: PerceptualHook | None = None, w: LossWeights | None = None):
    """MSE plus a weighted perceptual term; without a hook that term is 0."""
    w = w or LossWeights()
    is_np, (render, gt) = _tensors(render, gt)
    loss = mse(render, gt)
    if perceptual is not None:
        loss = loss + w.perceptual * perceptual(render, gt)
    return _finish(is_np, loss)


def alpha_loss(a, gt):
    return mse(a, gt)
