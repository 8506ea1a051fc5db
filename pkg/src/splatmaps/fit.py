"""Direct per-scene GS-map optimization through the differentiable rasterizer.

This bypasses the network: one Gaussian per masked input pixel is placed at
the back-projected ground-truth depth and all 14 raw channels are optimized
against rendering losses on the supervision views.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .core import DepthMap, depth_to_pointmap
from .data import SceneBundle
from .gsmap import COLOR, OPACITY, POS, ROT, SCALE, SCALE_COEF, GsMap, activate_tensor, inverse_softplus, logit
from .losses import alpha_loss, rgb_loss
from .metrics import psnr
from .splat.autograd import render_rows

MASK_THRESHOLD = 0.5
INIT_OPACITY = 0.5
INIT_SCALE_PX = 1.0  # initial splat radius in pixels of the source view
COLOR_CLIP = 0.02


@dataclass
class FitConfig:
    iters: int = 2000
    views_per_iter: int = 1
    log_every: int = 50
    seed: int = 0
    lr_pos: float = 1e-3
    lr_scale: float = 1e-2
    lr_rot: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2e-2


@dataclass
class FitResult:
    gsmap: GsMap
    raw: np.ndarray  # (n, H, W, 14)
    log: list[dict] = field(default_factory=list)


def initial_raw(bundle: SceneBundle, views) -> tuple[np.ndarray, np.ndarray]:
    """Raw maps and validity mask for the given input views.

    Positions come from back-projected ground-truth depth, scales from the
    one-pixel footprint at that depth, rotations are identity, opacity 0.5
    and colour is the observed pixel colour.
    """
    raws, masks = [], []
    for v in views:
        cam = bundle.cameras[v]
        depth = bundle.depth[v]
        mask = np.isfinite(depth) & (bundle.alpha[v] > MASK_THRESHOLD)
        pm = depth_to_pointmap(DepthMap(np.where(mask, depth, 0.0), mask), cam)
        raw = np.zeros(depth.shape + (14,))
        raw[..., ROT.start] = 1.0
        raw[..., POS] = pm.values
        footprint = INIT_SCALE_PX * np.where(mask, depth, 1.0) / cam.fx
        raw[..., SCALE] = inverse_softplus(footprint / SCALE_COEF)[..., None]
        raw[..., OPACITY] = logit(INIT_OPACITY)
        raw[..., COLOR] = logit(np.clip(bundle.rgb[v], COLOR_CLIP, 1 - COLOR_CLIP))
        raw[~mask] = 0.0
        raw[~mask, ROT.start] = 1.0
        raws.append(raw)
        masks.append(mask)
    return np.stack(raws), np.stack(masks)


def fit_scene(
    bundle: SceneBundle,
    views,
    supervision=None,
    cfg: FitConfig | None = None,
    emit: Callable[[dict], None] | None = None,
) -> FitResult:
    """Optimize GS-maps for input ``views`` against ``supervision`` views.

    Supervision defaults to the input views. Each iteration renders
    ``cfg.views_per_iter`` supervision views, cycling through a seeded
    shuffle, and minimizes ``MSE(rgb) + MSE(alpha)``. A record is appended
    to the log every ``log_every`` iterations and after the last one.
    """
    cfg = cfg or FitConfig()
    views = [int(v) for v in views]
    supervision = views if supervision is None else [int(v) for v in supervision]
    for v in views + supervision:
        if not 0 <= v < bundle.n_views:
            raise ValueError(f"view {v} not in scene with {bundle.n_views} views")
    raw0, mask = initial_raw(bundle, views)
    if not mask.any():
        raise ValueError("input views contain no foreground pixels")
    mask_t = torch.from_numpy(mask)
    groups = [
        (POS, cfg.lr_pos),
        (SCALE, cfg.lr_scale),
        (ROT, cfg.lr_rot),
        (OPACITY, cfg.lr_opacity),
        (COLOR, cfg.lr_color),
    ]
    rows0 = torch.from_numpy(raw0[mask])
    params = [rows0[:, sl].clone().requires_grad_(True) for sl, _ in groups]
    opt = torch.optim.Adam([{"params": [p], "lr": lr} for p, (_, lr) in zip(params, groups)])
    gt_rgb = {v: torch.from_numpy(np.asarray(bundle.rgb[v], dtype=np.float64)) for v in supervision}
    gt_a = {v: torch.from_numpy(np.asarray(bundle.alpha[v], dtype=np.float64)) for v in supervision}
    rng = np.random.default_rng(cfg.seed)
    order: list[int] = []
    history: list[dict] = []

    for it in range(1, cfg.iters + 1):
        batch = []
        for _ in range(min(cfg.views_per_iter, len(supervision))):
            if not order:
                order = list(rng.permutation(supervision))
            batch.append(int(order.pop()))
        rows = activate_tensor(torch.cat(params, dim=1))
        loss = 0.0
        scores = []
        for v in batch:
            rgb, alpha, _ = render_rows(rows, bundle.cameras[v])
            loss = loss + rgb_loss(rgb, gt_rgb[v]) + alpha_loss(alpha, gt_a[v])
            scores.append(psnr(rgb.detach().numpy(), gt_rgb[v].numpy()))
        loss = loss / len(batch)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite fit loss at iteration {it}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if it % cfg.log_every == 0 or it == cfg.iters:
            rec = {"iter": it, "loss": float(loss.detach()), "psnr": float(np.mean(scores)), "views": batch}
            history.append(rec)
            if emit is not None:
                emit(rec)

    raw = raw0.copy()
    with torch.no_grad():
        raw[mask] = torch.cat(params, dim=1).numpy()
        act = activate_tensor(torch.from_numpy(raw), mask_t).numpy()
    return FitResult(GsMap(act, mask), raw, history)
