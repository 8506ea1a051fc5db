"""Two-stage training: geometry first, then appearance through the rasterizer."""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from ..core import Camera, DepthMap, camera_rays
from ..data import SceneBundle
from ..losses import alpha_loss, chamfer, depth_loss, rgb_loss
from ..metrics import psnr
from ..splat.autograd import render_rows
from .config import Config
from .model import GsMapNet, default_pairing

log = logging.getLogger(__name__)

MASK_THRESHOLD = 0.5
MATCH_DEPTH_TOL = 0.03
GRAD_CLIP = 10.0


class TrainingDivergedError(RuntimeError):
    """Raised when a loss turns NaN or infinite."""


@dataclass
class SceneTensors:
    images: torch.Tensor  # (n, H, W, 3) input views
    mask: torch.Tensor  # (n, H, W) bool
    depth: torch.Tensor  # (n, H, W), 0 where invalid
    depth_mask: torch.Tensor
    rot: torch.Tensor  # (n, 3, 3)
    trans: torch.Tensor  # (n, 3)
    surface: torch.Tensor  # (M, 3)
    sup_rgb: torch.Tensor  # (V, H, W, 3)
    sup_alpha: torch.Tensor  # (V, H, W)
    sup_cams: list[Camera]
    matches: list[tuple[int, int, torch.Tensor, torch.Tensor]] = field(default_factory=list)


def correspondences(bundle: SceneBundle, a: int, b: int, tol: float = MATCH_DEPTH_TOL):
    """Flat pixel indices ``(ia, ib)`` of pixels in view ``a`` that are seen in view ``b``.

    A pixel matches when its back-projected surface point lands inside
    view ``b`` on a pixel whose ground-truth depth agrees within ``tol``.
    """
    ca, cb = bundle.cameras[a], bundle.cameras[b]
    da = bundle.depth[a]
    valid = np.isfinite(da) & (bundle.alpha[a] > MASK_THRESHOLD)
    origin, dirs = camera_rays(ca)
    pts = origin + dirs * np.where(valid, da, 0.0)[..., None]
    p = pts[valid] @ cb.rotation.T + cb.translation
    u = np.rint(cb.fx * p[:, 0] / p[:, 2] + cb.cx).astype(np.int64)
    v = np.rint(cb.fy * p[:, 1] / p[:, 2] + cb.cy).astype(np.int64)
    inside = (p[:, 2] > 0) & (u >= 0) & (u < cb.width) & (v >= 0) & (v < cb.height)
    ia = np.flatnonzero(valid.reshape(-1))[inside]
    u, v, z = u[inside], v[inside], p[inside, 2]
    db = bundle.depth[b][v, u]
    ok = np.isfinite(db) & (np.abs(db - z) < tol)
    return ia[ok], (v * cb.width + u)[ok]


def prepare_scene(bundle: SceneBundle, n_input: int, n_supervision: int) -> SceneTensors:
    if bundle.n_views < n_input:
        raise ValueError(f"scene has {bundle.n_views} views, {n_input} input views requested")
    f32 = lambda a: torch.as_tensor(np.asarray(a), dtype=torch.float32)  # noqa: E731
    idx = slice(0, n_input)
    depth = bundle.depth[idx]
    dmask = np.isfinite(depth) & (bundle.alpha[idx] > MASK_THRESHOLD)
    cams = bundle.cameras[:n_input]
    n_sup = min(n_supervision, bundle.n_views)
    st = SceneTensors(
        images=f32(bundle.rgb[idx]),
        mask=torch.as_tensor(bundle.alpha[idx] > MASK_THRESHOLD),
        depth=f32(np.where(dmask, depth, 0.0)),
        depth_mask=torch.as_tensor(dmask),
        rot=f32(np.stack([c.rotation for c in cams])),
        trans=f32(np.stack([c.translation for c in cams])),
        surface=f32(bundle.surface),
        sup_rgb=f32(bundle.rgb[:n_sup]),
        sup_alpha=f32(bundle.alpha[:n_sup]),
        sup_cams=list(bundle.cameras[:n_sup]),
    )
    for a, b in default_pairing(n_input):
        ia, ib = correspondences(bundle, a, b)
        if len(ia):
            st.matches.append((a, b, torch.from_numpy(ia), torch.from_numpy(ib)))
    return st


def match_loss(match: torch.Tensor, st: SceneTensors, n_pairs: int, temperature: float, gen: torch.Generator):
    """Symmetric InfoNCE over sampled ground-truth correspondences."""
    flat = match.reshape(match.shape[0], -1, match.shape[-1])
    losses = []
    for a, b, ia, ib in st.matches:
        k = min(n_pairs, len(ia))
        pick = torch.randperm(len(ia), generator=gen)[:k]
        fa, fb = flat[a, ia[pick]], flat[b, ib[pick]]
        logits = fa @ fb.T / temperature
        target = torch.arange(k)
        losses.append(0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target)))
    if not losses:
        return match.sum() * 0.0
    return torch.stack(losses).mean()


def point_depths(points: torch.Tensor, st: SceneTensors) -> torch.Tensor:
    """Camera-space z of per-view world point maps ``(n, H, W, 3)``."""
    cam = torch.einsum("nhwj,nij->nhwi", points, st.rot) + st.trans[:, None, None, :]
    return cam[..., 2]


def geometry_losses(model: GsMapNet, st: SceneTensors, cfg: Config, gen: torch.Generator) -> dict:
    out = model(st.images, geometry_only=True)
    pts = out["points_raw"].clamp(-1.0, 1.0)
    valid = pts[st.mask]
    pick = torch.randint(len(valid), (cfg.train.chamfer_points,), generator=gen)
    l_ch = chamfer(valid[pick], st.surface)
    z = point_depths(pts, st)
    l_d = depth_loss(DepthMap(z, st.mask), DepthMap(st.depth, st.depth_mask), cfg.loss)
    l_m = match_loss(out["match"], st, cfg.train.match_pairs, cfg.train.match_temperature, gen)
    total = l_ch + l_d + cfg.train.match_weight * l_m
    return {"loss": total, "chamfer": l_ch, "depth": l_d, "match": l_m}


def predicted_rows(model: GsMapNet, st: SceneTensors) -> torch.Tensor:
    """Activated Gaussians of the masked input pixels, ``(N, 14)``."""
    return model(st.images)["gsmap"][st.mask]


def appearance_losses(model: GsMapNet, st: SceneTensors, cfg: Config, views) -> dict:
    rows = predicted_rows(model, st)
    l_rgb, l_a = 0.0, 0.0
    for v in views:
        rgb, alpha, _ = render_rows(rows, st.sup_cams[v])
        l_rgb = l_rgb + rgb_loss(rgb, st.sup_rgb[v], w=cfg.loss)
        l_a = l_a + alpha_loss(alpha, st.sup_alpha[v])
    l_rgb, l_a = l_rgb / len(views), l_a / len(views)
    return {"loss": l_rgb + l_a, "rgb": l_rgb, "alpha": l_a}


@torch.no_grad()
def supervision_psnr(model: GsMapNet, st: SceneTensors) -> float:
    """Mean PSNR over all supervision views of a scene."""
    rows = predicted_rows(model, st)
    vals = []
    for v, cam in enumerate(st.sup_cams):
        rgb, _, _ = render_rows(rows, cam)
        vals.append(psnr(rgb.numpy(), st.sup_rgb[v].numpy()))
    return float(np.mean(vals))


def _check_finite(parts: dict, stage: int, step: int) -> None:
    if not torch.isfinite(parts["loss"]):
        detail = ", ".join(f"{k}={float(v):.4g}" for k, v in parts.items())
        raise TrainingDivergedError(f"non-finite loss in stage {stage} at step {step}: {detail}")


def _scheduler(opt, cfg: Config, done_steps: int):
    period = max(1, cfg.train.restart_epochs * cfg.train.steps_per_epoch)
    sched = torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(opt, T_0=period)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        for _ in range(done_steps):
            sched.step()
    return sched


def _params(modules):
    return [p for m in modules for p in m.parameters()]


def _optimizer(groups, cfg: Config):
    t = cfg.train
    return torch.optim.AdamW(groups, lr=t.lr, weight_decay=t.weight_decay, betas=t.betas)


@dataclass
class TrainState:
    epoch: int = 0
    stage1_step: int = 0
    stage2_step: int = 0
    stage1_done: bool = False
    stage2_done: bool = False
    first_chamfer: float | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainState":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class _EpochMeter:
    def __init__(self):
        self.sums: dict[str, float] = {}
        self.count = 0

    def add(self, parts: dict):
        for k, v in parts.items():
            self.sums[k] = self.sums.get(k, 0.0) + float(v)
        self.count += 1

    def means(self) -> dict:
        return {k: v / self.count for k, v in self.sums.items()}


def _run_stage(
    stage: int,
    model: GsMapNet,
    scenes: list[SceneTensors],
    cfg: Config,
    state: TrainState,
    emit: Callable[[dict], None],
) -> None:
    t = cfg.train
    if stage == 1:
        groups = [{"params": _params(model.geometry_modules())}]
        total, done = t.stage1_steps, state.stage1_step
    else:
        groups = [
            {"params": _params(model.appearance_modules())},
            {"params": _params(model.geometry_modules()), "lr": t.lr * t.backbone_lr_scale},
        ]
        total, done = t.stage2_steps, state.stage2_step
    opt = _optimizer(groups, cfg)
    sched = _scheduler(opt, cfg, done)
    gen = torch.Generator().manual_seed(t.seed * 1009 + stage * 7919 + done)
    rng = np.random.default_rng([t.seed, stage, done])
    meter = _EpochMeter()
    t0 = time.perf_counter()
    model.train()
    step = done
    while step < total:
        st = scenes[step % len(scenes)]
        if stage == 1:
            parts = geometry_losses(model, st, cfg, gen)
        else:
            k = min(t.render_views_per_step, len(st.sup_cams))
            views = rng.choice(len(st.sup_cams), size=k, replace=False)
            parts = appearance_losses(model, st, cfg, views)
        _check_finite(parts, stage, step)
        opt.zero_grad(set_to_none=True)
        parts["loss"].backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), GRAD_CLIP)
        opt.step()
        sched.step()
        step += 1
        meter.add({k: v.detach() for k, v in parts.items()})

        stop = False
        if step % t.steps_per_epoch == 0 or step == total:
            state.epoch += 1
            rec = {"stage": stage, "epoch": state.epoch, "step": step, **meter.means()}
            rec["lr"] = opt.param_groups[0]["lr"]
            rec["elapsed"] = time.perf_counter() - t0
            if stage == 1:
                if state.first_chamfer is None:
                    state.first_chamfer = rec["chamfer"]
                target = t.stage1_target_chamfer_ratio
                stop = target is not None and rec["chamfer"] <= target * state.first_chamfer
            else:
                rec["psnr"] = float(np.mean([supervision_psnr(model, s) for s in scenes]))
                target = t.stage2_target_psnr
                stop = target is not None and rec["psnr"] >= target
            emit(rec)
            meter = _EpochMeter()
        if stage == 1:
            state.stage1_step = step
        else:
            state.stage2_step = step
        if stop:
            break
    if stage == 1:
        state.stage1_done = True
    else:
        state.stage2_done = True
    model.eval()


def train_two_stage(
    bundles: list[SceneBundle],
    cfg: Config | None = None,
    stage: str = "both",
    model: GsMapNet | None = None,
    state: TrainState | None = None,
    emit: Callable[[dict], None] | None = None,
) -> tuple[GsMapNet, TrainState, list[dict]]:
    """Train on ``bundles``; the first ``n_input`` views of each scene are inputs.

    ``stage`` is ``"1"``, ``"2"`` or ``"both"``. Stage 2 needs a model whose
    stage 1 has completed. Passing a previous ``state`` resumes: finished
    steps are skipped and epoch numbering continues. Per-epoch records go to
    ``emit`` and are also returned.
    """
    cfg = cfg or Config()
    if stage not in ("1", "2", "both"):
        raise ValueError(f"stage must be '1', '2' or 'both', got {stage!r}")
    if not bundles:
        raise ValueError("no training scenes")
    state = state or TrainState()
    if stage == "2" and (model is None or not state.stage1_done):
        raise ValueError("stage 2 needs a model with completed stage-1 training")
    torch.manual_seed(cfg.train.seed)
    model = model or GsMapNet(cfg.model)
    scenes = [prepare_scene(b, cfg.train.n_input, cfg.train.n_supervision) for b in bundles]
    history: list[dict] = []

    def record(rec):
        history.append(rec)
        log.info("%s", rec)
        if emit is not None:
            emit(rec)

    if stage in ("1", "both"):
        _run_stage(1, model, scenes, cfg, state, record)
    if stage in ("2", "both"):
        _run_stage(2, model, scenes, cfg, state, record)
    return model, state, history


def predict_gsmap(model: GsMapNet, images: np.ndarray) -> np.ndarray:
    """Activated ``(n, H, W, 14)`` GS-maps for ``(n, H, W, 3)`` images (no cameras)."""
    model.eval()
    with torch.no_grad():
        out = model(torch.as_tensor(np.asarray(images), dtype=torch.float32))
    return out["gsmap"].double().numpy()

