"""Command-line interface: ``splatmaps <command> ...``."""

from __future__ import annotations

import json
import os
import re
from contextlib import contextmanager
from pathlib import Path

import click
import numpy as np

from . import data as data_mod
from .core import load_camera
from .gsmap import GaussianSet, export_ply, load_gsmap, merge, save_gsmap
from .metrics import depth_metrics, psnr, ssim

REPORT_KEYS = ("psnr", "ssim", "abs_rel", "sq_rel", "rmse")


@contextmanager
def _atomic(path):
    """Yield a temporary sibling path that replaces ``path`` only on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def parse_views(text: str) -> list[int]:
    """Parse ``"0,1,2"``, ``"4..15"`` or mixes like ``"0,4..6"`` (ranges inclusive)."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        m = re.fullmatch(r"(\d+)\s*(?:\.\.|-)\s*(\d+)", part)
        if m:
            lo, hi = int(m.group(1)), int(m.group(2))
            if hi < lo:
                raise click.BadParameter(f"empty range {part!r}")
            out.extend(range(lo, hi + 1))
        elif part.isdigit():
            out.append(int(part))
        else:
            raise click.BadParameter(f"cannot parse view list {text!r}")
    if not out:
        raise click.BadParameter("no views given")
    return out


def _scene_dir(data: Path, scene: int | None) -> Path:
    """Accept either a scene directory or a dataset root plus scene id."""
    if any(data.glob("view_*.cam")):
        return data
    d = data / f"scene_{scene or 0}"
    if not d.is_dir():
        raise click.ClickException(f"no scene directory at {d}")
    return d


def _load_scene(data: Path, scene: int | None):
    try:
        return data_mod.load_bundle(_scene_dir(data, scene))
    except FileNotFoundError as e:
        raise click.ClickException(str(e)) from e


def _gaussians(gsmap):
    return merge([gsmap]) if gsmap.mask.any() else GaussianSet.empty()


def _jsonl_writer(path: Path, append: bool = False):
    path.parent.mkdir(parents=True, exist_ok=True)
    fh = open(path, "a" if append else "w")

    def emit(rec):
        fh.write(json.dumps(rec) + "\n")
        fh.flush()

    return fh, emit


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Gaussian-map reconstruction toolkit."""
    if verbose:
        import logging

        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")


@main.command("gen-data")
@click.option("--scenes", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--views", type=click.IntRange(min=4), default=None, help="Views per scene (train: default 8; eval16: 16).")
@click.option("--res", type=click.IntRange(min=8), default=data_mod.DEFAULT_RES, show_default=True)
@click.option("--protocol", type=click.Choice(["train", "eval16"]), default="train", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True)
def gen_data(scenes, views, res, protocol, seed, out):
    """Render procedural scenes with the analytic oracle."""
    if protocol == "eval16":
        if views not in (None, 16):
            raise click.BadParameter("eval16 always renders 16 views", param_hint="--views")
        views = 16
    views = views or 8
    data_mod.make_dataset(out, scenes, views, protocol, res, seed)
    manifest = json.loads((out / "manifest.json").read_text())
    click.echo(
        f"wrote {manifest['scenes']} scene(s) x {manifest['views']} views at "
        f"{manifest['res']}x{manifest['res']} ({manifest['protocol']}) to {out}"
    )


@main.command()
@click.option("--data", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--scene", type=int, default=0, show_default=True)
@click.option("--views", default="0,1,2,3", show_default=True, help="Input views.")
@click.option("--supervision", default=None, help="Supervision views (default: the input views).")
@click.option("--iters", type=click.IntRange(min=0), default=2000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--log", "log_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Loss log, one JSON object per line (default: <out>.log.jsonl).")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
def fit(data, scene, views, supervision, iters, seed, log_path, out):
    """Optimize GS-maps for one scene directly through the rasterizer."""
    from .fit import FitConfig, fit_scene

    bundle = _load_scene(data, scene)
    views = parse_views(views)
    sup = parse_views(supervision) if supervision else None
    missing = [v for v in views + (sup or []) if v >= bundle.n_views]
    if missing:
        raise click.ClickException(f"views {missing} missing from scene with {bundle.n_views} views")
    log_path = log_path or out.with_name(out.name + ".log.jsonl")
    fh, emit = _jsonl_writer(log_path)
    with fh:
        res = fit_scene(bundle, views, sup, FitConfig(iters=iters, seed=seed), emit=emit)
    with _atomic(out) as tmp:
        save_gsmap(res.gsmap, tmp)
    final = res.log[-1]["psnr"] if res.log else float("nan")
    click.echo(f"fit {int(res.gsmap.mask.sum())} Gaussians, last-iteration psnr {final:.2f} dB -> {out}")


@main.command()
@click.option("--data", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--stage", type=click.Choice(["1", "2", "both"]), default="both", show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None)
@click.option("--resume", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="Checkpoint to continue from (required for --stage 2).")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--log", "log_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Per-epoch log, one JSON object per line (default: <out>.log.jsonl).")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
def train(data, stage, config_path, resume, seed, log_path, out):
    """Two-stage training of the GS-map network."""
    from .net import Config, TrainState, load_config, load_model, save_model, train_two_stage

    model, state = None, None
    if resume is not None:
        model, cfg, st = load_model(resume)
        state = TrainState.from_dict(st)
        if config_path is not None:
            override = load_config(config_path)
            if override.model != cfg.model:
                raise click.ClickException("--config model section differs from the resumed checkpoint")
            cfg = override
    else:
        cfg = load_config(config_path) if config_path else Config()
    if seed is not None:
        cfg.train.seed = seed
    if stage == "2" and (state is None or not state.stage1_done):
        raise click.ClickException("stage 2 needs a stage-1 checkpoint; pass one with --resume")
    scene_dirs = sorted(
        (p for p in data.glob("scene_*") if p.is_dir()), key=lambda p: int(p.name.split("_")[1])
    ) or [data]
    bundles = [data_mod.load_bundle(p) for p in scene_dirs]
    log_path = log_path or out.with_name(out.name + ".log.jsonl")
    fh, emit = _jsonl_writer(log_path, append=resume is not None)
    with fh:
        model, state, history = train_two_stage(bundles, cfg, stage, model, state, emit)
    with _atomic(out) as tmp:
        save_model(tmp, model, cfg.to_dict(), state.to_dict())
    click.echo(f"trained {len(history)} epoch(s) on {len(bundles)} scene(s) -> {out}")


@main.command()
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--images", type=click.Path(exists=True, dir_okay=False, path_type=Path), multiple=True, required=True,
              help="Input images in view order; repeat the flag or list them after it.")
@click.argument("more_images", nargs=-1, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
def infer(ckpt, images, more_images, out):
    """Predict GS-maps from images alone.

    The alpha channel of RGBA inputs marks foreground pixels; images without
    alpha are treated as all foreground.
    """
    from .gsmap import GsMap
    from .net import load_model, predict_gsmap

    paths = list(images) + list(more_images)
    model, cfg, _ = load_model(ckpt)
    rgbs, masks = [], []
    for p in paths:
        rgb, alpha = data_mod.read_rgba(p)
        if rgb.shape[:2] != (cfg.model.img_size, cfg.model.img_size):
            raise click.ClickException(f"{p}: expected {cfg.model.img_size}x{cfg.model.img_size} image")
        rgbs.append(rgb)
        masks.append(alpha > 0.5)
    values = predict_gsmap(model, np.stack(rgbs))
    with _atomic(out) as tmp:
        save_gsmap(GsMap(values, np.stack(masks)), tmp)
    click.echo(f"predicted {len(paths)} GS-map(s) -> {out}")


@main.command()
@click.option("--gsmap", "gsmap_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--camera", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--depth-out", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
def render(gsmap_path, camera, depth_out, out):
    """Rasterize a GS-map file under a camera to an RGBA PNG."""
    from .splat import rasterize

    res = rasterize(_gaussians(load_gsmap(gsmap_path)), load_camera(camera))
    with _atomic(out) as tmp:
        data_mod.write_rgba(tmp, res.rgb, res.alpha)
    if depth_out is not None:
        with _atomic(depth_out) as tmp:
            data_mod.write_depth(tmp, res.depth)
    click.echo(f"rendered {res.rgb.shape[1]}x{res.rgb.shape[0]} -> {out}")


def evaluate_views(gsmap, bundle, views) -> dict:
    """Per-view and mean metrics of a GS-map against a scene's ground truth."""
    from .splat import rasterize

    gs = _gaussians(gsmap)
    per_view = {}
    for v in views:
        res = rasterize(gs, bundle.cameras[v])
        m = {"psnr": psnr(res.rgb, bundle.rgb[v]), "ssim": ssim(res.rgb, bundle.rgb[v])}
        m.update(depth_metrics(res.depth, bundle.depth[v], bundle.alpha[v]))
        per_view[str(v)] = m
    mean = {k: float(np.mean([m[k] for m in per_view.values()])) for k in REPORT_KEYS}
    return {"views": per_view, "mean": mean}


@main.command("eval")
@click.option("--gsmap", "gsmap_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--data", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--scene", type=int, default=0, show_default=True)
@click.option("--views", default="4..15", show_default=True)
@click.option("--report", type=click.Path(dir_okay=False, path_type=Path), required=True)
def eval_cmd(gsmap_path, data, scene, views, report):
    """Score a GS-map on held-out views and write a JSON report."""
    bundle = _load_scene(data, scene)
    views = parse_views(views)
    missing = [v for v in views if v >= bundle.n_views]
    if missing:
        raise click.ClickException(f"views {missing} missing from scene with {bundle.n_views} views")
    rep = evaluate_views(load_gsmap(gsmap_path), bundle, views)
    with _atomic(report) as tmp:
        tmp.write_text(json.dumps(rep, indent=2) + "\n")
    m = rep["mean"]
    click.echo(" ".join(f"{k}={m[k]:.4f}" for k in REPORT_KEYS))


@main.command()
@click.option("--gsmap", "gsmap_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
def export(gsmap_path, out):
    """Merge a GS-map file into a binary PLY for 3DGS viewers."""
    gs = merge([load_gsmap(gsmap_path)])
    with _atomic(out) as tmp:
        export_ply(gs, tmp)
    click.echo(f"exported {len(gs)} Gaussians -> {out}")


if __name__ == "__main__":
    main()
