"""Torch bridge so the rasterizer can sit inside an autograd graph."""

import numpy as np
import torch

from ..core import Camera
from ..gsmap import GaussianSet
from .raster import rasterize, rasterize_backward


class _Rasterize(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means, scales, quats, opacities, colors, cam):
        gs = GaussianSet(
            *(t.detach().cpu().double().numpy() for t in (means, scales, quats, opacities, colors))
        )
        out, state = rasterize(gs, cam, return_state=True)
        ctx.gs, ctx.cam, ctx.state = gs, cam, state
        dtype = means.dtype
        ctx.dtype = dtype
        depth = torch.from_numpy(out.depth).to(dtype)
        ctx.mark_non_differentiable(depth)
        return torch.from_numpy(out.rgb).to(dtype), torch.from_numpy(out.alpha).to(dtype), depth

    @staticmethod
    def backward(ctx, g_rgb, g_alpha, g_depth):
        grads = rasterize_backward(
            ctx.gs,
            ctx.cam,
            g_rgb.detach().double().numpy(),
            g_alpha.detach().double().numpy(),
            state=ctx.state,
        )
        as_t = lambda a: torch.from_numpy(np.ascontiguousarray(a)).to(ctx.dtype)  # noqa: E731
        return (
            as_t(grads.means),
            as_t(grads.scales),
            as_t(grads.quats),
            as_t(grads.opacities),
            as_t(grads.colors),
            None,
        )


def render(means, scales, quats, opacities, colors, cam: Camera):
    """Differentiable render returning ``(rgb, alpha, depth)`` tensors.

    Gradients flow to all five inputs through ``rgb`` and ``alpha``; depth is
    returned for evaluation only and carries no gradient.
    """
    return _Rasterize.apply(means, scales, quats, opacities, colors, cam)


def render_rows(rows: torch.Tensor, cam: Camera):
    """Render activated ``(N, 14)`` GS-map rows."""
    return render(rows[:, 0:3], rows[:, 3:6], rows[:, 6:10], rows[:, 10], rows[:, 11:14], cam)
