"""Multi-view stereo transformer that predicts per-pixel Gaussian maps.

Pipeline: a weight-shared patch encoder tokenizes every view; pairs of views
run through a twinned cross-attention decoder whose per-layer outputs are
kept; four tapped layers are fused across all views with global
self-attention and decoded by two dense heads (positions and appearance); a
matching head produces per-pixel descriptors; a U-Net refines the combined
maps. Cameras never enter the forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..gsmap import activate_tensor
from .config import ModelConfig
from .layers import (
    DecoderBlock,
    EncoderBlock,
    FeatureFusionBlock,
    GlobalAttentionBlock,
    Mlp,
    MultiViewAttention,
    ResBlock,
)


class PairingError(ValueError):
    """Views cannot be grouped into stereo pairs."""


@dataclass
class TokenGrid:
    tokens: torch.Tensor  # (n_views, h*w, d)
    h: int
    w: int
    patch: int

    @property
    def n_views(self) -> int:
        return self.tokens.shape[0]


def default_pairing(n_views: int) -> list[tuple[int, int]]:
    """Consecutive disjoint pairs ``(0, 1), (2, 3), ...``."""
    if n_views < 2 or n_views % 2:
        raise PairingError(f"cannot pair {n_views} views; an even count >= 2 is required")
    return [(i, i + 1) for i in range(0, n_views, 2)]


def _partner_index(n_views: int, pairing) -> list[int]:
    pairing = default_pairing(n_views) if pairing is None else [tuple(p) for p in pairing]
    partner = [-1] * n_views
    for a, b in pairing:
        if a == b or not (0 <= a < n_views and 0 <= b < n_views) or partner[a] >= 0 or partner[b] >= 0:
            raise PairingError(f"invalid pairing {pairing} for {n_views} views")
        partner[a], partner[b] = b, a
    if min(partner) < 0:
        raise PairingError(f"pairing {pairing} leaves views unpaired")
    return partner


class PatchEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch = cfg.patch_size
        self.embed = nn.Conv2d(3, cfg.dim, cfg.patch_size, stride=cfg.patch_size)
        self.pos = nn.Parameter(torch.randn(1, cfg.grid * cfg.grid, cfg.dim) * 0.02)
        self.blocks = nn.ModuleList(EncoderBlock(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.enc_depth))
        self.norm = nn.LayerNorm(cfg.dim)

    def forward(self, images: torch.Tensor) -> TokenGrid:
        """``images``: ``(n, H, W, 3)`` in [0, 1]."""
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ValueError(f"expected (n, H, W, 3) images, got {tuple(images.shape)}")
        n, hh, ww, _ = images.shape
        if hh % self.patch or ww % self.patch:
            raise ValueError(f"image size {hh}x{ww} is not divisible by patch size {self.patch}")
        h, w = hh // self.patch, ww // self.patch
        if h * w != self.pos.shape[1]:
            raise ValueError(f"model expects {self.pos.shape[1]} patches, got {h * w}")
        x = self.embed(images.permute(0, 3, 1, 2) * 2.0 - 1.0)
        x = x.flatten(2).transpose(1, 2) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return TokenGrid(self.norm(x), h, w, self.patch)


class PairDecoder(nn.Module):
    """Twin decoders with shared weights; both streams step together."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(DecoderBlock(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.dec_depth))

    def forward(self, tg: TokenGrid, pairing=None) -> list[TokenGrid]:
        partner = _partner_index(tg.n_views, pairing)
        x = tg.tokens
        layers = []
        for blk in self.blocks:
            x = blk(x, x[partner])
            layers.append(TokenGrid(x, tg.h, tg.w, tg.patch))
        return layers


class GlobalFusion(nn.Module):
    """Per-tap residual self-attention over the tokens of all views at once."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(GlobalAttentionBlock(cfg.dim, cfg.heads) for _ in cfg.taps)

    def forward(self, taps: list[torch.Tensor]) -> list[torch.Tensor]:
        out = []
        for blk, t in zip(self.blocks, taps):
            n, m, d = t.shape
            out.append(blk(t.reshape(1, n * m, d)).reshape(n, m, d))
        return out


class DenseHead(nn.Module):
    """Four-tap dense decoder: native output at half resolution, then upsampled.

    Taps are projected to a common width and resampled to 1/4, 1/8, 1/16 and
    1/32 of the image; four fusion blocks merge them coarse to fine, each
    doubling resolution, which lands at 1/2. A three-layer conv stack maps to
    ``out_ch`` channels.
    """

    def __init__(self, cfg: ModelConfig, out_ch: int):
        super().__init__()
        d, c = cfg.dim, cfg.head_width
        self.proj = nn.ModuleList(nn.Conv2d(d, c, 1) for _ in range(4))
        # patch grid is 1/8 of the image at p=8; resample to 1/4, 1/8, 1/16, 1/32
        self.resample = nn.ModuleList(
            [
                nn.ConvTranspose2d(c, c, 2, stride=2),
                nn.Identity(),
                nn.Conv2d(c, c, 3, stride=2, padding=1),
                nn.Sequential(nn.Conv2d(c, c, 3, stride=2, padding=1), nn.Conv2d(c, c, 3, stride=2, padding=1)),
            ]
        )
        self.fusion = nn.ModuleList(FeatureFusionBlock(c) for _ in range(4))
        self.out = nn.Sequential(
            nn.Conv2d(c, c // 2, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(c // 2, 16, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(16, out_ch, 1),
        )
        self.patch = cfg.patch_size

    def forward(self, taps: list[torch.Tensor], h: int, w: int):
        """Returns ``(full, half)``: ``(n, out, H, W)`` and ``(n, out, H/2, W/2)``."""
        feats = []
        for t, proj, res in zip(taps, self.proj, self.resample):
            n, _, d = t.shape
            x = t.transpose(1, 2).reshape(n, d, h, w)
            feats.append(res(proj(x)))
        x = self.fusion[3](feats[3])
        for i in (2, 1, 0):
            x = self.fusion[i](x, feats[i])
        hh, ww = h * self.patch, w * self.patch
        if x.shape[-2:] != (hh // 2, ww // 2):
            x = F.interpolate(x, size=(hh // 2, ww // 2), mode="bilinear", align_corners=False)
        half = self.out(x)
        full = F.interpolate(half, size=(hh, ww), mode="bilinear", align_corners=False)
        return full, half


class MatchHead(nn.Module):
    """Per-pixel L2-normalized descriptors from encoder and final decoder tokens."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch = cfg.patch_size
        self.dim = cfg.match_dim
        self.mlp = Mlp(2 * cfg.dim, 2 * cfg.dim, cfg.patch_size**2 * cfg.match_dim)

    def forward(self, enc: TokenGrid, last: TokenGrid) -> torch.Tensor:
        """Returns ``(n, H, W, d_m)``."""
        x = self.mlp(torch.cat([enc.tokens, last.tokens], dim=-1))
        n = x.shape[0]
        x = x.transpose(1, 2).reshape(n, -1, enc.h, enc.w)
        x = F.pixel_shuffle(x, self.patch)
        return F.normalize(x, dim=1).permute(0, 2, 3, 1)


class RefineNet(nn.Module):
    """Residual U-Net over GS-map + match features + RGB, with cross-view attention at depth."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.refine_width
        cin = 14 + cfg.match_dim + 3
        self.inp = nn.Conv2d(cin, c, 3, padding=1)
        self.enc0 = ResBlock(c, c)
        self.down1 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.enc1 = ResBlock(2 * c, 2 * c)
        self.down2 = nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1)
        self.enc2 = ResBlock(2 * c, 2 * c)
        self.attn2 = MultiViewAttention(2 * c)
        self.down3 = nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1)
        self.mid = ResBlock(2 * c, 2 * c)
        self.attn3 = MultiViewAttention(2 * c)
        self.dec2 = ResBlock(4 * c, 2 * c)
        self.dec2_attn = MultiViewAttention(2 * c)
        self.dec1 = ResBlock(4 * c, 2 * c)
        self.dec0 = ResBlock(3 * c, c)
        self.final = nn.Conv2d(c, 14, 3, padding=1)
        nn.init.zeros_(self.final.weight)
        nn.init.zeros_(self.final.bias)

    @staticmethod
    def _up(x, like):
        return F.interpolate(x, size=like.shape[-2:], mode="bilinear", align_corners=False)

    def residual(self, gsmap, match, images):
        """14-channel residual for ``(n, H, W, *)`` inputs."""
        if not (gsmap.shape[:3] == match.shape[:3] == images.shape[:3]):
            raise ValueError(
                f"shape mismatch: gsmap {tuple(gsmap.shape)}, match {tuple(match.shape)}, "
                f"images {tuple(images.shape)}"
            )
        if gsmap.shape[1] % 8 or gsmap.shape[2] % 8:
            raise ValueError("refinement needs H and W divisible by 8")
        x = torch.cat([gsmap, match, images], dim=-1).permute(0, 3, 1, 2)
        s0 = self.enc0(self.inp(x))
        s1 = self.enc1(self.down1(s0))
        s2 = self.attn2(self.enc2(self.down2(s1)))
        s3 = self.attn3(self.mid(self.down3(s2)))
        y = self.dec2_attn(self.dec2(torch.cat([self._up(s3, s2), s2], 1)))
        y = self.dec1(torch.cat([self._up(y, s1), s1], 1))
        y = self.dec0(torch.cat([self._up(y, s0), s0], 1))
        return self.final(F.silu(y)).permute(0, 2, 3, 1)

    def forward(self, raw, gsmap, match, images):
        """Refined raw maps and their activation."""
        refined = raw + self.residual(gsmap, match, images)
        return refined, activate_tensor(refined)


class GsMapNet(nn.Module):
    """Pose-free predictor: ``n`` images in, ``n`` activated GS-maps out."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.encoder = PatchEncoder(cfg)
        self.decoder = PairDecoder(cfg)
        self.point_fusion = GlobalFusion(cfg)
        self.point_head = DenseHead(cfg, 3)
        self.match_head = MatchHead(cfg)
        self.gauss_fusion = GlobalFusion(cfg)
        self.gauss_head = DenseHead(cfg, 11)
        self.refine = RefineNet(cfg)
        # start from modest isotropic splats with a valid rotation
        with torch.no_grad():
            bias = self.gauss_head.out[-1].bias
            bias.zero_()
            bias[0:3] = -1.5
            bias[3] = 1.0

    def geometry_modules(self) -> list[nn.Module]:
        return [self.encoder, self.decoder, self.point_fusion, self.point_head, self.match_head]

    def appearance_modules(self) -> list[nn.Module]:
        return [self.gauss_fusion, self.gauss_head, self.refine]

    def taps(self, layers: list[TokenGrid]) -> list[torch.Tensor]:
        return [layers[i - 1].tokens for i in self.cfg.taps]

    def forward(self, images: torch.Tensor, pairing=None, geometry_only: bool = False) -> dict:
        """Run the network on ``(n, H, W, 3)`` images in [0, 1].

        Returns a dict with ``points_raw`` ``(n, H, W, 3)``, ``points_half``
        ``(n, H/2, W/2, 3)`` and ``match`` ``(n, H, W, d_m)``; unless
        ``geometry_only``, also ``raw`` (pre-refinement), ``refined_raw`` and
        ``gsmap`` (activated), each ``(n, H, W, 14)``.
        """
        tg = self.encoder(images)
        layers = self.decoder(tg, pairing)
        taps = self.taps(layers)
        pts, pts_half = self.point_head(self.point_fusion(taps), tg.h, tg.w)
        out = {
            "points_raw": pts.permute(0, 2, 3, 1),
            "points_half": pts_half.permute(0, 2, 3, 1),
            "match": self.match_head(tg, layers[-1]),
        }
        if geometry_only:
            return out
        app, _ = self.gauss_head(self.gauss_fusion(taps), tg.h, tg.w)
        raw = torch.cat([out["points_raw"], app.permute(0, 2, 3, 1)], dim=-1)
        refined, gsmap = self.refine(raw, activate_tensor(raw), out["match"], images)
        out.update(raw=raw, refined_raw=refined, gsmap=gsmap)
        return out
