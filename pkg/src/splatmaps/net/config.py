"""Model / training configuration and its JSON round trip."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..losses import LossWeights


@dataclass
class ModelConfig:
    img_size: int = 64
    patch_size: int = 8
    dim: int = 64
    enc_depth: int = 6
    dec_depth: int = 12
    heads: int = 4
    taps: tuple[int, ...] = (3, 6, 9, 12)
    match_dim: int = 16
    head_width: int = 32
    refine_width: int = 16
    mlp_ratio: float = 2.0

    def __post_init__(self):
        self.taps = tuple(int(t) for t in self.taps)
        if len(self.taps) != 4:
            raise ValueError("the prediction heads fuse exactly four decoder taps")
        if max(self.taps) > self.dec_depth or min(self.taps) < 1:
            raise ValueError(f"taps {self.taps} must lie in 1..{self.dec_depth}")
        if self.dim % self.heads:
            raise ValueError("token dim must be divisible by the number of heads")
        if self.img_size % self.patch_size:
            raise ValueError("image size must be a multiple of the patch size")
        if (self.img_size // self.patch_size) % 4:
            raise ValueError("patch grid must be divisible by 4 for the four-stage heads")

    @property
    def grid(self) -> int:
        return self.img_size // self.patch_size


@dataclass
class TrainConfig:
    lr: float = 4e-4
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    restart_epochs: int = 20
    steps_per_epoch: int = 50
    stage1_steps: int = 2000
    stage2_steps: int = 5000
    backbone_lr_scale: float = 0.1
    n_input: int = 4
    n_supervision: int = 8
    render_views_per_step: int = 2
    chamfer_points: int = 10_000
    match_weight: float = 0.1
    match_pairs: int = 256
    match_temperature: float = 0.1
    # Optional early exits for smoke runs; None trains for the full budget.
    stage1_target_chamfer_ratio: float | None = None
    stage2_target_psnr: float | None = None
    eval_every: int = 50
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    def to_dict(self) -> dict:
        return {"model": asdict(self.model), "train": asdict(self.train), "loss": asdict(self.loss)}

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        def build(kind, values):
            known = {f.name for f in fields(kind)}
            unknown = set(values) - known
            if unknown:
                raise ValueError(f"unknown {kind.__name__} fields: {sorted(unknown)}")
            return kind(**values)

        return cls(
            build(ModelConfig, d.get("model", {})),
            build(TrainConfig, d.get("train", {})),
            build(LossWeights, d.get("loss", {})),
        )


def load_config(path) -> Config:
    return Config.from_dict(json.loads(Path(path).read_text()))


def save_config(cfg: Config, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
