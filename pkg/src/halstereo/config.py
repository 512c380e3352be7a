"""JSON configuration mirroring the model's default hyperparameters."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields


@dataclass
class Config:
    # training defaults
    batch_size: int = 8
    crop_h: int = 320
    crop_w: int = 720
    max_lr: float = 0.0002
    train_steps: int = 200000
    train_iters: int = 22
    eval_iters: int = 32
    weight_decay: float = 0.00001
    seed: int = 666
    # correlation / disparity-field layout
    corr_levels: int = 2
    corr_radius: int = 4
    disp_downsample_k: int = 2
    n_hidden_levels: int = 3
    max_disp: int = 192
    n_groups: int = 8
    # encoder layout
    encoder_scales: list = field(default_factory=lambda: [[64, 4], [128, 8], [192, 16]])
    blocks_per_scale: int = 2
    # decoder widths
    hidden_dim: int = 32
    context_dim: int = 32
    motion_dim: int = 32
    reg_hidden: int = 8
    # desk-scale toy run
    toy_h: int = 64
    toy_w: int = 128
    toy_max_disp: int = 32
    toy_train_samples: int = 200
    toy_val_samples: int = 20
    toy_steps: int = 300
    toy_batch: int = 2
    toy_lr: float = 0.002
    toy_train_iters: int = 6
    toy_encoder_scales: list = field(default_factory=lambda: [[32, 4], [48, 8], [64, 16]])
    toy_blocks_per_scale: int = 1

    def __post_init__(self):
        positive = ["batch_size", "crop_h", "crop_w", "train_steps", "train_iters",
                    "eval_iters", "corr_levels", "corr_radius", "n_hidden_levels",
                    "max_disp", "n_groups", "blocks_per_scale", "hidden_dim",
                    "context_dim", "motion_dim", "reg_hidden", "toy_h", "toy_w",
                    "toy_max_disp", "toy_train_samples", "toy_val_samples",
                    "toy_steps", "toy_batch", "toy_train_iters",
                    "toy_blocks_per_scale"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_lr <= 0 or self.toy_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.disp_downsample_k < 0:
            raise ValueError("disp_downsample_k must be non-negative")

    @property
    def field_factor(self):
        return 2 ** self.disp_downsample_k

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(open(path).read()))

    def to_dict(self):
        return asdict(self)
