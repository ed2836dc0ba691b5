"""Run configuration: every hyperparameter in one serializable place."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .losses import LossWeights


@dataclass
class StageConfig:
    channels: tuple[int, ...] = (16, 32, 64, 128)
    strides: tuple[int, ...] = (4, 2, 2, 2)
    block_kinds: tuple[str, ...] = ("conv", "conv", "ssm", "ssm")
    block_counts: tuple[int, ...] = (1, 1, 1, 1)
    gfi_stages: tuple[int, ...] = (1, 2)
    ssm_state_dim: int = 8
    attn_heads: int = 4
    mlp_ratio: int = 2
    embed_dim: int = 1024

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.strides = tuple(self.strides)
        self.block_kinds = tuple(self.block_kinds)
        self.block_counts = tuple(self.block_counts)
        self.gfi_stages = tuple(self.gfi_stages)
        n = len(self.channels)
        if not (len(self.strides) == len(self.block_kinds) == len(self.block_counts) == n == 4):
            raise ValueError("stage config requires exactly 4 stages")
        total = 1
        for s in self.strides:
            total *= s
        if total != 32:
            raise ValueError(f"strides must compound to 32, got {total}")
        for i in self.gfi_stages:
            if i in (0, 3):
                raise ValueError("cross-modal injection only at intermediate stages (1, 2)")
        for kind in self.block_kinds:
            if kind not in ("conv", "ssm"):
                raise ValueError(f"unknown block kind {kind!r}")


@dataclass
class RunConfig:
    image_size: int = 64
    epochs: int = 20
    p_classes: int = 4
    k_instances: int = 4           # per modality; batch = P * K * 2
    lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_frac: float = 0.05
    seed: int = 0
    deterministic: bool = True
    gfi_enabled: bool = True
    gcc_enabled: bool = True
    cross_self_p: float = 0.5
    aux_frozen: bool = False
    pseudo_on_preprocessed: bool = True
    sobel_quantile: float = 0.85
    harris_quantile: float = 0.99
    harris_k: float = 0.04
    harris_window: int = 5
    augment_pad: int = 0
    augment_flip_p: float = 0.5
    augment_erase_p: float = 0.0
    embed_normalize: bool = True
    embed_flip_avg: bool = True
    loss: LossWeights = field(default_factory=LossWeights)
    stages: StageConfig = field(default_factory=StageConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if isinstance(self.stages, dict):
            self.stages = StageConfig(**self.stages)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.cross_self_p <= 1.0:
            raise ValueError("cross_self_p must be a probability")
        if self.p_classes < 2 or self.k_instances < 1:
            raise ValueError("PK sampler needs P >= 2 and K >= 1")
        if self.image_size % 32:
            raise ValueError("image_size must be divisible by the total stride 32")

    @property
    def batch_size(self) -> int:
        return self.p_classes * self.k_instances * 2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(**d)

    def save(self, path: str | Path):
        with open(path, "w") as fh:
            yaml.safe_dump(_plain(self.to_dict()), fh, sort_keys=False)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))


def _plain(obj):
    """Tuples -> lists so YAML stays clean."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj
