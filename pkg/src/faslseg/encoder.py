"""Hierarchical transformer encoder producing a four-level feature pyramid.

A simplified SegFormer-style design: each stage is an overlapping patch
embedding (strided convolution + layer norm) followed by pre-norm transformer
blocks (self-attention and a two-layer GELU MLP, both residual). There are no
positional encodings. Optional spatial reduction shrinks the key/value token
set of a stage by a strided convolution.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError
from .nn import Conv2d, LayerNorm, Linear, Module
from .tensor import Tensor

PRESETS = ("toy", "small", "full")


@dataclass
class EncoderConfig:
    stage_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    stage_depths: list[int] = field(default_factory=lambda: [1, 1, 1, 1])
    heads_per_stage: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    patch_kernels: list[int] = field(default_factory=lambda: [7, 3, 3, 3])
    patch_strides: list[int] = field(default_factory=lambda: [4, 2, 2, 2])
    patch_paddings: list[int] = field(default_factory=lambda: [3, 1, 1, 1])
    sr_ratios: list[int] = field(default_factory=lambda: [1, 1, 1, 1])
    mlp_ratio: float = 4.0
    scale_preset: str = "toy"

    def validate(self) -> None:
        lists = {
            "stage_channels": self.stage_channels,
            "stage_depths": self.stage_depths,
            "heads_per_stage": self.heads_per_stage,
            "patch_kernels": self.patch_kernels,
            "patch_strides": self.patch_strides,
            "patch_paddings": self.patch_paddings,
            "sr_ratios": self.sr_ratios,
        }
        for name, values in lists.items():
            if len(values) != 4:
                raise ConfigError(f"encoder.{name} must have exactly 4 entries, got {values}")
        if list(self.patch_strides) != [4, 2, 2, 2]:
            raise ConfigError(f"encoder.patch_strides must be [4, 2, 2, 2], got {self.patch_strides}")
        for i, (c, h) in enumerate(zip(self.stage_channels, self.heads_per_stage)):
            if c < 1 or h < 1 or c % h:
                raise ConfigError(f"encoder stage {i + 1}: {c} channels not divisible by {h} heads")
        if any(d < 1 for d in self.stage_depths):
            raise ConfigError(f"encoder.stage_depths must be positive, got {self.stage_depths}")
        if any(r < 1 for r in self.sr_ratios):
            raise ConfigError(f"encoder.sr_ratios must be positive, got {self.sr_ratios}")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"encoder.mlp_ratio must be positive, got {self.mlp_ratio}")
        if self.scale_preset not in PRESETS:
            raise ConfigError(f"encoder.scale_preset must be one of {PRESETS}, got {self.scale_preset!r}")
        if self.scale_preset == "full" and list(self.stage_channels) != [64, 128, 320, 512]:
            raise ConfigError(f"full preset requires stage_channels [64, 128, 320, 512], got {self.stage_channels}")


def encoder_preset(name: str) -> EncoderConfig:
    if name == "toy":
        return EncoderConfig()
    if name == "small":
        return EncoderConfig(
            stage_channels=[32, 64, 160, 256],
            stage_depths=[2, 2, 2, 2],
            heads_per_stage=[1, 2, 5, 8],
            sr_ratios=[8, 4, 2, 1],
            scale_preset="small",
        )
    if name == "full":
        # MiT-b5-like widths and depths
        return EncoderConfig(
            stage_channels=[64, 128, 320, 512],
            stage_depths=[3, 6, 40, 3],
            heads_per_stage=[1, 2, 5, 8],
            sr_ratios=[8, 4, 2, 1],
            scale_preset="full",
        )
    raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")


class PatchEmbed(Module):
    def __init__(self, c_in, c_out, kernel, stride, padding, rng, dtype):
        super().__init__()
        self.proj = Conv2d(c_in, c_out, kernel, rng, stride=stride, padding=padding, dtype=dtype)
        self.norm = LayerNorm(c_out, dtype=dtype)

    def forward(self, x: Tensor) -> tuple[Tensor, int, int]:
        x = self.proj(x)
        _, _, h, w = x.shape
        return self.norm(F.map_to_tokens(x)), h, w


class EfficientSelfAttention(Module):
    def __init__(self, dim, heads, sr_ratio, rng, dtype):
        super().__init__()
        self.heads, self.sr_ratio = heads, sr_ratio
        self.q = Linear(dim, dim, rng, dtype=dtype)
        self.kv = Linear(dim, 2 * dim, rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype=dtype)
        if sr_ratio > 1:
            self.sr = Conv2d(dim, dim, sr_ratio, rng, stride=sr_ratio, dtype=dtype)
            self.sr_norm = LayerNorm(dim, dtype=dtype)

    def forward(self, x: Tensor, h: int, w: int) -> Tensor:
        B, N, C = x.shape
        q = self.q(x)
        src = x
        if self.sr_ratio > 1:
            reduced = self.sr(F.tokens_to_map(x, h, w))
            src = self.sr_norm(F.map_to_tokens(reduced))
        kv = self.kv(src)
        k, v = kv[:, :, :C], kv[:, :, C:]
        return self.proj(F.scaled_dot_product_attention(q, k, v, self.heads))


class MLP(Module):
    def __init__(self, dim, hidden, rng, dtype):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(Module):
    def __init__(self, dim, heads, mlp_ratio, sr_ratio, rng, dtype):
        super().__init__()
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = EfficientSelfAttention(dim, heads, sr_ratio, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = MLP(dim, int(dim * mlp_ratio), rng, dtype)

    def forward(self, x: Tensor, h: int, w: int) -> Tensor:
        x = x + self.attn(self.norm1(x), h, w)
        return x + self.mlp(self.norm2(x))


class EncoderStage(Module):
    def __init__(self, c_in, cfg: EncoderConfig, i: int, rng, dtype):
        super().__init__()
        dim = cfg.stage_channels[i]
        self.patch_embed = PatchEmbed(
            c_in, dim, cfg.patch_kernels[i], cfg.patch_strides[i], cfg.patch_paddings[i], rng, dtype
        )
        self.blocks = [
            TransformerBlock(dim, cfg.heads_per_stage[i], cfg.mlp_ratio, cfg.sr_ratios[i], rng, dtype)
            for _ in range(cfg.stage_depths[i])
        ]
        self.norm = LayerNorm(dim, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        tokens, h, w = self.patch_embed(x)
        for block in self.blocks:
            tokens = block(tokens, h, w)
        return F.tokens_to_map(self.norm(tokens), h, w)


class Encoder(Module):
    """Maps an image (B, 3, H, W) to four maps at strides 4, 8, 16 and 32."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, in_channels: int = 3, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        widths = [in_channels] + list(cfg.stage_channels)
        self.stages = [EncoderStage(widths[i], cfg, i, rng, dtype) for i in range(4)]

    def forward(self, image: Tensor) -> list[Tensor]:
        if image.ndim != 4:
            raise DimensionError(f"encoder expects (B, C, H, W) input, got {image.shape}")
        H, W = image.shape[2:]
        if H % 32 or W % 32:
            raise DimensionError(f"input extents {H}x{W} must be divisible by 32")
        feats = []
        x = image
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats
