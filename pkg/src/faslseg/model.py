"""The FASL-Seg network: encoder, four projection streams, fusion and decoder.

Streams 1-2 are low-level projections (ConvBlock -> MHSA -> UpChain), streams
3-4 high-level projections (ConvChain -> UpChain). All four bring their
encoder map to the stride-4 resolution with a common channel width; the
concatenated map is decoded by four ConvBlocks, a bilinear enlargement back to
input resolution and a Laplacian-initialized 3x3 classification head.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import functional as F
from .encoder import PRESETS, Encoder, EncoderConfig, encoder_preset
from .errors import ConfigError, DimensionError
from .nn import MHSA, ConvBlock, ConvChain, Module, UpChain, chain_widths, conv_normal, trunc_normal
from .tensor import Parameter, Tensor

STREAM_KINDS = ("LLFP", "HLFP")
ABLATION_ROWS = (
    "Model-1",
    "Model-2",
    "Model-3",
    "Model-4",
    "Model-5",
    "Model-6",
    "Model-7",
    "Model-8",
    "Model-9",
    "FASL-Seg",
)
PRESET_IMAGE_SIZE = {"toy": 64, "small": 256, "full": 512}


@dataclass
class StreamConfig:
    kind: str = "LLFP"
    attention_enabled: bool = True
    heads: int = 2
    conv_chain_len: int = 1
    up_steps: int = 0
    upsample_mode: str = "bilinear"
    out_channels: int = 32


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    streams: list[StreamConfig] = field(default_factory=list)
    decoder_channels: list[int] = field(default_factory=lambda: [64, 32, 16, 8])
    num_classes: int = 4
    final_upsample_factor: int = 4
    image_size: int = 64

    @property
    def preset(self) -> str:
        return self.encoder.scale_preset

    def validate(self) -> None:
        self.encoder.validate()
        if self.num_classes < 1:
            raise ConfigError(f"model.num_classes must be >= 1, got {self.num_classes}")
        if len(self.streams) != 4:
            raise ConfigError(f"exactly 4 streams are required, got {len(self.streams)}")
        if len(self.decoder_channels) != 4:
            raise ConfigError(f"model.decoder_channels must list 4 ConvBlock widths, got {self.decoder_channels}")
        if any(c < 1 for c in self.decoder_channels):
            raise ConfigError(f"model.decoder_channels must be positive, got {self.decoder_channels}")
        if self.final_upsample_factor != self.encoder.patch_strides[0]:
            raise ConfigError(
                f"model.final_upsample_factor={self.final_upsample_factor} must undo the stride-"
                f"{self.encoder.patch_strides[0]} stream resolution"
            )
        if self.image_size < 32 or self.image_size % 32:
            raise ConfigError(f"model.image_size must be a positive multiple of 32, got {self.image_size}")
        widths = {s.out_channels for s in self.streams}
        if len(widths) != 1:
            raise ConfigError(f"all streams need the same out_channels, got {[s.out_channels for s in self.streams]}")
        for i, s in enumerate(self.streams):
            tag = f"stream{i + 1}"
            if s.kind not in STREAM_KINDS:
                raise ConfigError(f"{tag}.kind must be one of {STREAM_KINDS}, got {s.kind!r}")
            if s.conv_chain_len < 1:
                raise ConfigError(f"{tag}.conv_chain_len must be >= 1, got {s.conv_chain_len}")
            if s.kind == "LLFP" and s.conv_chain_len != 1:
                raise ConfigError(f"{tag}: LLFP streams use a single ConvBlock (conv_chain_len=1)")
            # stream i sits at stride 4 * 2**i; it needs i x2 steps to reach stream 1's extents
            if s.up_steps != i:
                raise ConfigError(
                    f"{tag}.up_steps={s.up_steps} cannot match the stride-4 target; encoder stride requires {i}"
                )
            if s.upsample_mode not in UpChain.MODES:
                raise ConfigError(f"{tag}.upsample_mode must be one of {UpChain.MODES}, got {s.upsample_mode!r}")
            if s.attention_enabled and (s.heads < 1 or s.out_channels % s.heads):
                raise ConfigError(f"{tag}: out_channels={s.out_channels} not divisible by heads={s.heads}")


def default_config(preset: str = "full", num_classes: int = 12) -> ModelConfig:
    """Default FASL-Seg configuration, scaled to ``preset``.

    Stream width is twice the first encoder width (128 for the full preset);
    the decoder halves the fused width four times (512 -> 256 -> 128 -> 64 -> 32).
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    enc = encoder_preset(preset)
    width = 2 * enc.stage_channels[0]
    streams = [
        StreamConfig("LLFP", True, 2, 1, 0, "bilinear", width),
        StreamConfig("LLFP", True, 4, 1, 1, "bilinear", width),
        StreamConfig("HLFP", False, 4, 1, 2, "bilinear", width),
        StreamConfig("HLFP", False, 4, 2, 3, "bilinear", width),
    ]
    fused = 4 * width
    decoder = [fused >> j for j in range(1, 5)]
    return ModelConfig(
        encoder=enc,
        streams=streams,
        decoder_channels=decoder,
        num_classes=num_classes,
        final_upsample_factor=4,
        image_size=PRESET_IMAGE_SIZE[preset],
    )


def build_ablation(row: str, preset: str = "full", num_classes: int = 12) -> ModelConfig:
    """Configuration for one row of the attention / head-count / upsampling ablations."""
    if row not in ABLATION_ROWS:
        raise ConfigError(f"unknown ablation row {row!r}; valid rows: {', '.join(ABLATION_ROWS)}")
    cfg = default_config(preset, num_classes)
    streams = cfg.streams

    def attention(*flags: bool) -> None:
        for s, on in zip(streams, flags):
            s.attention_enabled = on

    if row == "Model-1":
        attention(False, False, False, False)
    elif row == "Model-2":
        attention(True, False, False, False)
    elif row == "Model-3":
        attention(False, True, False, False)
    elif row == "Model-4":
        attention(False, False, False, True)
    elif row == "Model-5":
        attention(False, False, True, True)
    elif row in ("Model-6", "Model-7", "Model-8"):
        heads = {"Model-6": 1, "Model-7": 2, "Model-8": 4}[row]
        streams[0].heads = streams[1].heads = heads
    elif row == "Model-9":
        for s in streams:
            s.upsample_mode = "transposed_conv"
    return cfg


# -- network pieces ------------------------------------------------------------------


class Stream(Module):
    def __init__(self, cfg: StreamConfig, c_in: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.c_in = c_in
        if cfg.kind == "LLFP":
            self.project = ConvBlock(c_in, cfg.out_channels, rng, dtype=dtype)
        else:
            self.project = ConvChain(chain_widths(c_in, cfg.out_channels, cfg.conv_chain_len), rng, dtype=dtype)
        self.attention = MHSA(cfg.out_channels, cfg.heads, rng, dtype=dtype) if cfg.attention_enabled else None
        self.up = UpChain(cfg.up_steps, cfg.upsample_mode, cfg.out_channels, rng, dtype=dtype)

    def forward(self, f: Tensor) -> Tensor:
        if f.shape[1] != self.c_in:
            raise DimensionError(f"{self.cfg.kind} stream expects {self.c_in} channels, got input {f.shape}")
        x = self.project(f)
        if self.attention is not None:
            x = self.attention(x)
        return self.up(x)


class LaplacianHead(Module):
    """3x3 classification conv initialized from the 8-neighbour Laplacian stencil.

    Each (class, channel) kernel starts as ``s * [[-1,-1,-1],[-1,8,-1],[-1,-1,-1]]``
    with a random scale ``s`` sized so the kernel matches a fan-out scaled 3x3
    init; a pointwise term and a bias are added. All weights are trained freely
    afterwards.
    """

    STENCIL = np.array([[-1.0, -1.0, -1.0], [-1.0, 8.0, -1.0], [-1.0, -1.0, -1.0]])

    def __init__(self, c_in: int, num_classes: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        std = math.sqrt(2.0 / (9 * num_classes)) / math.sqrt((self.STENCIL**2).mean())
        scale = trunc_normal(rng, (num_classes, c_in, 1, 1), std=std, dtype=np.float64)
        self.laplacian = Parameter((scale * self.STENCIL).astype(dtype))
        self.pointwise = Parameter(conv_normal(rng, (num_classes, c_in, 1, 1), dtype=dtype))
        self.bias = Parameter(np.zeros(num_classes, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.laplacian, None, padding=1) + F.conv2d(x, self.pointwise, self.bias)


class Decoder(Module):
    def __init__(self, c_in: int, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if len(cfg.decoder_channels) != 4:
            raise ConfigError(f"decoder needs 4 ConvBlock widths, got {cfg.decoder_channels}")
        self.c_in = c_in
        widths = [c_in] + list(cfg.decoder_channels)
        self.blocks = [ConvBlock(a, b, rng, dtype=dtype) for a, b in zip(widths[:-1], widths[1:])]
        self.upsample = cfg.final_upsample_factor
        self.head = LaplacianHead(widths[-1], cfg.num_classes, rng, dtype=dtype)

    def forward(self, fused: Tensor) -> Tensor:
        if fused.shape[1] != self.c_in:
            raise DimensionError(f"decoder expects {self.c_in} fused channels, got {fused.shape}")
        x = fused
        for block in self.blocks:
            x = block(x)
        x = F.interpolate_bilinear(x, self.upsample)
        return self.head(x)


def fuse(streams_out: Sequence[Tensor]) -> Tensor:
    """Concatenate the four stream outputs along channels, in stream order."""
    if len(streams_out) != 4:
        raise DimensionError(f"fusion expects 4 stream outputs, got {len(streams_out)}")
    ref = streams_out[0].shape
    for i, t in enumerate(streams_out):
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise DimensionError(f"stream {i + 1} output {t.shape} does not match stream 1 output {ref}")
    return F.concat_channels(streams_out)


@dataclass
class ForwardTrace:
    pyramid: list[Tensor]
    streams: list[Tensor]
    fused: Tensor
    logits: Tensor


class FaslSeg(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg.encoder, rng, dtype=dtype)
        self.streams = [
            Stream(s, cfg.encoder.stage_channels[i], rng, dtype=dtype) for i, s in enumerate(cfg.streams)
        ]
        fused = sum(s.out_channels for s in cfg.streams)
        self.decoder = Decoder(fused, cfg, rng, dtype=dtype)

    def trace(self, image: Tensor) -> ForwardTrace:
        pyramid = self.encoder(image)
        outs = [stream(f) for stream, f in zip(self.streams, pyramid)]
        fused = fuse(outs)
        return ForwardTrace(pyramid, outs, fused, self.decoder(fused))

    def forward(self, image: Tensor) -> Tensor:
        return self.trace(image).logits


def count_parameters(model: Module | None) -> int:
    """Number of trainable scalars. Batch-norm running statistics are buffers and excluded."""
    if model is None:
        return 0
    return sum(p.size for p in model.parameters())


def parameter_breakdown(model: FaslSeg) -> list[tuple[str, int]]:
    rows = [(f"encoder.stage{i + 1}", count_parameters(s)) for i, s in enumerate(model.encoder.stages)]
    for i, s in enumerate(model.streams):
        rows.append((f"stream{i + 1} ({s.cfg.kind})", count_parameters(s)))
    rows.append(("decoder.blocks", sum(count_parameters(b) for b in model.decoder.blocks)))
    rows.append(("decoder.head", count_parameters(model.decoder.head)))
    return rows


def mhsa_parameter_count(d_model: int) -> int:
    return 4 * d_model * d_model


def transposed_up_parameter_count(channels: int) -> int:
    return channels * channels * 16 + channels + 2 * channels


def with_classes(cfg: ModelConfig, num_classes: int) -> ModelConfig:
    return replace(cfg, num_classes=num_classes)
