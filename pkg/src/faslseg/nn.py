"""Module system and the reusable blocks of the segmentation network.

ConvBlock, MHSA, UpChain and ConvChain are the components the projection
streams are assembled from; ``TransposedUpBlock`` is the learned-upsampling
alternative used in the upsampling ablation.
"""
from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError
from .tensor import Parameter, Tensor

LEAKY_SLOPE = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# -- initialization -------------------------------------------------------------


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def conv_normal(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    """Fan-out scaled normal for conv kernels (Cout, Cin, k, k)."""
    fan_out = shape[0] * shape[2] * shape[3]
    return rng.normal(0.0, math.sqrt(2.0 / fan_out), size=shape).astype(dtype)


# -- module system --------------------------------------------------------------


class Module:
    """Minimal container with a named parameter registry and train/eval mode."""

    training: bool = True

    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def children(self) -> Iterator[tuple[str, Module]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        for name, p in self._walk_parameters(prefix):
            if id(p) in seen:
                raise ConfigError(f"parameter {name} is registered twice")
            seen.add(id(p))
            p.name = name
            yield name, p

    def _walk_parameters(self, prefix: str):
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
        for key, child in self.children():
            yield from child._walk_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in self._buffers.items():
            yield prefix + key, value
        for key, child in self.children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> Module:
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            state[name] = buf
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        unexpected = set(state) - set(own) - set(bufs)
        if missing or unexpected:
            raise ConfigError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {state[name].shape} != model shape {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, buf in bufs.items():
            buf[...] = state[name]


# -- primitive layers -------------------------------------------------------------


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, dtype=np.float32):
        super().__init__()
        self.weight = Parameter(trunc_normal(rng, (d_in, d_out), dtype=dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
        dtype=np.float32,
    ):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = Parameter(conv_normal(rng, (c_out, c_in, kernel, kernel), dtype=dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float32, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x,
            self.gamma,
            self.beta,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            self.training,
            self.momentum,
            self.eps,
        )


class LayerNorm(Module):
    def __init__(self, channels: int, dtype=np.float32, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


# -- model blocks -----------------------------------------------------------------


class ConvBlock(Module):
    """Pointwise conv -> batch norm -> LeakyReLU. Spatial extents are preserved."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, slope: float = LEAKY_SLOPE, dtype=np.float32):
        super().__init__()
        if not 0.0 < slope < 1.0:
            raise ConfigError(f"leaky slope must lie in (0, 1), got {slope}")
        self.c_in, self.c_out, self.slope = c_in, c_out, slope
        self.conv = Conv2d(c_in, c_out, 1, rng, dtype=dtype)
        self.bn = BatchNorm2d(c_out, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.c_in:
            raise DimensionError(f"ConvBlock expects {self.c_in} channels, got input {x.shape}")
        return F.leaky_relu(self.bn(self.conv(x)), self.slope)


class MHSA(Module):
    """Multi-head self-attention over all spatial positions of a feature map.

    The map itself supplies queries, keys and values. Projections carry no
    bias and there is no residual path: the block returns the attention
    output reshaped back to (B, C, H, W).
    """

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if heads < 1 or d_model % heads:
            raise ConfigError(f"d_model={d_model} is not divisible by heads={heads}")
        self.d_model, self.heads = d_model, heads
        # column block i of each projection is head i's W_i
        self.w_q = Parameter(trunc_normal(rng, (d_model, d_model), dtype=dtype))
        self.w_k = Parameter(trunc_normal(rng, (d_model, d_model), dtype=dtype))
        self.w_v = Parameter(trunc_normal(rng, (d_model, d_model), dtype=dtype))
        self.w_o = Parameter(trunc_normal(rng, (d_model, d_model), dtype=dtype))

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    def forward(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        if C != self.d_model:
            raise DimensionError(f"MHSA expects {self.d_model} channels, got input {x.shape}")
        tokens = F.map_to_tokens(x)
        q = F.linear(tokens, self.w_q)
        k = F.linear(tokens, self.w_k)
        v = F.linear(tokens, self.w_v)
        heads = F.scaled_dot_product_attention(q, k, v, self.heads)
        return F.tokens_to_map(F.linear(heads, self.w_o), H, W)


class TransposedUpBlock(Module):
    """x2 learned upsampling: transposed conv (k4, s2, p1) -> batch norm -> ReLU."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.weight = Parameter(conv_normal(rng, (channels, channels, 4, 4), dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self.bn = BatchNorm2d(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.bn(F.conv_transpose2d(x, self.weight, self.bias, stride=2, padding=1)))


class UpChain(Module):
    """``steps`` successive x2 enlargements, bilinear or transposed-conv."""

    MODES = ("bilinear", "transposed_conv")

    def __init__(
        self,
        steps: int,
        mode: str = "bilinear",
        channels: int | None = None,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        super().__init__()
        if steps < 0:
            raise ConfigError(f"up chain steps must be >= 0, got {steps}")
        if mode not in self.MODES:
            raise ConfigError(f"unknown upsample mode {mode!r}; expected one of {self.MODES}")
        self.steps, self.mode = steps, mode
        self.blocks: list[TransposedUpBlock] = []
        if mode == "transposed_conv" and steps:
            if channels is None or rng is None:
                raise ConfigError("transposed_conv up chain needs channels and an rng to build its weights")
            self.blocks = [TransposedUpBlock(channels, rng, dtype) for _ in range(steps)]

    def forward(self, x: Tensor) -> Tensor:
        if self.mode == "bilinear":
            for _ in range(self.steps):
                x = F.interpolate_bilinear(x, 2)
            return x
        for block in self.blocks:
            x = block(x)
        return x


def chain_widths(c_in: int, c_out: int, n: int) -> list[int]:
    """Channel widths for an ``n``-block compression chain from c_in to c_out.

    Intermediate widths halve from ``c_in`` but never drop below ``c_out``;
    512 -> 128 over two blocks gives [512, 256, 128].
    """
    if n < 1:
        raise ConfigError("a conv chain needs at least one block")
    return [c_in] + [max(c_out, c_in >> j) for j in range(1, n)] + [c_out]


class ConvChain(Module):
    def __init__(self, widths: Sequence[int], rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if len(widths) < 2:
            raise ConfigError("a conv chain needs at least one block")
        self.blocks = [ConvBlock(a, b, rng, dtype=dtype) for a, b in zip(widths[:-1], widths[1:])]

    @classmethod
    def from_blocks(cls, blocks: Sequence[ConvBlock]) -> ConvChain:
        if not blocks:
            raise ConfigError("a conv chain needs at least one block")
        for i, (a, b) in enumerate(zip(blocks[:-1], blocks[1:])):
            if a.c_out != b.c_in:
                raise ConfigError(f"conv chain block {i} outputs {a.c_out} channels but block {i + 1} expects {b.c_in}")
        chain = cls.__new__(cls)
        Module.__init__(chain)
        chain.blocks = list(blocks)
        return chain

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x
