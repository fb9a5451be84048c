"""Network building blocks: residual stages, DownPool, UpSample, supervision
heads and the CNN cross-attention block that fuses a prior stream into the
primary stream."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

LEAKY_SLOPE = 0.01
NORM_EPS = 1e-5


class Module:
    """Parameter container. Parameters are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (e.g. float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _param(*shape, fill: float = 0.0, dtype=np.float32) -> Tensor:
    return Tensor(np.full(shape, fill, dtype=dtype), requires_grad=True)


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, kernel=3, stride=1, padding=None):
        kernel = T._triple(kernel)
        self.stride = T._triple(stride)
        self.padding = tuple(k // 2 for k in kernel) if padding is None else T._triple(padding)
        self.weight = _param(cout, cin, *kernel)
        self.bias = _param(cout)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose3d(Module):
    def __init__(self, cin: int, cout: int, stride):
        self.stride = T._triple(stride)
        self.weight = _param(cin, cout, *self.stride)
        self.bias = _param(cout)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv3d_transposed(x, self.weight, self.bias, self.stride)


class InstanceNorm3d(Module):
    def __init__(self, channels: int):
        self.gamma = _param(channels, fill=1.0)
        self.beta = _param(channels)

    def forward(self, x: Tensor) -> Tensor:
        return T.instance_norm(x, self.gamma, self.beta, NORM_EPS)


class ConvNormAct(Module):
    def __init__(self, cin: int, cout: int, kernel=3, stride=1):
        self.conv = Conv3d(cin, cout, kernel, stride)
        self.norm = InstanceNorm3d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return T.leaky_relu(self.norm(self.conv(x)), LEAKY_SLOPE)


@dataclass(frozen=True)
class StageSpec:
    channels_in: int
    channels_out: int
    pool: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        if self.channels_in < 1 or self.channels_out < 1:
            raise ValueError(f"stage channels must be positive: {self}")
        if len(self.pool) != 3 or any(s not in (1, 2) for s in self.pool):
            raise ValueError(f"pool strides must be 1 or 2 per axis, got {self.pool}")


@dataclass(frozen=True)
class CrossAttentionSpec:
    channels: int
    reduction: int = 4

    def __post_init__(self):
        if self.channels < 1 or self.reduction < 1:
            raise ValueError(f"invalid cross-attention spec: {self}")
        if self.channels % self.reduction:
            raise ValueError(
                f"channels ({self.channels}) must be divisible by reduction ({self.reduction})"
            )


def _check_channels(x: Tensor, expected: int, where: str) -> None:
    if x.ndim != 5 or x.shape[1] != expected:
        raise ValueError(f"{where}: expected [N,{expected},D,H,W] input, got {x.shape}")


class ResidualStage(Module):
    """Two conv-norm-LeakyReLU layers plus a skip from input to output.

    The skip is a 1x1x1 projection when the channel count changes.
    """

    def __init__(self, spec: StageSpec):
        self.spec = spec
        self.layer1 = ConvNormAct(spec.channels_in, spec.channels_out)
        self.layer2 = ConvNormAct(spec.channels_out, spec.channels_out)
        self.project = (
            Conv3d(spec.channels_in, spec.channels_out, kernel=1)
            if spec.channels_in != spec.channels_out
            else None
        )

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.spec.channels_in, "residual_stage")
        skip = self.project(x) if self.project is not None else x
        return self.layer2(self.layer1(x)) + skip


class DownPool(Module):
    """Strided 3x3x3 conv, instance norm, LeakyReLU. Halves axes with stride 2."""

    def __init__(self, spec: StageSpec):
        self.spec = spec
        self.block = ConvNormAct(spec.channels_in, spec.channels_out, kernel=3, stride=spec.pool)

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.spec.channels_in, "down_pool")
        for axis, (size, s) in enumerate(zip(x.shape[2:], self.spec.pool)):
            if size % s:
                raise ValueError(
                    f"down_pool: spatial axis {axis} of size {size} is not divisible by stride {s}; pad the input"
                )
        return self.block(x)


class UpSample(Module):
    """Transposed conv, concatenation with the encoder skip, residual stage."""

    def __init__(self, cin: int, cout: int, stride):
        self.up = ConvTranspose3d(cin, cout, stride)
        self.stage = ResidualStage(StageSpec(2 * cout, cout))

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        up = self.up(x)
        if up.shape[2:] != skip.shape[2:] or up.shape[0] != skip.shape[0]:
            raise ValueError(f"up_sample: upsampled shape {up.shape} does not match skip {skip.shape}")
        return self.stage(T.concat_channel([up, skip]))


class SupervisionHead(Module):
    """1x1x1 conv to the three class logits (background, GTVp, GTVn)."""

    def __init__(self, cin: int, n_classes: int = 3):
        self.conv = Conv3d(cin, n_classes, kernel=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class CrossAttention(Module):
    """Fuse secondary features into the primary stream with channel and spatial gating.

    A channel gate from the pooled concatenation of both streams reweights
    the secondary features; a 7x7x7 spatial gate computed from their
    channel-mean and channel-max maps then masks them before they are added
    to the primary stream. A zero secondary stream leaves the primary
    stream untouched.
    """

    def __init__(self, spec: CrossAttentionSpec, spatial_kernel: int = 7):
        self.spec = spec
        hidden = spec.channels // spec.reduction
        self.squeeze = Conv3d(2 * spec.channels, hidden, kernel=1)
        self.excite = Conv3d(hidden, spec.channels, kernel=1)
        self.spatial = Conv3d(2, 1, kernel=spatial_kernel)

    def gates(self, f_mid: Tensor, f_pre: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Return (channel gate, gated secondary features, spatial gate)."""
        if f_mid.shape != f_pre.shape:
            raise ValueError(f"cross_attention: stream shapes differ, {f_mid.shape} vs {f_pre.shape}")
        _check_channels(f_mid, self.spec.channels, "cross_attention")
        pooled = T.mean(T.concat_channel([f_mid, f_pre]), axis=(2, 3, 4), keepdims=True)
        a_c = T.sigmoid(self.excite(T.leaky_relu(self.squeeze(pooled), LEAKY_SLOPE)))
        g = f_pre * a_c
        maps = T.concat_channel([T.mean(g, axis=1, keepdims=True), T.max_channel(g)])
        a_s = T.sigmoid(self.spatial(maps))
        return a_c, g, a_s

    def forward(self, f_mid: Tensor, f_pre: Tensor) -> Tensor:
        _, g, a_s = self.gates(f_mid, f_pre)
        return f_mid + g * a_s
