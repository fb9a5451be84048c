"""The basic encoder-decoder segmentation network and the Dual Flow UNet."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .nn import (
    Conv3d,
    ConvTranspose3d,
    CrossAttention,
    CrossAttentionSpec,
    DownPool,
    Module,
    ResidualStage,
    StageSpec,
    SupervisionHead,
    UpSample,
)
from .tensor import Tensor

ARCHS = ("basic", "dualflow")

# anisotropic schedule: y/x pooled five times, z three times
FULL_SCALE_POOLS = ((1, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 2), (1, 2, 2))


@dataclass
class ModelConfig:
    arch: str = "basic"
    in_channels: int = 1
    base_channels: int = 32
    pool_schedule: list[tuple[int, int, int]] = field(default_factory=lambda: list(FULL_SCALE_POOLS))
    deep_supervision_levels: int = 4
    max_channels: int = 320
    attention_reduction: int = 4
    n_classes: int = 3

    def __post_init__(self):
        self.pool_schedule = [tuple(int(s) for s in p) for p in self.pool_schedule]
        self.validate()

    @property
    def n_stages(self) -> int:
        return len(self.pool_schedule) + 1

    @property
    def channels(self) -> list[int]:
        return [min(self.base_channels * 2**i, self.max_channels) for i in range(self.n_stages)]

    @property
    def stages(self) -> list[StageSpec]:
        """Per-stage spec; ``pool`` is the DownPool stride leaving that stage."""
        ch = self.channels
        pools = self.pool_schedule + [(1, 1, 1)]
        return [StageSpec(ch[i], ch[i + 1] if i + 1 < len(ch) else ch[i], pools[i]) for i in range(self.n_stages)]

    def cumulative_strides(self) -> list[tuple[int, int, int]]:
        out = [(1, 1, 1)]
        for p in self.pool_schedule:
            out.append(tuple(a * b for a, b in zip(out[-1], p)))
        return out

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.arch == "basic" and self.in_channels not in (1, 3):
            raise ValueError(f"basic network takes 1 or 3 input channels, got {self.in_channels}")
        if self.arch == "dualflow" and self.in_channels != 3:
            raise ValueError("dualflow takes 3 input channels (mid-RT, registered pre-RT, pre-RT mask)")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        for p in self.pool_schedule:
            if len(p) != 3 or any(s not in (1, 2) for s in p):
                raise ValueError(f"pool strides must be 1 or 2 per axis, got {p}")
        if not 1 <= self.deep_supervision_levels <= self.n_stages:
            raise ValueError(
                f"deep_supervision_levels must be in [1, {self.n_stages}], got {self.deep_supervision_levels}"
            )
        if self.arch == "dualflow":
            for c in self.channels:
                CrossAttentionSpec(c, self.attention_reduction)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pool_schedule"] = [list(p) for p in self.pool_schedule]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def full_scale_config(arch: str = "basic", in_channels: int = 1) -> ModelConfig:
    """Six stages, 32..320 channels, four supervision heads."""
    return ModelConfig(arch=arch, in_channels=in_channels if arch == "basic" else 3)


class Encoder(Module):
    def __init__(self, config: ModelConfig, in_channels: int):
        ch = config.channels
        self.stages = [ResidualStage(StageSpec(in_channels if i == 0 else c, c)) for i, c in enumerate(ch)]
        self.pools = [DownPool(s) for s in config.stages[:-1]]

    def forward(self, x: Tensor) -> list[Tensor]:
        feats = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            feats.append(x)
            if i < len(self.pools):
                x = self.pools[i](x)
        return feats


class Decoder(Module):
    """Mirror of the encoder. Heads sit on the highest-resolution outputs;
    the bottleneck counts as the deepest decoder stage."""

    def __init__(self, config: ModelConfig):
        ch = config.channels
        n = config.n_stages
        self.ups = [UpSample(ch[i + 1], ch[i], config.pool_schedule[i]) for i in range(n - 1)]
        self.heads = [SupervisionHead(ch[d], config.n_classes) for d in range(config.deep_supervision_levels)]

    def forward(self, feats: list[Tensor]) -> list[Tensor]:
        n = len(feats)
        outs = [None] * n
        x = feats[-1]
        outs[n - 1] = x
        for i in range(n - 2, -1, -1):
            x = self.ups[i](x, feats[i])
            outs[i] = x
        return [head(outs[d]) for d, head in enumerate(self.heads)]


class BasicSegNet(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        self.encoder = Encoder(config, config.in_channels)
        self.decoder = Decoder(config)

    def forward(self, x: Tensor) -> list[Tensor]:
        """Logits ordered from full resolution (d=0) to the coarsest head."""
        return self.decoder(self.encoder(x))


class DualFlowUNet(Module):
    """Mid-RT encoder plus a prior encoder for (registered pre-RT, mask).

    After every encoder stage the prior features are fused into the mid-RT
    stream by cross attention; the fused features feed the next stage and the
    decoder skips.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.encoder = Encoder(config, 1)
        self.prior_encoder = Encoder(config, 2)
        self.attention = [
            CrossAttention(CrossAttentionSpec(c, config.attention_reduction)) for c in config.channels
        ]
        self.decoder = Decoder(config)

    def encode(self, mid: Tensor, prior: Tensor | None) -> list[Tensor]:
        enc = self.encoder
        feats = []
        x, p = mid, prior
        for i, stage in enumerate(enc.stages):
            x = stage(x)
            if p is not None:
                p = self.prior_encoder.stages[i](p)
                x = self.attention[i](x, p)
            feats.append(x)
            if i < len(enc.pools):
                x = enc.pools[i](x)
                if p is not None:
                    p = self.prior_encoder.pools[i](p)
        return feats

    def forward(self, x: Tensor, use_prior: bool = True) -> list[Tensor]:
        """``x`` is [N,3,...]: channel 0 mid-RT, channels 1-2 the prior.

        ``use_prior=False`` zeroes the secondary stream, which by the
        attention residual reduces the network to its single-stream path.
        """
        if x.ndim != 5 or x.shape[1] != 3:
            raise ValueError(f"dualflow expects [N,3,D,H,W] input, got {x.shape}")
        mid = T.channel_slice(x, 0, 1)
        prior = T.channel_slice(x, 1, 3) if use_prior else None
        return self.decoder(self.encode(mid, prior))

    def single_stream(self) -> BasicSegNet:
        """Basic network sharing this model's primary encoder and decoder."""
        cfg = ModelConfig(**{**self.config.to_dict(), "arch": "basic", "in_channels": 1})
        net = BasicSegNet.__new__(BasicSegNet)
        net.config = cfg
        net.encoder = self.encoder
        net.decoder = self.decoder
        return net


def build_basic(config: ModelConfig, seed: int | None = 0) -> BasicSegNet:
    if config.arch != "basic":
        raise ValueError(f"build_basic needs arch='basic', got {config.arch!r}")
    config.validate()
    model = BasicSegNet(config)
    return init_parameters(model, seed) if seed is not None else model


def build_dualflow(config: ModelConfig, seed: int | None = 0) -> DualFlowUNet:
    if config.arch != "dualflow":
        raise ValueError(f"build_dualflow needs arch='dualflow', got {config.arch!r}")
    config.validate()
    model = DualFlowUNet(config)
    return init_parameters(model, seed) if seed is not None else model


def build_model(config: ModelConfig, seed: int | None = 0):
    return build_basic(config, seed) if config.arch == "basic" else build_dualflow(config, seed)


def init_parameters(model: Module, seed: int) -> Module:
    """Kaiming fan-in normal weights (variance 2/fan_in), zero biases, unit norm scale."""
    rng = np.random.default_rng(seed)
    for name, p in model.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "weight":
            # upsampling kernels equal their stride, so each output voxel sees Cin inputs
            fan_in = p.shape[0] if _is_transposed(name) else int(np.prod(p.shape[1:]))
            p.data = (rng.standard_normal(p.shape) * np.sqrt(2.0 / fan_in)).astype(p.dtype)
        elif leaf == "gamma":
            p.data = np.ones(p.shape, dtype=p.dtype)
        else:
            p.data = np.zeros(p.shape, dtype=p.dtype)
        p.grad = None
    return model


def _is_transposed(name: str) -> bool:
    return ".up.weight" in name


def parameter_count(model: Module) -> int:
    return sum(p.data.size for p in model.parameters())


def forward_logits(model: Module, x: np.ndarray) -> list[np.ndarray]:
    with T.no_grad():
        return [o.data for o in model(Tensor(x.astype(model.parameters()[0].dtype, copy=False)))]


__all__ = [
    "ModelConfig",
    "BasicSegNet",
    "DualFlowUNet",
    "build_basic",
    "build_dualflow",
    "build_model",
    "init_parameters",
    "full_scale_config",
    "parameter_count",
    "Conv3d",
    "ConvTranspose3d",
]
