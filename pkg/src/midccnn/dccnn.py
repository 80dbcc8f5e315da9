"""The 23-layer densely connected backbone, its shape plan, and the GAP+FC head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import functional as F
from .layers import BatchNorm2d, Conv2d, DenseBlock, Dropout, Linear, Module, TransitionLayer
from .tensor import ShapeError, Tensor, relu, softmax

BIAS_INIT = 0.001


class ConfigError(ValueError):
    """Raised with every violation found in a configuration."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class DccnnConfig:
    input_size: int = 224
    in_channels: int = 3
    init_channels: int = 64
    growth_rate: int = 32
    block_lengths: list[int] = field(default_factory=lambda: [3, 3, 3])
    refine_channels: Optional[int] = None
    num_classes: int = 21
    head: str = "mil"
    use_batchnorm: bool = True
    seed: int = 0

    def problems(self) -> list[str]:
        out = []
        if not isinstance(self.input_size, int) or self.input_size <= 0 or self.input_size % 32:
            out.append(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if self.in_channels != 3:
            out.append(f"in_channels must be 3, got {self.in_channels}")
        if self.init_channels < 1:
            out.append(f"init_channels must be >= 1, got {self.init_channels}")
        if self.growth_rate < 1:
            out.append(f"growth_rate must be >= 1, got {self.growth_rate}")
        if list(self.block_lengths) != [3, 3, 3]:
            out.append(f"block_lengths is fixed at [3, 3, 3], got {self.block_lengths}")
        if self.refine_channels is not None and self.refine_channels < 1:
            out.append(f"refine_channels must be >= 1, got {self.refine_channels}")
        if self.num_classes < 2:
            out.append(f"num_classes must be >= 2, got {self.num_classes}")
        if self.head not in ("gap_fc", "mil"):
            out.append(f"head must be 'gap_fc' or 'mil', got {self.head!r}")
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    @property
    def backbone_channels(self) -> int:
        return self.init_channels + sum(self.block_lengths) * self.growth_rate

    @property
    def feature_channels(self) -> int:
        return self.refine_channels or self.backbone_channels

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Stage:
    name: str
    channels: int
    height: int
    width: int


def shape_plan(config: DccnnConfig) -> list[Stage]:
    """Per-stage output shapes derived from layer arithmetic alone."""
    config.validate()
    s = F.conv_out_size(config.input_size, 7, 2, 3)
    c = config.init_channels
    plan = [Stage("stem_conv", c, s, s)]
    s = F.conv_out_size(s, 3, 2, 1)
    plan.append(Stage("stem_pool", c, s, s))
    for i, n_layers in enumerate(config.block_lengths, start=1):
        c += n_layers * config.growth_rate
        plan.append(Stage(f"dense_block{i}", c, s, s))
        s //= 2
        plan.append(Stage(f"transition{i}", c, s, s))
    plan.append(Stage("refine_conv", config.feature_channels, s, s))
    if config.head == "gap_fc":
        plan.append(Stage("global_pool", config.feature_channels, 1, 1))
        plan.append(Stage("classifier", config.num_classes, 1, 1))
    return plan


class Dccnn(Module):
    """Stem, three dense block/transition pairs, and a 1x1 refinement conv."""

    def __init__(self, config: DccnnConfig, dropout: float = 0.0):
        config.validate()
        self.config = config
        bn = config.use_batchnorm
        c = config.init_channels
        k = config.growth_rate
        self.rng = np.random.default_rng(config.seed + 1)
        self.stem = Conv2d(config.in_channels, c, 7, stride=2, padding=3)
        self.blocks = []
        self.transitions = []
        for n_layers in config.block_lengths:
            block = DenseBlock(c, k, n_layers, use_bn=bn)
            self.blocks.append(block)
            c = block.out_ch
            self.transitions.append(TransitionLayer(c, use_bn=bn))
        self.drops = [Dropout(dropout, self.rng) for _ in config.block_lengths]
        self.final_bn = BatchNorm2d(c, enabled=bn)
        self.refine = Conv2d(c, config.feature_channels, 1)
        self.head_drop = Dropout(dropout, self.rng)
        self.fc = Linear(config.feature_channels, config.num_classes) if config.head == "gap_fc" else None

    def set_dropout(self, rate: float) -> None:
        for d in self.drops + [self.head_drop]:
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
            d.rate = rate

    def stages(self, x: Tensor) -> list[tuple[str, Tensor]]:
        size = self.config.input_size
        if x.ndim != 4 or x.shape[1] != self.config.in_channels or x.shape[2:] != (size, size):
            raise ShapeError(f"expected input [N, {self.config.in_channels}, {size}, {size}], got {x.shape}")
        out = []
        h = self.stem(x)
        out.append(("stem_conv", h))
        h = F.pool2d("max", h, 3, 2, 1)
        out.append(("stem_pool", h))
        for i, (block, trans, drop) in enumerate(zip(self.blocks, self.transitions, self.drops), start=1):
            h = block(h)
            out.append((f"dense_block{i}", h))
            h = drop(trans(h))
            out.append((f"transition{i}", h))
        h = self.refine(relu(self.final_bn(h)))
        out.append(("refine_conv", h))
        return out

    def forward_features(self, x: Tensor) -> Tensor:
        """Refined feature map [N, C, s/32, s/32]."""
        return self.stages(x)[-1][1]

    def forward_gap_head(self, features: Tensor) -> Tensor:
        if self.fc is None:
            raise ValueError("model was built without the gap_fc head")
        if features.ndim != 4 or features.shape[1] != self.fc.weight.shape[1]:
            raise ShapeError(f"gap head expects {self.fc.weight.shape[1]} channels, got {features.shape}")
        pooled = F.global_avg_pool(self.head_drop(features))
        return softmax(self.fc(pooled), axis=1)

    def weighted_layers(self) -> int:
        n = sum(1 for m in self.modules() if isinstance(m, (Conv2d, Linear)))
        return n


def _fan_in(shape: tuple[int, ...]) -> int:
    # weights are stored [out, in, ...]; rank-1 weights map a vector to a scalar
    if len(shape) == 1:
        return shape[0]
    return int(np.prod(shape[1:]))


def init_params(model: Module, seed: int) -> Module:
    """Fan-in scaled normal weights, every bias at 0.001, BN gamma at 1.

    Parameters are visited in their deterministic naming order, so the same
    seed always reproduces the same values.
    """
    rng = np.random.default_rng(seed)
    for name, p in model.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("bias", "beta", "b"):
            p.data = np.full(p.shape, BIAS_INIT)
        elif leaf == "gamma":
            p.data = np.ones(p.shape)
        else:
            std = np.sqrt(2.0 / _fan_in(p.shape))
            p.data = rng.standard_normal(p.shape) * std
    for name, b in model.named_buffers():
        if name.endswith("running_mean"):
            b.data = np.zeros(b.shape)
        elif name.endswith("running_var"):
            b.data = np.ones(b.shape)
    return model


def parameter_count(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def build(config: DccnnConfig, dropout: float = 0.0) -> Dccnn:
    model = Dccnn(config, dropout)
    init_params(model, config.seed)
    return model
