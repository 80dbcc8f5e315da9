"""Parameterized layers and the dense-connectivity building blocks."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import functional as F
from .tensor import ShapeError, Tensor, concat_channels, matmul, relu, transpose


class Module:
    """Container that discovers parameters and submodules from its attributes.

    Names follow attribute order, so parameter enumeration is deterministic.
    """

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + key + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and not val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_buffers(prefix + key + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{key}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data for k, v in self.named_parameters()}
        state.update({k: v.data for k, v in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        own.update(self.named_buffers())
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"state is missing tensors: {missing}")
        for name, t in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"{name}: saved shape {arr.shape} != model shape {t.shape}")
            t.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1, padding: int = 0):
        self.weight = Tensor(np.zeros((out_ch, in_ch, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride, self.padding = stride, padding

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]

    def out_size(self, size: int) -> int:
        return F.conv_out_size(size, self.weight.shape[2], self.stride, self.padding)

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int):
        self.weight = Tensor(np.zeros((out_features, in_features)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, transpose(self.weight, (1, 0))) + self.bias


class BatchNorm2d(Module):
    def __init__(self, ch: int, eps: float = 1e-5, momentum: float = 0.1, enabled: bool = True):
        self.gamma = Tensor(np.ones(ch), requires_grad=True)
        self.beta = Tensor(np.zeros(ch), requires_grad=True)
        self.running_mean = Tensor(np.zeros(ch))
        self.running_var = Tensor(np.ones(ch))
        self.eps, self.momentum, self.enabled = eps, momentum, enabled

    def __call__(self, x: Tensor) -> Tensor:
        if not self.enabled:
            return x
        if x.ndim != 4 or x.shape[1] != self.gamma.shape[0]:
            raise ShapeError(f"batch norm over {self.gamma.shape[0]} channels got input {x.shape}")
        if self.training:
            d = x.data
            n = d.size // d.shape[1]
            m = self.momentum
            batch_var = d.var(axis=(0, 2, 3))
            self.running_mean.data = (1 - m) * self.running_mean.data + m * d.mean(axis=(0, 2, 3))
            self.running_var.data = (1 - m) * self.running_var.data + m * batch_var * n / max(n - 1, 1)
            return F.BatchNormTrainFn.apply(x, self.gamma, self.beta, eps=self.eps)
        return F.BatchNormEvalFn.apply(
            x, self.gamma, self.beta,
            running_mean=self.running_mean.data, running_var=self.running_var.data, eps=self.eps,
        )


class Dropout(Module):
    def __init__(self, rate: float, rng: Optional[np.random.Generator] = None):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def __call__(self, x: Tensor) -> Tensor:
        return F.dropout(x, self.rate, self.training, self.rng)


def composite_fn(bn: BatchNorm2d, conv: Conv2d, x: Tensor) -> Tensor:
    """H_l: batch norm, relu, then convolution."""
    return conv(relu(bn(x)))


class DenseLayer(Module):
    def __init__(self, in_ch: int, growth_rate: int, bottleneck: int = 4, use_bn: bool = True):
        width = bottleneck * growth_rate
        self.bn1 = BatchNorm2d(in_ch, enabled=use_bn)
        self.conv1 = Conv2d(in_ch, width, 1)
        self.bn2 = BatchNorm2d(width, enabled=use_bn)
        self.conv2 = Conv2d(width, growth_rate, 3, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        return composite_fn(self.bn2, self.conv2, composite_fn(self.bn1, self.conv1, x))


class DenseBlock(Module):
    def __init__(self, in_ch: int, growth_rate: int, num_layers: int = 3, use_bn: bool = True):
        self.in_ch, self.growth_rate = in_ch, growth_rate
        self.layers = [
            DenseLayer(in_ch + i * growth_rate, growth_rate, use_bn=use_bn) for i in range(num_layers)
        ]

    @property
    def out_ch(self) -> int:
        return self.in_ch + len(self.layers) * self.growth_rate

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"dense block expects {self.in_ch} input channels, got shape {x.shape}")
        feats = [x]
        for layer in self.layers:
            inp = feats[0] if len(feats) == 1 else concat_channels(feats)
            feats.append(layer(inp))
        return concat_channels(feats)


class TransitionLayer(Module):
    """Channel-preserving 1x1 refinement followed by 2x2/2 average pooling."""

    def __init__(self, ch: int, use_bn: bool = True):
        self.bn = BatchNorm2d(ch, enabled=use_bn)
        self.conv = Conv2d(ch, ch, 1)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.conv.in_ch:
            raise ShapeError(f"transition expects {self.conv.in_ch} channels, got shape {x.shape}")
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"transition needs even spatial dims, got {x.shape[2]}x{x.shape[3]}")
        return F.pool2d("avg", composite_fn(self.bn, self.conv, x), 2, 2)
