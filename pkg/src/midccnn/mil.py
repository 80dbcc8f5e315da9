"""Instance classifier and multiple-instance pooling (attention, mean, max)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .layers import Conv2d, Module
from .tensor import (
    ShapeError,
    Tensor,
    broadcast_to,
    div,
    matmul,
    mul,
    reshape,
    softmax,
    tanh,
    transpose,
)
from .tensor import max as tmax
from .tensor import mean as tmean
from .tensor import sum as tsum

METHODS = ("attention", "mean", "max")


@dataclass
class BagPrediction:
    p_bag: Tensor  # [N, N_c]
    instance_probs: Tensor  # [N, N_c, H', W']
    attention_weights: Optional[Tensor] = None  # [N, H', W']


class MilHead(Module):
    """1x1 instance classifier plus a two-layer attention scorer.

    ``attention_input`` selects whether the scorer sees the instance logits
    (default) or the per-instance softmax probabilities.
    """

    def __init__(
        self,
        in_channels: int,
        num_classes: int,
        hidden_dim: int = 64,
        method: str = "attention",
        attention_input: str = "logits",
    ):
        if method not in METHODS:
            raise ValueError(f"unknown pooling method {method!r}; expected one of {METHODS}")
        if attention_input not in ("logits", "probs"):
            raise ValueError(f"attention_input must be 'logits' or 'probs', got {attention_input!r}")
        self.instance_conv = Conv2d(in_channels, num_classes, 1)
        self.W1 = Tensor(np.zeros((hidden_dim, num_classes)), requires_grad=True)
        self.w2 = Tensor(np.zeros(hidden_dim), requires_grad=True)
        self.b = Tensor(np.zeros(hidden_dim), requires_grad=True)
        self.method = method
        self.attention_input = attention_input

    @property
    def num_classes(self) -> int:
        return self.instance_conv.out_ch

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[0]

    def instance_logits(self, features: Tensor) -> Tensor:
        if features.ndim != 4 or features.shape[1] != self.instance_conv.in_ch:
            raise ShapeError(
                f"instance classifier expects {self.instance_conv.in_ch} channels, got {features.shape}"
            )
        return self.instance_conv(features)

    @staticmethod
    def instance_probs(logits: Tensor) -> Tensor:
        return softmax(logits, axis=1)

    def attention_weights(self, inst: Tensor) -> Tensor:
        """Softmax over all positions of w2 . tanh(W1 f + b), per bag."""
        n, c, h, w = inst.shape
        if c != self.W1.shape[1]:
            raise ShapeError(f"attention W1 {self.W1.shape} cannot score {c}-dim instances")
        rows = reshape(transpose(inst, (0, 2, 3, 1)), (n * h * w, c))
        hidden = tanh(matmul(rows, transpose(self.W1, (1, 0))) + self.b)
        scores = reshape(matmul(hidden, reshape(self.w2, (-1, 1))), (n, h * w))
        return reshape(softmax(scores, axis=1), (n, h, w))

    def pool(self, probs: Tensor, weights: Optional[Tensor] = None) -> BagPrediction:
        n, c, h, w = probs.shape
        flat = reshape(probs, (n, c, h * w))
        if self.method == "attention":
            if weights is None:
                raise ValueError("attention pooling requires attention weights")
            a = broadcast_to(reshape(weights, (n, 1, h * w)), (n, c, h * w))
            p_bag = tsum(mul(flat, a), axis=2)
        elif self.method == "mean":
            p_bag = tmean(flat, axis=2)
        else:
            peak = tmax(flat, axis=2)
            p_bag = div(peak, broadcast_to(tsum(peak, axis=1, keepdims=True), (n, c)))
        return BagPrediction(p_bag, probs, weights)

    def __call__(self, features: Tensor) -> BagPrediction:
        logits = self.instance_logits(features)
        probs = self.instance_probs(logits)
        weights = None
        if self.method == "attention":
            weights = self.attention_weights(logits if self.attention_input == "logits" else probs)
        return self.pool(probs, weights)


def _nearest_upscale(grid: np.ndarray, size: int) -> np.ndarray:
    h, w = grid.shape
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return grid[rows][:, cols]


def attention_image(weights: np.ndarray, size: int) -> np.ndarray:
    """Min-max normalized 8-bit heatmap, nearest-neighbour upscaled to ``size``."""
    lo, hi = float(weights.min()), float(weights.max())
    if hi - lo <= 0.0:
        grey = np.full(weights.shape, 128, dtype=np.uint8)
    else:
        grey = np.round((weights - lo) / (hi - lo) * 255.0).astype(np.uint8)
    return _nearest_upscale(grey, size)


def write_pgm(path: Path, image: np.ndarray) -> None:
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def export_attention_map(pred: BagPrediction, out_path, size: int, index: int = 0) -> tuple[Path, Path]:
    """Write the weight grid of bag ``index`` as ``<out>.csv`` and ``<out>.pgm``."""
    if pred.attention_weights is None:
        raise ValueError("prediction carries no attention weights (pooling method is not attention)")
    grid = np.asarray(pred.attention_weights.data[index])
    base = Path(out_path)
    csv_path, pgm_path = base.with_suffix(".csv"), base.with_suffix(".pgm")
    try:
        base.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w") as fh:
            fh.write("h,w,weight\n")
            for i in range(grid.shape[0]):
                for j in range(grid.shape[1]):
                    fh.write(f"{i},{j},{float(grid[i, j])!r}\n")
        write_pgm(pgm_path, attention_image(grid, size))
    except OSError as exc:
        raise OSError(f"cannot write attention map to {base}: {exc}") from exc
    return csv_path, pgm_path
