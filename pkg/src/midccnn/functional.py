"""Differentiable NCHW kernels: convolution, pooling, batch norm, dropout."""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Function, ShapeError, Tensor, log_branch


def conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # [N, C, Ho, Wo, kh, kw] view
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _pad(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=value)


def _scatter_windows(gw: np.ndarray, padded_shape, stride: int, padding: int) -> np.ndarray:
    """Adjoint of ``_windows``: sum window gradients [N,C,Ho,Wo,kh,kw] back onto the input."""
    n, c, ho, wo, kh, kw = gw.shape
    out = np.zeros(padded_shape)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gw[:, :, :, :, i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


class Conv2dFn(Function):
    kind = "conv2d"

    def forward(self, x, w, b, stride: int = 1, padding: int = 0):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias {b.shape} does not match weight {w.shape}")
        n, c, h, wd = x.shape
        o, _, kh, kw = w.shape
        ho, wo = conv_out_size(h, kh, stride, padding), conv_out_size(wd, kw, stride, padding)
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d: degenerate output {ho}x{wo} for input {x.shape}, kernel {w.shape}")
        self.stride, self.padding = stride, padding
        self.x_shape, self.w = x.shape, w
        if kh == 1 and kw == 1 and stride == 1 and padding == 0:
            self.cols = None
            self.x = x
            out = np.einsum("oc,nchw->nohw", w[:, :, 0, 0], x, optimize=True)
            # einsum may dispatch to tensordot; keep the layout contiguous
            out = np.ascontiguousarray(out)
        else:
            xp = _pad(x, padding)
            self.padded_shape = xp.shape
            cols = _windows(xp, kh, kw, stride).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
            self.cols = cols
            out = (cols @ w.reshape(o, -1).T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
            out = np.ascontiguousarray(out)
        out += b.reshape(1, o, 1, 1)
        return out

    def backward(self, g):
        o, c, kh, kw = self.w.shape
        n, _, ho, wo = g.shape
        gb = g.sum(axis=(0, 2, 3))
        if self.cols is None:
            g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
            x2 = self.x.transpose(1, 0, 2, 3).reshape(c, -1)
            gw = (g2 @ x2.T).reshape(o, c, 1, 1)
            if not self.needs_grad[0]:
                return None, gw, gb
            gx = (self.w[:, :, 0, 0].T @ g2).reshape(c, n, ho, wo).transpose(1, 0, 2, 3)
            return gx, gw, gb
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gmat.T @ self.cols).reshape(self.w.shape)
        if not self.needs_grad[0]:
            return None, gw, gb
        p = self.padding
        if self.stride == 1 and p <= kh - 1 and kh == kw:
            # stride-1 input gradient is a correlation of g with the flipped kernel
            gp = _pad(g, kh - 1 - p)
            wf = self.w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            n, _, h, wd = self.x_shape
            cols = _windows(gp, kh, kw, 1).transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, o * kh * kw)
            gx = (cols @ wf.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
            return np.ascontiguousarray(gx), gw, gb
        gcols = (gmat @ self.w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gx = _scatter_windows(gcols, self.padded_shape, self.stride, self.padding)
        return gx, gw, gb


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding plus per-channel bias."""
    return Conv2dFn.apply(x, w, b, stride=stride, padding=padding)


class MaxPool2dFn(Function):
    kind = "max_pool2d"

    def forward(self, x, k: int = 2, stride: int = 2, padding: int = 0):
        n, c, h, w = x.shape
        ho, wo = conv_out_size(h, k, stride, padding), conv_out_size(w, k, stride, padding)
        if ho < 1 or wo < 1:
            raise ShapeError(f"max_pool2d: degenerate output {ho}x{wo} for input {x.shape}")
        xp = _pad(x, padding, -np.inf)
        win = _windows(xp, k, k, stride).reshape(n, c, ho, wo, k * k)
        # argmax returns the first maximum: ties go to the lowest flat index
        self.idx = np.argmax(win, axis=-1)
        log_branch(self.idx)
        self.k, self.stride, self.padding, self.padded_shape = k, stride, padding, xp.shape
        return np.take_along_axis(win, self.idx[..., None], axis=-1)[..., 0]

    def backward(self, g):
        n, c, ho, wo = g.shape
        k = self.k
        gw = np.zeros((n, c, ho, wo, k * k))
        np.put_along_axis(gw, self.idx[..., None], g[..., None], axis=-1)
        return (_scatter_windows(gw.reshape(n, c, ho, wo, k, k), self.padded_shape, self.stride, self.padding),)


class AvgPool2dFn(Function):
    """Window mean; zero-padding cells are excluded from the denominator."""

    kind = "avg_pool2d"

    def forward(self, x, k: int = 2, stride: int = 2, padding: int = 0):
        n, c, h, w = x.shape
        ho, wo = conv_out_size(h, k, stride, padding), conv_out_size(w, k, stride, padding)
        if ho < 1 or wo < 1:
            raise ShapeError(f"avg_pool2d: degenerate output {ho}x{wo} for input {x.shape}")
        xp = _pad(x, padding)
        ones = _pad(np.ones((1, 1, h, w)), padding)
        self.count = _windows(ones, k, k, stride).sum(axis=(-2, -1))
        self.k, self.stride, self.padding, self.padded_shape = k, stride, padding, xp.shape
        return _windows(xp, k, k, stride).sum(axis=(-2, -1)) / self.count

    def backward(self, g):
        k = self.k
        gw = np.broadcast_to((g / self.count)[..., None, None], g.shape + (k, k))
        return (_scatter_windows(gw, self.padded_shape, self.stride, self.padding),)


def pool2d(kind: str, x: Tensor, k: int, stride: int, padding: int = 0) -> Tensor:
    if kind == "max":
        return MaxPool2dFn.apply(x, k=k, stride=stride, padding=padding)
    if kind == "avg":
        return AvgPool2dFn.apply(x, k=k, stride=stride, padding=padding)
    raise ValueError(f"unknown pooling kind {kind!r}")


def global_avg_pool(x: Tensor) -> Tensor:
    from .tensor import mean

    return mean(x, axis=(2, 3))


class BatchNormTrainFn(Function):
    kind = "batch_norm_train"

    def forward(self, x, gamma, beta, eps: float = 1e-5):
        axes = (0, 2, 3)
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = xc * self.inv_std
        self.gamma = gamma.reshape(1, -1, 1, 1)
        self.batch_mean, self.batch_var = mu.reshape(-1), var.reshape(-1)
        return self.xhat * self.gamma + beta.reshape(1, -1, 1, 1)

    def backward(self, g):
        axes = (0, 2, 3)
        gbeta = g.sum(axis=axes)
        ggamma = (g * self.xhat).sum(axis=axes)
        gxhat = g * self.gamma
        gx = self.inv_std * (
            gxhat
            - gxhat.mean(axis=axes, keepdims=True)
            - self.xhat * (gxhat * self.xhat).mean(axis=axes, keepdims=True)
        )
        return gx, ggamma, gbeta


class BatchNormEvalFn(Function):
    kind = "batch_norm_eval"

    def forward(self, x, gamma, beta, running_mean=None, running_var=None, eps: float = 1e-5):
        inv_std = 1.0 / np.sqrt(running_var + eps)
        self.xhat = (x - running_mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
        self.scale = (gamma * inv_std).reshape(1, -1, 1, 1)
        return self.xhat * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)

    def backward(self, g):
        axes = (0, 2, 3)
        return g * self.scale, (g * self.xhat).sum(axis=axes), g.sum(axis=axes)


class DropoutFn(Function):
    kind = "dropout"

    def forward(self, x, mask=None):
        self.mask = mask
        return x * mask

    def backward(self, g):
        return (g * self.mask,)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return DropoutFn.apply(x, mask=keep / (1.0 - rate))
