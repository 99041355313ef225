"""Layers built on the autodiff primitives: linear, conv, norms, attention.

Every layer exposes ``named_params(prefix)`` (trainable tensors) and, where
relevant, ``named_buffers(prefix)`` (running statistics). Initialization:
weights uniform in +-1/sqrt(fan_in), biases zero.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype),
                  requires_grad=True)


def normal_init(rng: np.random.Generator, shape, std: float, dtype) -> Tensor:
    return Tensor((rng.standard_normal(shape) * std).astype(dtype),
                  requires_grad=True)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Linear:
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.w = uniform_init(rng, (in_features, out_features), in_features, dtype)
        self.b = zeros_param((out_features,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.w) + self.b

    def named_params(self, prefix: str):
        yield prefix + ".w", self.w
        yield prefix + ".b", self.b


class Conv2d:
    """k x k convolution, stride 1, zero padding preserving H and W."""

    def __init__(self, in_ch: int, out_ch: int, k: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.w = uniform_init(rng, (out_ch, in_ch, k, k), in_ch * k * k, dtype)
        self.b = zeros_param((out_ch,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b)

    def named_params(self, prefix: str):
        yield prefix + ".w", self.w
        yield prefix + ".b", self.b


class DWConv2d:
    """Depthwise k x k convolution (one spatial kernel per channel)."""

    def __init__(self, channels: int, k: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.w = uniform_init(rng, (channels, k, k), k * k, dtype)
        self.b = zeros_param((channels,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.dwconv2d(x, self.w, self.b)

    def named_params(self, prefix: str):
        yield prefix + ".w", self.w
        yield prefix + ".b", self.b


class LayerNorm:
    """Normalization over the channel axis (axis 1 for BCHW, -1 for [T, C])."""

    def __init__(self, channels: int, dtype=np.float32, eps: float = 1e-6):
        self.g = ones_param((channels,), dtype)
        self.b = zeros_param((channels,), dtype)
        self.channels = channels
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        axis = 1 if x.ndim == 4 else x.ndim - 1
        mu = ad.tmean(x, axis=axis, keepdims=True)
        centered = x - mu
        var = ad.tmean(centered * centered, axis=axis, keepdims=True)
        xhat = centered / ad.sqrt(var + self.eps)
        if x.ndim == 4:
            g = ad.reshape(self.g, (1, self.channels, 1, 1))
            b = ad.reshape(self.b, (1, self.channels, 1, 1))
        else:
            g, b = self.g, self.b
        return xhat * g + b

    def named_params(self, prefix: str):
        yield prefix + ".g", self.g
        yield prefix + ".b", self.b


class BatchNorm2d:
    """Batch normalization over (B, H, W) per channel.

    ``use_batch_stats=False`` normalizes by the running statistics even in
    training (still updating them); needed where the per-step batch is a
    single value per channel and batch statistics would be degenerate.
    A batch with one value per channel has no defined variance, so the
    running-stat update is skipped entirely for it; otherwise momentum
    decay would drive running_var to zero and blow up the normalization.
    """

    def __init__(self, channels: int, dtype=np.float32, eps: float = 1e-5,
                 momentum: float = 0.1, use_batch_stats: bool = True):
        self.g = ones_param((channels,), dtype)
        self.b = zeros_param((channels,), dtype)
        self.running_mean = np.zeros((channels,), dtype=dtype)
        self.running_var = np.ones((channels,), dtype=dtype)
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.use_batch_stats = use_batch_stats

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ad.NumericsError(f"batchnorm expects [B,{self.channels},H,W], "
                                   f"got {x.shape}")
        n = x.shape[0] * x.shape[2] * x.shape[3]
        # pre-update snapshot: normalization constants must not depend on x
        run_mu = self.running_mean.reshape(1, self.channels, 1, 1).copy()
        run_sd = np.sqrt(self.running_var + self.eps
                         ).reshape(1, self.channels, 1, 1)
        if training and n > 1:
            batch_mean = x.data.mean(axis=(0, 2, 3))
            batch_var = x.data.var(axis=(0, 2, 3))
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * batch_mean
                                 ).astype(self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var + m * batch_var
                                ).astype(self.running_var.dtype)
        if training and self.use_batch_stats:
            if n <= 1:
                raise ad.NumericsError(
                    "batchnorm with batch statistics needs >1 value per channel")
            mu = ad.tmean(x, axis=(0, 2, 3), keepdims=True)
            centered = x - mu
            var = ad.tmean(centered * centered, axis=(0, 2, 3), keepdims=True)
            xhat = centered / ad.sqrt(var + self.eps)
        else:
            xhat = (x - Tensor(run_mu)) * Tensor(1.0 / run_sd)
        g = ad.reshape(self.g, (1, self.channels, 1, 1))
        b = ad.reshape(self.b, (1, self.channels, 1, 1))
        return xhat * g + b

    def named_params(self, prefix: str):
        yield prefix + ".g", self.g
        yield prefix + ".b", self.b

    def named_buffers(self, prefix: str):
        yield prefix + ".running_mean", self.running_mean
        yield prefix + ".running_var", self.running_var


class MultiHeadAttention:
    """Scaled dot-product self-attention over a [T, C] token matrix."""

    def __init__(self, channels: int, heads: int,
                 rng: np.random.Generator, dtype=np.float32):
        if channels % heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = channels // heads
        self.channels = channels
        self.wq = Linear(channels, channels, rng, dtype)
        self.wk = Linear(channels, channels, rng, dtype)
        self.wv = Linear(channels, channels, rng, dtype)
        self.wo = Linear(channels, channels, rng, dtype)

    def _split(self, x: Tensor, T: int) -> Tensor:
        return ad.transpose(ad.reshape(x, (T, self.heads, self.head_dim)),
                            (1, 0, 2))

    def __call__(self, x: Tensor) -> Tensor:
        T = x.shape[0]
        if T == 0:
            raise ad.NumericsError("attention over zero tokens")
        q = self._split(self.wq(x), T)
        k = self._split(self.wk(x), T)
        v = self._split(self.wv(x), T)
        scale = 1.0 / math.sqrt(self.head_dim)
        scores = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * scale
        attn = ad.softmax(scores, axis=-1)
        out = ad.matmul(attn, v)
        merged = ad.reshape(ad.transpose(out, (1, 0, 2)), (T, self.channels))
        return self.wo(merged)

    def named_params(self, prefix: str):
        yield from self.wq.named_params(prefix + ".wq")
        yield from self.wk.named_params(prefix + ".wk")
        yield from self.wv.named_params(prefix + ".wv")
        yield from self.wo.named_params(prefix + ".wo")


def bchw_to_tokens(x: Tensor) -> Tensor:
    """[1, C, H, W] -> [H*W, C] token matrix."""
    _, C, H, W = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 3, 1)), (H * W, C))


def tokens_to_bchw(t: Tensor, H: int, W: int) -> Tensor:
    """[H*W, C] -> [1, C, H, W]."""
    C = t.shape[1]
    return ad.transpose(ad.reshape(t, (1, H, W, C)), (0, 3, 1, 2))
