"""Frequency decomposition and global expert ensembling.

A dynamic per-channel low-pass filter (softmax over k*k taps, so unit DC
gain) splits features into low = filter * F and high = F - low. Each band
runs through two small branches: a scorer (LN -> DConv -> GAP -> Linear ->
softmax) that picks experts globally, and a mixer (LN -> DConv -> PConv)
whose output interacts with the scorer's DConv map before the top-K
expert ensemble.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .experts import ExpertBank, apply_expert
from .nn import (BatchNorm2d, Conv2d, DWConv2d, LayerNorm, Linear,
                 bchw_to_tokens, tokens_to_bchw)


@dataclass
class FrequencyPair:
    low: Tensor    # [1,C,H,W]
    high: Tensor   # [1,C,H,W], always the residual F - low

    def validate(self, f_t: Tensor, tol: float = 1e-6) -> None:
        err = np.abs(self.low.data + self.high.data - f_t.data).max()
        if err > tol:
            raise ValueError(f"low + high misses the input by {err:.3e}")


class LowpassFilterGen:
    """GAP -> 1x1 conv to C*k*k logits -> BN -> softmax per channel.

    The batch norm runs on running statistics (a 1x1 spatial map has no
    usable batch statistics at batch size 1) and still updates them during
    training.
    """

    def __init__(self, channels: int, k: int, rng: np.random.Generator,
                 dtype=np.float32):
        if k % 2 != 1:
            raise ValueError(f"filter size must be odd, got {k}")
        self.channels = channels
        self.k = k
        self.conv = Conv2d(channels, channels * k * k, 1, rng, dtype)
        self.bn = BatchNorm2d(channels * k * k, dtype=dtype,
                              use_batch_stats=False)

    def __call__(self, f_t: Tensor, training: bool) -> Tensor:
        """Filter taps [C,k,k]; each channel's taps are a simplex."""
        logits = self.bn(self.conv(ad.global_avg_pool(f_t)), training)
        c, k = self.channels, self.k
        taps = ad.softmax(ad.reshape(logits, (c, k * k)), axis=-1)
        return ad.reshape(taps, (c, k, k))

    def named_params(self, prefix: str):
        yield from self.conv.named_params(prefix + ".conv")
        yield from self.bn.named_params(prefix + ".bn")

    def named_buffers(self, prefix: str):
        yield from self.bn.named_buffers(prefix + ".bn")


def split_frequencies(f_t: Tensor, taps: Tensor) -> FrequencyPair:
    """low = depthwise conv with the taps (zero pad), high = the residual."""
    low = ad.dwconv2d(f_t, taps)
    return FrequencyPair(low=low, high=f_t - low)


def interact(f_p: Tensor, f_d: Tensor) -> Tensor:
    """Elementwise gate-and-keep: f_p * f_d + f_p."""
    if f_p.shape != f_d.shape:
        raise ValueError(f"interact shape mismatch: {f_p.shape} vs {f_d.shape}")
    return f_p * f_d + f_p


class GlobalScorer:
    """LN -> DConv -> GAP -> Linear -> softmax; also emits the DConv map."""

    def __init__(self, channels: int, n_experts: int, rng: np.random.Generator,
                 k: int = 3, dtype=np.float32):
        self.ln = LayerNorm(channels, dtype)
        self.dconv = DWConv2d(channels, k, rng, dtype)
        self.lin = Linear(channels, n_experts, rng, dtype)

    def __call__(self, f: Tensor):
        f_d = self.dconv(self.ln(f))                       # [1,C,H,W]
        pooled = ad.global_avg_pool(f_d)
        flat = ad.reshape(pooled, (1, pooled.shape[1]))
        scores = ad.softmax(self.lin(flat), axis=-1)
        return ad.reshape(scores, (scores.shape[1],)), f_d  # [N], map

    def named_params(self, prefix: str):
        yield from self.ln.named_params(prefix + ".ln")
        yield from self.dconv.named_params(prefix + ".dconv")
        yield from self.lin.named_params(prefix + ".lin")


def global_expert_scores(f: Tensor, scorer: GlobalScorer):
    return scorer(f)


def ensemble_global(f_pd: Tensor, scores: Tensor, k: int,
                    bank: ExpertBank) -> Tensor:
    """Top-K experts by global score, raw-weight sum over the whole map."""
    n = bank.n_experts
    if not 1 <= k <= n:
        raise ValueError(f"K={k} out of range for N={n}")
    if scores.shape != (n,):
        raise ValueError(f"expected scores [{n}], got {scores.shape}")
    idx, _ = ad.topk(scores.data, k)
    _, _, h, w = f_pd.shape
    tok = bchw_to_tokens(f_pd)                             # [T, C]
    out = None
    for j in idx:
        wj = ad.narrow(scores, 0, int(j), 1)               # [1], keeps grad
        yj = apply_expert(bank, int(j), tok) * wj
        out = yj if out is None else out + yj
    return tokens_to_bchw(out, h, w)


class FrequencyBranch:
    """One band's full path: score, mix, interact, ensemble."""

    def __init__(self, channels: int, n_experts: int, k_active: int,
                 rng: np.random.Generator, scope: str, k: int = 3,
                 hidden: int | None = None, dtype=np.float32):
        if not 1 <= k_active <= n_experts:
            raise ValueError(f"K={k_active} out of range for N={n_experts}")
        self.k_active = k_active
        self.scorer = GlobalScorer(channels, n_experts, rng, k, dtype)
        self.ln = LayerNorm(channels, dtype)
        self.dconv = DWConv2d(channels, k, rng, dtype)
        self.pconv = Conv2d(channels, channels, 1, rng, dtype)
        self.bank = ExpertBank(n_experts, channels,
                               hidden if hidden is not None else 2 * channels,
                               rng, scope=scope, dtype=dtype)

    def __call__(self, f: Tensor):
        scores, f_d = self.scorer(f)
        f_p = self.pconv(self.dconv(self.ln(f)))
        out = ensemble_global(interact(f_p, f_d), scores, self.k_active,
                              self.bank)
        return out, scores

    def named_params(self, prefix: str, bank_prefix: str):
        yield from self.scorer.named_params(prefix + ".scorer")
        yield from self.ln.named_params(prefix + ".ln")
        yield from self.dconv.named_params(prefix + ".dconv")
        yield from self.pconv.named_params(prefix + ".pconv")
        yield from self.bank.named_params(bank_prefix)
