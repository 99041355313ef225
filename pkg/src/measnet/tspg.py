"""Task-specific prompt generation.

A small conv head turns the degraded image into a task query q (a simplex
vector over channels); q mixes the rows of a learnable prompt bank P_t
into a per-image prompt, which is broadcast across space for fusion with
the content features.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Conv2d, normal_init

PROMPT_STD = 0.02


def generate_task_query(image: Tensor, conv: Conv2d) -> Tensor:
    """softmax(GAP(conv(image))) over channels -> [1, C] simplex vector."""
    pooled = ad.global_avg_pool(conv(image))          # [1, C, 1, 1]
    q = ad.reshape(pooled, (1, pooled.shape[1]))
    return ad.softmax(q, axis=-1)


def compose_prompt(q: Tensor, p_t: Tensor) -> Tensor:
    """Convex combination of prompt-bank rows: [1,C] x [C,M] -> [1,M]."""
    if q.ndim != 2 or p_t.ndim != 2 or q.shape[1] != p_t.shape[0]:
        raise ValueError(f"cannot compose {q.shape} with bank {p_t.shape}")
    return ad.matmul(q, p_t)


def broadcast_prompt(p_tilde: Tensor, h: int, w: int) -> Tensor:
    """[1, C] -> [1, C, H, W] with every spatial position equal to p_tilde."""
    if h < 1 or w < 1:
        raise ValueError(f"bad spatial extent {h}x{w}")
    c = p_tilde.shape[1]
    return ad.broadcast_to(ad.reshape(p_tilde, (1, c, 1, 1)), (1, c, h, w))


class PromptGenerator:
    """conv head + learnable prompt bank P_t [C, M] with M = C."""

    def __init__(self, channels: int, rng: np.random.Generator,
                 dtype=np.float32, in_channels: int = 3):
        self.channels = channels
        self.conv = Conv2d(in_channels, channels, 3, rng, dtype)
        self.p_t = normal_init(rng, (channels, channels), PROMPT_STD, dtype)

    def __call__(self, image: Tensor, h: int, w: int):
        """Returns (broadcast prompt [1,C,H,W], task query [1,C])."""
        q = generate_task_query(image, self.conv)
        p_tilde = compose_prompt(q, self.p_t)
        return broadcast_prompt(p_tilde, h, w), q

    def named_params(self, prefix: str):
        yield from self.conv.named_params(prefix + ".conv")
        yield prefix + ".P_t", self.p_t
