"""Banks of N independent two-layer MLP experts.

Each expert maps a length-C feature vector through C -> hidden -> C with a
GELU in between, applied position-wise (same map at every location).
Separate banks serve the per-pixel router and the two global frequency
branches.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import uniform_init, zeros_param

SCOPES = ("pixel", "low", "high")


class ExpertBank:
    def __init__(self, n_experts: int, channels: int, hidden: int,
                 rng: np.random.Generator, scope: str = "pixel",
                 dtype=np.float32):
        if n_experts < 1:
            raise ValueError(f"need at least one expert, got {n_experts}")
        if hidden < 1:
            raise ValueError(f"hidden width must be >= 1, got {hidden}")
        if scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
        self.n_experts = n_experts
        self.channels = channels
        self.hidden = hidden
        self.scope = scope
        self.experts = [{
            "w1": uniform_init(rng, (channels, hidden), channels, dtype),
            "b1": zeros_param((hidden,), dtype),
            "w2": uniform_init(rng, (hidden, channels), hidden, dtype),
            "b2": zeros_param((channels,), dtype),
        } for _ in range(n_experts)]

    def named_params(self, prefix: str):
        for j, p in enumerate(self.experts):
            for name in ("w1", "b1", "w2", "b2"):
                yield f"{prefix}.{j}.{name}", p[name]

    def param_count(self) -> int:
        c, h = self.channels, self.hidden
        return self.n_experts * (c * h + h + h * c + c)


def make_bank(n_experts: int, channels: int, hidden: int, seed,
              scope: str = "pixel", dtype=np.float32) -> ExpertBank:
    return ExpertBank(n_experts, channels, hidden,
                      np.random.default_rng(seed), scope, dtype)


def apply_expert(bank: ExpertBank, j: int, x: Tensor) -> Tensor:
    """Run expert j on [..., C] feature vectors; shape preserved."""
    if not 0 <= j < bank.n_experts:
        raise ValueError(f"expert id {j} out of range for N={bank.n_experts}")
    if x.shape[-1] != bank.channels:
        raise ValueError(
            f"trailing width {x.shape[-1]} != bank channels {bank.channels}")
    p = bank.experts[j]
    h = ad.gelu(ad.matmul(x, p["w1"]) + p["b1"])
    return ad.matmul(h, p["w2"]) + p["b2"]
