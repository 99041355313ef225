"""Per-pixel mixture of experts.

Prompt and content features are concatenated, projected against learnable
expert prompts into a per-pixel demand softmax W, and the top-K experts
per pixel are applied with the raw (non-renormalized) softmax weights.
Unselected experts are never evaluated. The load-balance loss penalizes
dispersion of both the soft importance sums and the hard selection counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .experts import ExpertBank, apply_expert
from .nn import bchw_to_tokens, normal_init, tokens_to_bchw
from .tspg import PROMPT_STD

BALANCE_EPS = 1e-10
BALANCE_VARIANTS = ("sigma", "cv2")


def fuse_task_content(p_bcast: Tensor, f: Tensor) -> Tensor:
    """Channel concat [prompt; content]: two [1,C,H,W] -> [1,2C,H,W]."""
    if p_bcast.shape != f.shape:
        raise ValueError(f"fuse shape mismatch: {p_bcast.shape} vs {f.shape}")
    return ad.concat((p_bcast, f), axis=1)


def route_pixels(f_c: Tensor, p_e: Tensor) -> Tensor:
    """Per-pixel demand W = softmax(channel-vector . p_e): -> [1,N,H,W]."""
    if f_c.shape[1] != p_e.shape[0]:
        raise ValueError(
            f"routing width mismatch: features {f_c.shape[1]} vs prompts "
            f"{p_e.shape[0]}")
    _, _, h, w = f_c.shape
    logits = ad.matmul(bchw_to_tokens(f_c), p_e)     # [T, N]
    return tokens_to_bchw(ad.softmax(logits, axis=-1), h, w)


def select_topk_pixels(w: Tensor, k: int):
    """Hard top-K per pixel; ties break toward the lowest expert index.

    Returns (idx [T,K] int, raw weights [T,K] Tensor, mask [1,N,H,W]).
    The weights are differentiable slices of W and are NOT renormalized.
    """
    _, n, h, wd = w.shape
    if not 1 <= k <= n:
        raise ValueError(f"K={k} out of range for N={n}")
    t = h * wd
    tok = bchw_to_tokens(w)                          # [T, N]
    idx, _ = ad.topk(tok.data, k)                    # [T, K]
    flat = ad.reshape(tok, (t * n, 1))
    rows = (np.arange(t, dtype=np.intp)[:, None] * n + idx).ravel()
    selected = ad.reshape(ad.gather_rows(flat, rows), (t, k))
    mask_tok = np.zeros((t, n), dtype=w.dtype)
    np.put_along_axis(mask_tok, idx, 1.0, axis=1)
    mask = mask_tok.reshape(1, h, wd, n).transpose(0, 3, 1, 2)
    return idx, selected, np.ascontiguousarray(mask)


def expert_importance(w: Tensor) -> Tensor:
    """S(n) = sum over pixels of W(n, x, y); differentiable, shape [N]."""
    return ad.tsum(w, axis=(0, 2, 3))


def expert_counts(mask: np.ndarray) -> np.ndarray:
    """S~(n) = number of pixels selecting expert n; hard integer counts."""
    return mask.sum(axis=(0, 2, 3)).astype(np.int64)


def balance_loss(importance: Tensor, counts: np.ndarray,
                 eps: float = BALANCE_EPS, variant: str = "sigma") -> Tensor:
    """std/(mean^2+eps) over S plus the same over S~ (constant term).

    variant "sigma" puts the plain standard deviation in the numerator;
    "cv2" squares it, giving the conventional squared coefficient of
    variation. Only the soft S term carries gradient.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    if variant not in BALANCE_VARIANTS:
        raise ValueError(f"variant must be one of {BALANCE_VARIANTS}")
    mu = ad.tmean(importance)
    sd = ad.std_pop(importance)
    num = sd if variant == "sigma" else sd * sd
    soft = num / (mu * mu + eps)
    c = np.asarray(counts, dtype=np.float64)
    hard_num = c.std() if variant == "sigma" else c.var()
    hard = float(hard_num / (c.mean() ** 2 + eps))
    return soft + hard


@dataclass
class RoutingMap:
    weights: Tensor              # W [1,N,H,W], per-pixel simplex over experts
    selected_idx: np.ndarray     # [T,K] expert ids, pixels in row-major order
    selected_weights: Tensor     # [T,K] raw softmax values at selected_idx
    mask: np.ndarray             # W~ [1,N,H,W] binary selection mask
    importance: Tensor           # S [N]
    counts: np.ndarray           # S~ [N] integer selection counts

    def validate(self, k: int) -> None:
        w = self.weights.data
        n, h, wd = w.shape[1], w.shape[2], w.shape[3]
        if np.abs(w.sum(axis=1) - 1.0).max() > 1e-6:
            raise ValueError("demand weights are off the per-pixel simplex")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError("selection mask is not binary")
        if not np.all(self.mask.sum(axis=1) == k):
            raise ValueError(f"selection mask rows do not sum to K={k}")
        if abs(float(self.importance.data.sum()) - h * wd) > 1e-5:
            raise ValueError("importance does not total the pixel count")
        if int(self.counts.sum()) != k * h * wd:
            raise ValueError("selection counts do not total K * pixels")


def apply_pixel_experts(f: Tensor, routing: RoutingMap, bank: ExpertBank) -> Tensor:
    """Weighted sum of the selected experts at every pixel.

    Experts with no selected pixels are skipped entirely; gradients flow
    into both the routing weights and the expert parameters.
    """
    _, _, h, w = f.shape
    t = h * w
    idx = routing.selected_idx
    k = idx.shape[1]
    if idx.min() < 0 or idx.max() >= bank.n_experts:
        raise ValueError(f"expert id out of range for N={bank.n_experts}")
    tok = bchw_to_tokens(f)                                  # [T, C]
    wflat = ad.reshape(routing.selected_weights, (t * k, 1))
    out = None
    for j in range(bank.n_experts):
        rows, slots = np.nonzero(idx == j)
        if rows.size == 0:
            continue
        xj = ad.gather_rows(tok, rows)                       # [M, C]
        wj = ad.gather_rows(wflat, rows * k + slots)         # [M, 1]
        contrib = ad.scatter_rows(apply_expert(bank, j, xj) * wj, rows, t)
        out = contrib if out is None else out + contrib
    return tokens_to_bchw(out, h, w)


class PixelExpertEnsemble:
    """Expert prompts + bank; runs fuse -> route -> select -> apply."""

    def __init__(self, channels: int, n_experts: int, k_active: int,
                 rng: np.random.Generator, hidden: int | None = None,
                 dtype=np.float32):
        if not 1 <= k_active <= n_experts:
            raise ValueError(f"K={k_active} out of range for N={n_experts}")
        self.k_active = k_active
        self.p_e = normal_init(rng, (2 * channels, n_experts), PROMPT_STD, dtype)
        self.bank = ExpertBank(n_experts, channels,
                               hidden if hidden is not None else 2 * channels,
                               rng, scope="pixel", dtype=dtype)

    def __call__(self, f: Tensor, p_bcast: Tensor):
        w = route_pixels(fuse_task_content(p_bcast, f), self.p_e)
        idx, selected, mask = select_topk_pixels(w, self.k_active)
        routing = RoutingMap(weights=w, selected_idx=idx,
                             selected_weights=selected, mask=mask,
                             importance=expert_importance(w),
                             counts=expert_counts(mask))
        return apply_pixel_experts(f, routing, self.bank), routing

    def named_params(self, prompt_name: str = "mese.p_e",
                     bank_prefix: str = "experts.pixel"):
        yield prompt_name, self.p_e
        yield from self.bank.named_params(bank_prefix)
