"""Losses, Adam with cosine annealing, the training loop, and evaluation.

Training is steps-based: each step draws batch_size samples from the
deterministic stream, accumulates gradients over single-image forwards,
clips at global norm 1.0 and applies one Adam update. The loss is
L1 + lambda * balance, with the balance term summed over stages.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .degrade import DatasetSpec, sample_pair
from .mese import balance_loss
from .metrics import psnr, ssim
from .model import Model, save_checkpoint


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 2e-4
    total_steps: int = 1000
    batch_size: int = 1
    lam: float = 1e-4            # balance-loss weight
    seed: int = 0
    grad_clip: float = 1.0
    log_every: int = 50
    eval_every: int = 0          # 0 = evaluate only when asked explicitly
    eval_samples: int = 8
    ckpt_every: int = 0          # 0 = write the checkpoint only at the end

    def __post_init__(self):
        if self.total_steps < 0 or self.batch_size < 1:
            raise ValueError("need total_steps >= 0 and batch_size >= 1")
        if self.lr0 <= 0 or self.lam < 0:
            raise ValueError("need lr0 > 0 and lam >= 0")
        if self.eval_every < 0 or self.ckpt_every < 0:
            raise ValueError("need eval_every >= 0 and ckpt_every >= 0")


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """lr(t) = lr0 * 0.5 * (1 + cos(pi * t / T)); lr(0)=lr0, lr(T)=0."""
    t = max(cfg.total_steps, 1)
    return cfg.lr0 * 0.5 * (1.0 + math.cos(math.pi * min(step, t) / t))


def l1_loss(restored: Tensor, clean: Tensor) -> Tensor:
    if restored.shape != clean.shape:
        raise ValueError(f"shape mismatch: {restored.shape} vs {clean.shape}")
    return ad.tmean(ad.tabs(restored - clean))


def total_loss(l1: Tensor, balance, lam: float) -> Tensor:
    if balance is None:
        return l1
    return l1 + balance * lam


def routing_balance(aux, variant: str = "sigma"):
    """Balance loss summed over stages; None when routing is disabled."""
    total = None
    for r in aux.routings:
        b = balance_loss(r.importance, r.counts, variant=variant)
        total = b if total is None else total + b
    return total


class Adam:
    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for n, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            self.m[n] = self.beta1 * self.m[n] + (1 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1 - self.beta2) * g * g
            update = lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            p.data -= update.astype(p.dtype)

    def state(self) -> dict:
        return {"m": self.m, "v": self.v, "t": self.t}

    def load_state(self, state: dict) -> None:
        for n in self.params:
            self.m[n] = state["m"][n].copy()
            self.v[n] = state["v"][n].copy()
        self.t = int(state["t"])


def clip_gradients(params: dict, max_norm: float) -> tuple[float, bool]:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
        return norm, True
    return norm, False


def evaluate(model: Model, spec: DatasetSpec, n_samples: int,
             start_index: int = 0) -> dict:
    """Mean restored-vs-clean PSNR/SSIM per task over n_samples pairs."""
    if n_samples < 1:
        raise ValueError("need at least one evaluation sample")
    sums: dict = {}
    with ad.no_grad():
        for i in range(n_samples):
            pair = sample_pair(spec, start_index + i, dtype=model.dtype)
            restored, _ = model.forward(pair.degraded, training=False)
            ps = psnr(restored.data, pair.clean.data)
            ss = ssim(restored.data, pair.clean.data)
            agg = sums.setdefault(pair.task_label, [0.0, 0.0, 0])
            agg[0] += ps
            agg[1] += ss
            agg[2] += 1
    return {task: {"psnr": s[0] / s[2], "ssim": s[1] / s[2], "count": s[2]}
            for task, s in sums.items()}


def _csv_columns(tasks) -> list:
    cols = ["step", "lr", "l1", "balance", "total", "grad_norm", "clipped"]
    for t in tasks:
        cols += [f"psnr_{t}", f"ssim_{t}"]
    return cols


def fit(model: Model, data_spec: DatasetSpec, cfg: TrainConfig,
        log_path=None, ckpt_path=None, callbacks=None, quiet: bool = True):
    """Train and return the metric-log rows; optionally write CSV/checkpoint.

    A non-finite loss aborts with the step number after re-running the
    failing sample with finite checks on, so the error names the first
    offending op.
    """
    params = dict(model.named_params())
    opt = Adam(params)
    rows = []
    eval_spec = replace(data_spec, seed=data_spec.seed + 999_983,
                        corpus_size=0, augment=False)
    for step in range(cfg.total_steps):
        lr = cosine_lr(step, cfg)
        model.zero_grad()
        l1_sum = bal_sum = 0.0
        for b in range(cfg.batch_size):
            idx = step * cfg.batch_size + b
            pair = sample_pair(data_spec, idx, dtype=model.dtype)
            with ad.finite_checks(False):
                restored, aux = model.forward(pair.degraded, training=True)
                l1 = l1_loss(restored, pair.clean)
                bal = routing_balance(aux, model.config.balance_variant)
                loss = total_loss(l1, bal, cfg.lam)
                if not np.isfinite(loss.item()):
                    _diagnose_nonfinite(model, pair, step)
                (loss * (1.0 / cfg.batch_size)).backward()
            l1_sum += l1.item()
            bal_sum += bal.item() if bal is not None else 0.0
        norm, clipped = clip_gradients(params, cfg.grad_clip)
        opt.step(lr)
        row = {"step": step, "lr": lr,
               "l1": l1_sum / cfg.batch_size,
               "balance": bal_sum / cfg.batch_size,
               "total": (l1_sum + cfg.lam * bal_sum) / cfg.batch_size,
               "grad_norm": norm, "clipped": int(clipped)}
        if cfg.eval_every > 0 and (step + 1) % cfg.eval_every == 0:
            for task, r in evaluate(model, eval_spec, cfg.eval_samples).items():
                row[f"psnr_{task}"] = r["psnr"]
                row[f"ssim_{task}"] = r["ssim"]
        rows.append(row)
        if callbacks:
            for cb in callbacks:
                cb(step, row)
        if (ckpt_path is not None and cfg.ckpt_every > 0
                and (step + 1) % cfg.ckpt_every == 0):
            save_checkpoint(ckpt_path, model, step=step + 1,
                            opt_state=opt.state())
        if not quiet and (step % cfg.log_every == 0 or step == cfg.total_steps - 1):
            print(f"step {step:6d} lr {lr:.3e} l1 {row['l1']:.5f} "
                  f"balance {row['balance']:.5f}")
    if log_path is not None:
        write_log(log_path, rows, data_spec.tasks)
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, model, step=cfg.total_steps,
                        opt_state=opt.state())
    return rows, opt


def write_log(path, rows, tasks) -> None:
    cols = _csv_columns(tasks)
    with open(path, "w", newline="") as fh:
        out = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        out.writeheader()
        for row in rows:
            out.writerow(row)


def grad_check_loss(model: Model, x: Tensor, target: Tensor,
                    lam: float = 1e-4):
    """Pure scalar closure over a training-mode forward, for grad_check.

    Training forwards update batch-norm running statistics; restoring them
    after each call keeps repeated evaluations identical, which finite
    differencing requires.
    """

    def loss():
        saved = {n: b.copy() for n, b in model.named_buffers()}
        out, aux = model.forward(x, training=True)
        for n, b in model.named_buffers():
            b[:] = saved[n]
        bal = routing_balance(aux, model.config.balance_variant)
        return total_loss(l1_loss(out, target), bal, lam)

    return loss


def _diagnose_nonfinite(model: Model, pair, step: int):
    try:
        with ad.finite_checks(True):
            restored, _ = model.forward(pair.degraded, training=True)
            l1_loss(restored, pair.clean).backward()
    except ad.NumericsError as e:
        raise TrainingError(f"non-finite loss at step {step}: {e}") from None
    raise TrainingError(f"non-finite loss at step {step}")
