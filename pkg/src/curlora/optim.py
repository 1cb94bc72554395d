"""AdamW, warmup + cosine learning rate, and the epoch loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .adapters import CurLoraAdapter, frobenius_bound_gap
from .matrix import RandomSource, ShapeError, frobenius_norm


@dataclass
class ScheduleConfig:
    peak_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if not 0 < self.warmup_steps <= self.total_steps:
            raise ValueError(f"need 0 < warmup_steps <= total_steps, got {self.warmup_steps}, {self.total_steps}")


def lr_at_step(sched: ScheduleConfig, step: int) -> float:
    """Linear ramp to ``peak_lr`` over warmup, then half-cosine down to 0 at ``total_steps``."""
    if step <= sched.warmup_steps:
        return sched.peak_lr * step / sched.warmup_steps
    if step >= sched.total_steps:
        return 0.0
    progress = min(1.0, (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps))
    return sched.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamW:
    lr: float = 2.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        """Update, in place, exactly the tensors named in ``grads``."""
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            if m.shape != p.shape:
                raise ShapeError(f"optimizer state for {name} has shape {m.shape}, parameter has {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p *= 1.0 - lr * self.weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adamw_step(params, grads, state: AdamW, lr: float | None = None) -> AdamW:
    state.step(params, grads, lr)
    return state


@dataclass
class EpochMetrics:
    losses: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    u_norms: list[float] = field(default_factory=list)
    w_adapted_norms: list[float] = field(default_factory=list)
    # per step, the largest ||CUR||_F - ||C||_F ||U||_F ||R||_F over adapters
    bound_gaps: list[float] = field(default_factory=list)

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.losses)) if self.losses else float("nan")


def adapter_norms(model) -> tuple[float | None, float, float | None]:
    """(global ||U||_F, global ||W_adapted||_F, worst bound gap) across adapters."""
    u_sq = w_sq = 0.0
    gap = None
    has_cur = False
    for ad in model.adapters.values():
        delta = ad.delta()
        w_sq += float(np.sum(delta * delta))
        if isinstance(ad, CurLoraAdapter):
            has_cur = True
            u_sq += frobenius_norm(ad.u) ** 2
            lhs, rhs = frobenius_bound_gap(ad)
            gap = lhs - rhs if gap is None else max(gap, lhs - rhs)
    return (math.sqrt(u_sq) if has_cur else None), math.sqrt(w_sq), gap


def train_epoch(model, inputs: np.ndarray, targets: np.ndarray, optimizer: AdamW, sched: ScheduleConfig,
                rng: RandomSource, *, batch_size: int = 32, task_id: str | None = None, step_offset: int = 0,
                on_step: Callable[[int], None] | None = None) -> EpochMetrics:
    """One shuffled pass; ``task_id=None`` trains next-token prediction on ``targets``."""
    n = len(inputs)
    order = rng.gen.permutation(n)
    metrics = EpochMetrics()
    step = step_offset
    for s in range(0, n, batch_size):
        rows = order[s : s + batch_size]
        loss, grads = model.loss_and_grads(inputs[rows], targets[rows], task_id)
        params = model.trainable_tensors()
        optimizer.step(params, grads, lr_at_step(sched, step))
        step += 1
        metrics.losses.append(loss)
        metrics.grad_norms.append(math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        if model.adapters:
            u, w, gap = adapter_norms(model)
            if u is not None:
                metrics.u_norms.append(u)
                metrics.bound_gaps.append(gap)
            metrics.w_adapted_norms.append(w)
        if on_step is not None:
            on_step(step)
    return metrics
