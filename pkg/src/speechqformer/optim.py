"""Adam with warmup + cosine-annealed learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError, TrainingError
from .tensor import Tensor


@dataclass(frozen=True)
class ScheduleConfig:
    lr_warmup_start: float = 1e-6
    lr_peak: float = 1e-4
    lr_final: float = 1e-5
    warmup_steps: int = 200
    total_steps: int = 2000

    def __post_init__(self):
        if not self.lr_warmup_start <= self.lr_final <= self.lr_peak:
            raise ConfigError("need lr_warmup_start <= lr_final <= lr_peak")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("need 0 <= warmup_steps < total_steps")


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Linear warmup from ``lr_warmup_start`` to ``lr_peak``, then cosine decay to ``lr_final``."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.lr_warmup_start + (cfg.lr_peak - cfg.lr_warmup_start) * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr_final + 0.5 * (cfg.lr_peak - cfg.lr_final) * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[float, bool]:
    """Scale gradients in place so their global norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-6)
        for k in grads:
            grads[k] = grads[k] * grads[k].dtype.type(factor)
        return norm, True
    return norm, False


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update of ``params`` in place.

    Names absent from ``grads`` are skipped entirely.  Every gradient is
    validated before any parameter moves.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        dt = p.data.dtype.type
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.t[name] = 0
        v = state.v[name]
        t = state.t[name] = state.t[name] + 1
        m *= dt(state.beta1)
        m += dt(1 - state.beta1) * g
        v *= dt(state.beta2)
        v += dt(1 - state.beta2) * (g * g)
        mhat = m / dt(1 - state.beta1**t)
        vhat = v / dt(1 - state.beta2**t)
        p.data -= dt(lr) * mhat / (np.sqrt(vhat) + dt(state.eps))


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices for ``step``: a fresh seeded permutation each epoch, last partial batch kept.

    A pure function of its arguments, so a resumed run sees the same order.
    """
    if n < 1 or batch_size < 1:
        raise ConfigError("need at least one example and batch_size >= 1")
    per_epoch = -(-n // batch_size)
    epoch, b = divmod(step, per_epoch)
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return order[b * batch_size:(b + 1) * batch_size]


def train_steps(
    params: Mapping[str, Tensor],
    loss_fn: Callable[[int], tuple[Tensor, dict]],
    state: AdamState,
    sched: ScheduleConfig,
    start: int,
    stop: int,
    grad_clip: float = 1.0,
    after_step: Callable[[dict], bool] | None = None,
) -> int:
    """Run steps ``start..stop-1``; returns the number of completed steps.

    ``loss_fn(step)`` returns the scalar loss plus extra values to log.
    ``after_step`` receives the step record and may return True to stop early.
    """
    step = start
    while step < stop:
        for t in params.values():
            t.zero_grad()
        try:
            loss, extra = loss_fn(step)
        except FloatingPointError as exc:
            raise TrainingError(f"step {step}: {exc}") from None
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"step {step}: non-finite loss {value}")
        loss.backward()
        grads = {k: t.grad for k, t in params.items() if t.grad is not None}
        norm, clipped = clip_by_global_norm(grads, grad_clip)
        lr = lr_at(step, sched)
        adam_step(params, grads, state, lr)
        step += 1
        record = {"step": step - 1, "lr": lr, "loss": value, **extra, "grad_norm": norm, "clipped": clipped}
        if after_step is not None and after_step(record):
            break
    return step
