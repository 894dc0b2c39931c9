"""Central-difference gradient checking for scalar functions of tensors."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


class GradCheckError(RuntimeError):
    pass


def numerical_gradient(f: Callable[[], Tensor], t: Tensor, eps: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. ``t.data``, perturbed in place."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if coords is None else coords:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f().item()
        flat[i] = orig - eps
        fm = f().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest absolute deviation scaled by the larger gradient magnitude (never below ``floor``)."""
    if analytic.size == 0:
        return 0.0
    scale_ = max(np.abs(analytic).max(), np.abs(numeric).max(), floor)
    return float(np.abs(analytic - numeric).max() / scale_)


def grad_check(
    f: Callable[..., Tensor],
    point: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    floor: float = 1e-8,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Compare backprop gradients of ``f(*point)`` against central differences.

    ``point`` tensors must be float64 leaves with ``requires_grad=True``.  When
    ``max_coords`` is set, only that many randomly chosen coordinates per
    tensor are differenced.  The error is taken jointly over every checked
    coordinate, so tensors whose true gradient is zero are judged against the
    overall gradient scale rather than against ``floor`` alone.
    """
    pts = [point] if isinstance(point, Tensor) else list(point)
    for t in pts:
        if t.dtype != np.float64:
            raise GradCheckError(f"grad_check requires float64, got {t.dtype}")
        if not t.requires_grad:
            raise GradCheckError("grad_check point tensors must require grad")

    def call() -> Tensor:
        return f(*pts)

    first = call()
    if first.data.size != 1:
        raise GradCheckError("grad_check needs a scalar function")
    if call().item() != first.item():
        raise GradCheckError("function is not deterministic")

    for t in pts:
        t.zero_grad()
    out = call()
    out.backward()

    rng = np.random.default_rng(seed)
    analytic_all, numeric_all = [], []
    for t in pts:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        coords = None
        if max_coords is not None and t.data.size > max_coords:
            coords = np.sort(rng.choice(t.data.size, size=max_coords, replace=False))
        numeric = numerical_gradient(call, t, eps, coords)
        if coords is not None:
            analytic = analytic.reshape(-1)[coords]
            numeric = numeric.reshape(-1)[coords]
        analytic_all.append(analytic.reshape(-1))
        numeric_all.append(numeric.reshape(-1))
        t.zero_grad()
    return relative_error(np.concatenate(analytic_all), np.concatenate(numeric_all), floor)
