"""Central finite-difference gradient checks for scalar losses."""
from __future__ import annotations

from typing import Callable

import torch


def numeric_grad(fn: Callable[[], torch.Tensor], param: torch.Tensor, eps: float = 1e-6, max_entries: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Central differences of ``fn()`` w.r.t. entries of ``param`` (perturbed in place).

    Returns ``(indices, grads)`` over the first ``max_entries`` flat entries.
    """
    flat = param.data.view(-1)
    n = flat.numel() if max_entries is None else min(max_entries, flat.numel())
    out = torch.empty(n, dtype=torch.float64)
    with torch.no_grad():
        for i in range(n):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(fn())
            flat[i] = orig - eps
            lo = float(fn())
            flat[i] = orig
            out[i] = (hi - lo) / (2 * eps)
    return torch.arange(n), out


def analytic_grad(fn: Callable[[], torch.Tensor], param: torch.Tensor) -> torch.Tensor:
    if param.grad is not None:
        param.grad = None
    loss = fn()
    (g,) = torch.autograd.grad(loss, param)
    return g.reshape(-1).double()


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-12) -> float:
    """``||a - n|| / max(||a||, ||n||)``; zero when both gradients vanish."""
    scale = max(float(analytic.norm()), float(numeric.norm()))
    if scale < floor:
        return 0.0
    return float((analytic - numeric).norm()) / scale


def check_gradient(fn: Callable[[], torch.Tensor], param: torch.Tensor, eps: float = 1e-6, max_entries: int | None = 64) -> float:
    """Relative error between autograd and central differences for ``param``."""
    a = analytic_grad(fn, param)
    idx, n = numeric_grad(fn, param, eps, max_entries)
    return relative_error(a[idx], n)
