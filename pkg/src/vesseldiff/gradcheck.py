"""Central finite-difference checks of parameter gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class GradCheckResult:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    passed: np.ndarray

    @property
    def pass_rate(self) -> float:
        return float(self.passed.mean()) if self.passed.size else 0.0

    def __str__(self):
        return (f"{self.passed.sum()}/{self.passed.size} coordinates within tolerance, "
                f"median rel err {np.median(self.rel_error):.2e}")


def finite_difference_check(loss_fn, params, n_coords: int = 200, h: float = 1e-5, rtol: float = 1e-3,
                            atol: float = 1e-8, seed: int = 0) -> GradCheckResult:
    """Compare autograd against central differences on randomly sampled parameter entries.

    ``loss_fn()`` must rebuild the scalar loss from the current parameter
    values and be deterministic.  Coordinates are drawn uniformly over all
    entries of ``params``.  An entry passes when the relative error is at
    most ``rtol``, or when both estimates are below ``atol`` (a gradient that
    is zero to within round-off, e.g. behind an inactive ReLU).
    """
    params = [p for p in params if p.requires_grad]
    if not params:
        raise ValueError("no parameters to check")
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]

    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    picks = rng.choice(offsets[-1], size=min(n_coords, offsets[-1]), replace=False)

    ana, num = [], []
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            p, idx = params[k], int(flat - offsets[k])
            view = p.view(-1)
            orig = view[idx].item()
            view[idx] = orig + h
            up = float(loss_fn())
            view[idx] = orig - h
            down = float(loss_fn())
            view[idx] = orig
            num.append((up - down) / (2 * h))
            ana.append(float(grads[k].reshape(-1)[idx]))
    ana, num = np.array(ana), np.array(num)
    scale = np.maximum(np.abs(ana), np.abs(num))
    err = np.abs(ana - num) / np.where(scale > 0, scale, 1.0)
    passed = (err <= rtol) | (scale < atol)
    return GradCheckResult(ana, num, err, passed)
