"""Training objectives: diffusion MSE, least-squares adversarial terms, cycle L1."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch


class NonFiniteLossError(FloatingPointError):
    """A loss component became NaN or infinite."""


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.2
    beta: float = 5.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be non-negative, got {self}")


@dataclass
class LossReport:
    """Per-step scalars.  Disabled terms are ``None``."""

    diff: float | None
    adv_g: float | None
    cyc: float | None
    total_g: float
    adv_ds: float | None
    adv_da: float | None
    total_d: float

    FIELDS = ("diff", "adv_g", "cyc", "total_g", "adv_ds", "adv_da", "total_d")

    def as_dict(self) -> dict:
        return asdict(self)


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def diffusion_loss(predicted_noise: torch.Tensor, true_noise: torch.Tensor) -> torch.Tensor:
    _check_shapes(predicted_noise, true_noise)
    return ((predicted_noise - true_noise) ** 2).mean()


def adv_loss_generator(score_seg: torch.Tensor | None, score_ang: torch.Tensor | None) -> torch.Tensor:
    """Sum of the two least-squares "look real" terms; either may be dropped."""
    terms = [((s - 1.0) ** 2).mean() for s in (score_seg, score_ang) if s is not None]
    if not terms:
        raise ValueError("need at least one discriminator score map")
    return sum(terms)


def _disc_loss(score_real, score_fake):
    return 0.5 * ((score_real - 1.0) ** 2).mean() + 0.5 * (score_fake ** 2).mean()


def adv_loss_disc_s(score_real_fractal: torch.Tensor, score_fake_seg: torch.Tensor) -> torch.Tensor:
    return _disc_loss(score_real_fractal, score_fake_seg)


def adv_loss_disc_a(score_real_ang: torch.Tensor, score_fake_ang: torch.Tensor) -> torch.Tensor:
    return _disc_loss(score_real_ang, score_fake_ang)


def cyclic_loss(reconstructed_mask: torch.Tensor, fractal_mask: torch.Tensor) -> torch.Tensor:
    _check_shapes(reconstructed_mask, fractal_mask)
    return (reconstructed_mask - fractal_mask).abs().mean()


CE_EPS = 1e-6


def cyclic_loss_ce(reconstructed_mask: torch.Tensor, fractal_mask: torch.Tensor, eps: float = CE_EPS) -> torch.Tensor:
    """Binary cross-entropy; predictions are probabilities, clamped into ``[eps, 1 - eps]``."""
    _check_shapes(reconstructed_mask, fractal_mask)
    p = reconstructed_mask.clamp(eps, 1.0 - eps)
    y = fractal_mask
    if ((y < 0) | (y > 1)).any():
        raise ValueError("cross-entropy targets must lie in [0, 1]")
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).mean()


def _scalar(value):
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


def _check_finite(parts: dict):
    """Raise with every component listed if any present component is NaN or infinite."""
    values = {k: _scalar(v) for k, v in parts.items() if v is not None}
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        dump = ", ".join(f"{k}={v}" for k, v in values.items())
        raise NonFiniteLossError(f"non-finite {'/'.join(bad)} loss ({dump})")


def total_generator_loss(diff, adv_g, cyc, weights: LossWeights = LossWeights()):
    """``diff + alpha * adv_g + beta * cyc``; ``None`` components count as absent."""
    _check_finite({"diff": diff, "adv_g": adv_g, "cyc": cyc})
    total = 0.0
    if diff is not None:
        total = total + diff
    if adv_g is not None:
        total = total + weights.alpha * adv_g
    if cyc is not None:
        total = total + weights.beta * cyc
    return total


def total_discriminator_loss(adv_ds, adv_da):
    _check_finite({"adv_ds": adv_ds, "adv_da": adv_da})
    total = 0.0
    for v in (adv_ds, adv_da):
        if v is not None:
            total = total + v
    return total
