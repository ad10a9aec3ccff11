"""Linear noise schedule and closed-form forward diffusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule with cumulative products.

    ``alpha_bars`` has ``T + 1`` entries: ``alpha_bars[0] == 1`` so that
    step 0 leaves an image untouched, and ``alpha_bars[t]`` is the product
    of ``1 - betas[s]`` over the first ``t`` steps.
    """

    betas: np.ndarray
    alpha_bars: np.ndarray
    T: int
    T_a: int

    def __post_init__(self):
        if len(self.betas) != self.T or len(self.alpha_bars) != self.T + 1:
            raise ValueError("schedule arrays do not match T")
        if not 0 < self.T_a < self.T and not (self.T == 1 and self.T_a == 0):
            raise ValueError(f"T_a must satisfy 0 < T_a < T, got T_a={self.T_a}, T={self.T}")

    def signal_scale(self, t) -> np.ndarray:
        return np.sqrt(self.alpha_bars[np.asarray(t)])

    def noise_scale(self, t) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bars[np.asarray(t)])


def build_linear_schedule(T: int, beta_start: float, beta_end: float, T_a: int | None = None) -> NoiseSchedule:
    if int(T) != T or T <= 0:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if T_a is None:
        T_a = 0 if T == 1 else max(1, T // 10)
    if T > 1 and not 0 < T_a < T:
        raise ValueError(f"T_a must satisfy 0 < T_a < T, got T_a={T_a}, T={T}")
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        i = np.arange(T, dtype=np.float64)
        betas = beta_start + (beta_end - beta_start) * i / (T - 1)
    alpha_bars = np.empty(T + 1, dtype=np.float64)
    alpha_bars[0] = 1.0
    # sequential product keeps alpha_bars[t] == alpha_bars[t-1] * (1 - betas[t-1]) exactly
    for t in range(1, T + 1):
        alpha_bars[t] = alpha_bars[t - 1] * (1.0 - betas[t - 1])
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars, T=int(T), T_a=int(T_a))


def _coefficients(schedule: NoiseSchedule, t, like):
    t = torch.as_tensor(t, dtype=torch.long)
    if t.ndim == 0:
        t = t.expand(like.shape[0])
    if t.shape[0] != like.shape[0]:
        raise ValueError(f"expected {like.shape[0]} timesteps, got {t.shape[0]}")
    if int(t.min()) < 0 or int(t.max()) > schedule.T:
        raise ValueError(f"timestep out of range [0, {schedule.T}]")
    ab = torch.as_tensor(schedule.alpha_bars, dtype=like.dtype)[t]
    shape = (-1,) + (1,) * (like.ndim - 1)
    return ab.sqrt().reshape(shape), (1.0 - ab).sqrt().reshape(shape)


def perturb(schedule: NoiseSchedule, x0: torch.Tensor, t, noise: torch.Tensor) -> torch.Tensor:
    """Sample ``x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise`` per batch element."""
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != image shape {tuple(x0.shape)}")
    a, b = _coefficients(schedule, t, x0)
    return a * x0 + b * noise


def sample_timesteps(count: int, upper: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """Integers drawn uniformly from the closed range ``[0, upper]``."""
    if upper < 0:
        raise ValueError("upper must be non-negative")
    return torch.randint(0, upper + 1, (count,), generator=generator)
