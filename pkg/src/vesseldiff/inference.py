"""One-pass vessel segmentation from a trained bundle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import PATCH, RETINAL_SIZE, patch_retinal, stitch_patches
from .schedule import perturb


class TimestepOutOfRange(ValueError):
    """Requested perturbation step lies outside the range seen in training."""


@dataclass
class SegmentationResult:
    soft: np.ndarray  # (B, H, W) in [0, 1]
    binary: np.ndarray  # (B, H, W) in {0, 1}
    t_a: int
    threshold: float
    source_ids: list | None = None


def _pad_to(x: torch.Tensor, divisor: int):
    h, w = x.shape[-2:]
    ph, pw = (-h) % divisor, (-w) % divisor
    if ph == 0 and pw == 0:
        return x, (h, w)
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode), (h, w)


@torch.no_grad()
def segment_soft(bundle, angiogram, t_a: int = 0, noise: torch.Tensor | None = None,
                 generator: torch.Generator | None = None) -> torch.Tensor:
    """Soft masks ``(B, 1, H, W)`` in ``[0, 1]`` from one denoiser and one generator call."""
    x = torch.as_tensor(np.asarray(angiogram) if not isinstance(angiogram, torch.Tensor) else angiogram)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    dtype = next(bundle.generator.parameters()).dtype
    x = x.to(dtype)
    if t_a < 0 or t_a > bundle.schedule.T_a:
        raise TimestepOutOfRange(f"t_a={t_a} is outside the trained range [0, {bundle.schedule.T_a}]")
    x_pad, (h, w) = _pad_to(x, bundle.input_divisor)
    if t_a > 0 and bundle.perturbs_inputs:
        if noise is None:
            noise = torch.randn(x.shape, generator=generator, dtype=dtype)
        noise_pad, _ = _pad_to(noise.to(dtype), bundle.input_divisor)
        x_pad = perturb(bundle.schedule, x_pad, t_a, noise_pad)
    t = torch.full((x_pad.shape[0],), t_a if bundle.perturbs_inputs else 0, dtype=torch.long)
    was_training = bundle.generator.training
    bundle.eval()
    try:
        out = bundle.seg_generator(bundle.latent_input(x_pad, t), None)
    finally:
        if was_training:
            bundle.train()
    return ((out[..., :h, :w] + 1.0) / 2.0).clamp(0.0, 1.0)


def segment(bundle, angiogram, t_a: int = 0, threshold: float = 0.5, noise=None, generator=None,
            source_ids=None) -> SegmentationResult:
    soft = segment_soft(bundle, angiogram, t_a, noise, generator)[:, 0].cpu().numpy().astype(np.float64)
    return SegmentationResult(soft=soft, binary=(soft >= threshold).astype(np.uint8), t_a=t_a,
                              threshold=threshold, source_ids=source_ids)


def bundle_predictor(bundle, t_a: int = 0):
    """Callable mapping one ``[-1, 1]`` image (H, W) to its soft mask."""

    def predict(image):
        return segment_soft(bundle, np.asarray(image, dtype=np.float32), t_a)[0, 0].cpu().numpy().astype(np.float64)

    return predict


def segment_patched(predict, image: np.ndarray, threshold: float = 0.5,
                    size: int = RETINAL_SIZE, patch: int = PATCH) -> SegmentationResult:
    """Segment a retinal image patch by patch on a resized grid and stitch the result.

    ``predict`` is a bundle or a callable on single ``[-1, 1]`` patches.
    """
    if not callable(predict):
        predict = bundle_predictor(predict)
    patches = patch_retinal(image, size, patch)
    soft = stitch_patches(np.stack([predict(p) for p in patches]))
    return SegmentationResult(soft=soft[None], binary=(soft >= threshold).astype(np.uint8)[None], t_a=0,
                              threshold=threshold)
