"""Seeded vessel-like fractal masks.

A mask is a branching tree of rectangular strokes.  The root enters from a
random border point aimed roughly at the canvas centre; every stroke spawns
2-3 children rotated by 20-70 degrees either way and shortened by a decay
factor.  Each rectangle is then distorted on its own (random scale and
rotation about its centre) and rasterised by pixel-centre inclusion, so the
result is always binary.

Random streams use numpy's Philox counter-based generator.  The tree layout
draws from ``SeedSequence([seed, 0])``; the distortion of stroke ``i`` draws
from ``SeedSequence([seed, 1, i])``, so a mask depends only on its seed and
spec, on every platform.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class FractalSpec:
    canvas_size: int = 512
    thickness_range: tuple = (15.0, 25.0)
    branch_depth: int = 4
    branches_per_node: tuple = (2, 3)
    rotation_range: tuple = (20.0, 70.0)
    length_decay: float = 0.7
    root_length: float = 0.3  # fraction of the canvas side
    scale_range: tuple = (0.8, 1.2)
    distortion_rotation: float = 15.0
    seed: int = 0

    def validate(self):
        lo, hi = self.thickness_range
        if lo > hi:
            raise ValueError(f"empty thickness range {self.thickness_range}")
        if lo < 1 or hi > self.canvas_size / 4:
            raise ValueError(f"thickness range {self.thickness_range} outside [1, canvas_size/4]")
        if self.branch_depth < 1:
            raise ValueError("branch_depth must be >= 1")
        if self.branches_per_node[0] < 1 or self.branches_per_node[0] > self.branches_per_node[1]:
            raise ValueError(f"bad branches_per_node {self.branches_per_node}")
        if self.scale_range[0] <= 0 or self.scale_range[0] > self.scale_range[1]:
            raise ValueError(f"bad scale_range {self.scale_range}")

    def with_seed(self, seed: int) -> "FractalSpec":
        return replace(self, seed=int(seed))


@dataclass(frozen=True)
class Stroke:
    """A rectangle centred on ``center``; ``length`` runs along ``angle`` (radians)."""

    center: tuple
    length: float
    thickness: float
    angle: float
    depth: int


def _rng(*key) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in key])))


def fractal_strokes(spec: FractalSpec) -> list[Stroke]:
    """Undistorted stroke tree.  Consecutive strokes share end points."""
    spec.validate()
    rng = _rng(spec.seed, 0)
    n = spec.canvas_size
    side = rng.integers(4)
    pos = rng.uniform(0.2, 0.8) * n
    start = [(pos, 0.0), (pos, n - 1.0), (0.0, pos), (n - 1.0, pos)][side]
    centre = np.array([n / 2, n / 2])
    heading = np.arctan2(centre[1] - start[1], centre[0] - start[0]) + np.deg2rad(rng.uniform(-30, 30))

    strokes: list[Stroke] = []
    lo, hi = np.deg2rad(spec.rotation_range)
    stack = [(np.array(start, dtype=float), heading, spec.root_length * n, 1)]
    while stack:
        p0, ang, length, depth = stack.pop(0)
        thickness = rng.uniform(*spec.thickness_range)
        p1 = p0 + length * np.array([np.cos(ang), np.sin(ang)])
        strokes.append(Stroke(center=tuple((p0 + p1) / 2), length=float(length),
                              thickness=float(thickness), angle=float(ang), depth=depth))
        if depth >= spec.branch_depth:
            continue
        k = int(rng.integers(spec.branches_per_node[0], spec.branches_per_node[1] + 1))
        for _ in range(k):
            turn = rng.uniform(lo, hi) * rng.choice([-1.0, 1.0])
            stack.append((p1, ang + turn, length * spec.length_decay, depth + 1))
    return strokes


def distort(stroke: Stroke, spec: FractalSpec, index: int) -> Stroke:
    rng = _rng(spec.seed, 1, index)
    scale = rng.uniform(*spec.scale_range)
    rot = np.deg2rad(rng.uniform(-spec.distortion_rotation, spec.distortion_rotation))
    return replace(stroke, length=stroke.length * scale, thickness=stroke.thickness * scale,
                   angle=stroke.angle + rot)


def rasterize_stroke(stroke: Stroke, canvas: np.ndarray, caps: bool = True) -> None:
    """OR one rectangle into ``canvas`` (indexed ``[y, x]``), in place.

    ``caps`` extends the rectangle by half the thickness at both ends so
    joined strokes overlap.
    """
    n_y, n_x = canvas.shape
    half_len = stroke.length / 2 + (stroke.thickness / 2 if caps else 0.0)
    half_w = stroke.thickness / 2
    cx, cy = stroke.center
    c, s = np.cos(stroke.angle), np.sin(stroke.angle)
    reach = np.hypot(half_len, half_w) + 1
    x0, x1 = max(int(np.floor(cx - reach)), 0), min(int(np.ceil(cx + reach)) + 1, n_x)
    y0, y1 = max(int(np.floor(cy - reach)), 0), min(int(np.ceil(cy + reach)) + 1, n_y)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx, dy = xs - cx, ys - cy
    u = dx * c + dy * s
    v = -dx * s + dy * c
    canvas[y0:y1, x0:x1] |= (np.abs(u) <= half_len) & (np.abs(v) <= half_w)


def render_strokes(strokes, size: int) -> np.ndarray:
    canvas = np.zeros((size, size), dtype=bool)
    for st in strokes:
        rasterize_stroke(st, canvas)
    return canvas


def synthesize_fractal_mask(spec: FractalSpec = FractalSpec()) -> np.ndarray:
    """Binary ``uint8`` mask of shape ``(canvas_size, canvas_size)``."""
    strokes = fractal_strokes(spec)
    distorted = [distort(st, spec, i) for i, st in enumerate(strokes)]
    mask = render_strokes(distorted, spec.canvas_size)
    if not mask.any():
        # every distorted stroke fell off the canvas; fall back to the undistorted tree
        mask = render_strokes(strokes, spec.canvas_size)
    return mask.astype(np.uint8)


def measured_stroke_width(stroke: Stroke, supersample: int = 8) -> float:
    """Raster estimate of a stroke's width: covered area over its length.

    The stroke is drawn alone, uncapped, on an unclipped grid refined by
    ``supersample`` in each direction.
    """
    k = supersample
    pad = int(np.ceil(k * (stroke.length + stroke.thickness))) + 4
    cx, cy = stroke.center
    local = replace(stroke, center=(k * (cx - np.floor(cx)) + pad, k * (cy - np.floor(cy)) + pad),
                    length=k * stroke.length, thickness=k * stroke.thickness)
    canvas = np.zeros((2 * pad + 1, 2 * pad + 1), dtype=bool)
    rasterize_stroke(local, canvas, caps=False)
    return float(canvas.sum()) / (k * k * stroke.length)


def resize_mask(mask: np.ndarray, target: int) -> np.ndarray:
    """Nearest-neighbour resize of a square binary mask."""
    if target < 8:
        raise ValueError("target size must be >= 8")
    n = mask.shape[0]
    idx = nearest_indices(n, target)
    return mask[np.ix_(idx, idx)]


def nearest_indices(source: int, target: int) -> np.ndarray:
    """Source index sampled by each target pixel (pixel-centre alignment)."""
    idx = np.floor((np.arange(target) + 0.5) * source / target).astype(int)
    return np.clip(idx, 0, source - 1)
