"""Dataset layout, loading, augmentation, retinal patching, noise corruption
and the synthetic smoke corpus.

On-disk layout (all images 8-bit single-channel PNG)::

    ROOT/
      angiograms/      contrast frames
      backgrounds/     pre-contrast frames (training only)
      fractals/        fractal masks (training only)
      masks/           ground truth, same file name as the angiogram
      splits/train.txt, splits/val.txt, splits/test.txt
                       angiogram file names, one per line

When ``splits/train.txt`` is missing every angiogram is a training image.
Files sharing the prefix before ``__`` in their name come from one
acquisition; the loader never pairs an angiogram with a background from the
same acquisition.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .fractal import FractalSpec, synthesize_fractal_mask

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".jpg", ".jpeg", ".bmp", ".gif", ".ppm")
RETINAL_SIZE = 768
PATCH = 256


def normalize(img_u8: np.ndarray) -> np.ndarray:
    """0-255 intensities to ``[-1, 1]``."""
    return (np.asarray(img_u8, dtype=np.float32) / 127.5 - 1.0).astype(np.float32)


def denormalize(x: np.ndarray) -> np.ndarray:
    """``[-1, 1]`` back to the 0-255 scale as floats (not rounded)."""
    return (np.asarray(x, dtype=np.float64) + 1.0) * 127.5


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(denormalize(x)), 0, 255).astype(np.uint8)


def read_gray(path, size: int | None = None, resample=Image.BILINEAR) -> np.ndarray:
    """Read an image as 8-bit grayscale; RGB uses the ITU-R 601 luma weights."""
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), resample)
            return np.asarray(im, dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise IOError(f"cannot decode image {path}: {exc}") from exc


def read_mask(path, size: int | None = None) -> np.ndarray:
    return (read_gray(path, size, resample=Image.NEAREST) > 127).astype(np.uint8)


def write_png(path, img_u8: np.ndarray) -> None:
    Image.fromarray(np.asarray(img_u8, dtype=np.uint8), mode="L").save(path, format="PNG")


def list_images(folder: Path) -> list[Path]:
    if not folder.is_dir():
        return []
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def acquisition_id(name: str) -> str:
    stem = Path(name).stem
    return stem.split("__", 1)[0] if "__" in stem else stem


@dataclass
class DatasetLayout:
    root: Path
    angiograms: str = "angiograms"
    backgrounds: str = "backgrounds"
    fractals: str = "fractals"
    masks: str = "masks"
    splits: dict = field(default_factory=dict)

    @classmethod
    def open(cls, root) -> "DatasetLayout":
        root = Path(root)
        if not root.is_dir():
            raise FileNotFoundError(f"dataset root not found: {root}")
        layout = cls(root=root)
        for split in ("train", "val", "test"):
            manifest = root / "splits" / f"{split}.txt"
            if manifest.is_file():
                names = [ln.strip() for ln in manifest.read_text().splitlines() if ln.strip()]
                layout.splits[split] = names
        return layout

    def dir(self, kind: str) -> Path:
        return self.root / getattr(self, kind)

    def split_names(self, split: str) -> list[str]:
        if split in self.splits:
            return list(self.splits[split])
        if split == "train":
            return [p.name for p in list_images(self.dir("angiograms"))]
        return []

    def training_files(self) -> tuple[list[Path], list[Path], list[Path]]:
        angio = [self.dir("angiograms") / n for n in self.split_names("train")]
        backgrounds = list_images(self.dir("backgrounds"))
        fractals = list_images(self.dir("fractals"))
        for kind, files in (("angiograms", angio), ("backgrounds", backgrounds), ("fractals", fractals)):
            if not files:
                raise FileNotFoundError(f"training split has no {kind} under {self.root}")
            missing = [p for p in files if not p.is_file()]
            if missing:
                raise FileNotFoundError(f"missing {kind} file {missing[0]}")
        return angio, backgrounds, fractals

    def labeled_pairs(self, split: str) -> list[tuple[Path, Path]]:
        names = self.split_names(split)
        pairs = []
        for name in names:
            img = self.dir("angiograms") / name
            gt = self.dir("masks") / name
            if not gt.is_file():
                alt = list(self.dir("masks").glob(Path(name).stem + ".*"))
                if not alt:
                    raise FileNotFoundError(f"no ground-truth mask for {name} in {self.dir('masks')}")
                gt = alt[0]
            if not img.is_file():
                raise FileNotFoundError(f"missing angiogram {img}")
            pairs.append((img, gt))
        return pairs


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------


def random_transform(rng: np.random.Generator) -> tuple[bool, bool, int]:
    return bool(rng.integers(2)), bool(rng.integers(2)), int(rng.integers(4))


def apply_transform(img: np.ndarray, transform) -> np.ndarray:
    hflip, vflip, k = transform
    out = img
    if hflip:
        out = out[:, ::-1]
    if vflip:
        out = out[::-1, :]
    return np.ascontiguousarray(np.rot90(out, k))


def augment(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return apply_transform(img, random_transform(rng))


def augment_pair(img: np.ndarray, mask: np.ndarray, rng: np.random.Generator):
    t = random_transform(rng)
    return apply_transform(img, t), apply_transform(mask, t)


# --------------------------------------------------------------------------
# training batches
# --------------------------------------------------------------------------


class TrainingData:
    """In-memory training images with deterministic, independent sampling.

    Batch ``b`` of epoch ``e`` depends only on ``(seed, e, b)``, so a
    resumed run sees the same batches as an uninterrupted one.
    """

    def __init__(self, angiograms, backgrounds, fractals, seed: int = 0, augment: bool = True,
                 angio_ids=None, background_ids=None):
        self.angiograms = np.asarray(angiograms, dtype=np.float32)
        self.backgrounds = np.asarray(backgrounds, dtype=np.float32)
        self.fractals = np.asarray(fractals, dtype=np.float32)
        self.seed = int(seed)
        self.augment = augment
        self.angio_ids = list(angio_ids) if angio_ids is not None else [f"a{i}" for i in range(len(self.angiograms))]
        self.background_ids = (list(background_ids) if background_ids is not None
                               else [f"b{i}" for i in range(len(self.backgrounds))])
        for name, arr in (("angiograms", self.angiograms), ("backgrounds", self.backgrounds),
                          ("fractals", self.fractals)):
            if len(arr) == 0:
                raise ValueError(f"no {name}")

    @classmethod
    def from_layout(cls, layout: DatasetLayout, size: int, seed: int = 0, augment: bool = True,
                    backgrounds_from_angiograms: bool = False) -> "TrainingData":
        angio, backgrounds, fractals = layout.training_files()
        if backgrounds_from_angiograms:
            backgrounds = angio
        return cls(
            [normalize(read_gray(p, size)) for p in angio],
            [normalize(read_gray(p, size)) for p in backgrounds],
            [read_mask(p, size).astype(np.float32) for p in fractals],
            seed=seed, augment=augment,
            angio_ids=[acquisition_id(p.name) for p in angio],
            background_ids=[acquisition_id(p.name) for p in backgrounds],
        )

    def steps_per_epoch(self, batch_size: int) -> int:
        return -(-len(self.angiograms) // batch_size)

    def _permutation(self, stream: int, epoch: int, n: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, stream, epoch])
        return rng.permutation(n)

    def batch_indices(self, epoch: int, index: int, batch_size: int):
        """Index triples for one batch; the three streams are independent."""
        out = []
        for stream, n in enumerate((len(self.angiograms), len(self.backgrounds), len(self.fractals))):
            pos = np.arange(index * batch_size, (index + 1) * batch_size)
            # draw as many permutations as needed to cover the positions
            perms = [self._permutation(stream, epoch * 1000 + r, n) for r in range(pos.max() // n + 1)]
            seq = np.concatenate(perms)
            out.append(seq[pos])
        angio_idx, bg_idx, fr_idx = out
        bg_idx = self._avoid_same_acquisition(angio_idx, bg_idx, epoch, index)
        return angio_idx, bg_idx, fr_idx

    def _avoid_same_acquisition(self, angio_idx, bg_idx, epoch, index):
        bg_idx = bg_idx.copy()
        rng = np.random.default_rng([self.seed, 7, epoch, index])
        n = len(self.backgrounds)
        for j, (a, b) in enumerate(zip(angio_idx, bg_idx)):
            tries = 0
            while self.background_ids[b] == self.angio_ids[a] and tries < 4 * n:
                b = int(rng.integers(n))
                tries += 1
            if self.background_ids[b] == self.angio_ids[a]:
                raise ValueError(f"every background shares acquisition {self.angio_ids[a]!r}")
            bg_idx[j] = b
        return bg_idx

    def batch(self, epoch: int, index: int, batch_size: int):
        """``(angiograms, backgrounds, fractal masks)``, each ``(B, 1, H, W)`` float32."""
        ai, bi, fi = self.batch_indices(epoch, index, batch_size)
        rng = np.random.default_rng([self.seed, 99, epoch, index])
        out = []
        for source, idx in ((self.angiograms, ai), (self.backgrounds, bi), (self.fractals, fi)):
            imgs = [augment(source[i], rng) if self.augment else source[i] for i in idx]
            out.append(np.stack(imgs)[:, None].astype(np.float32))
        return tuple(out)


def load_training_batch(layout_or_data, batch_size: int, rng: np.random.Generator, size: int = 256):
    """One independently shuffled, augmented batch of each training role."""
    data = layout_or_data
    if isinstance(layout_or_data, DatasetLayout):
        data = TrainingData.from_layout(layout_or_data, size, seed=int(rng.integers(2**31)))
    epoch = int(rng.integers(2**31))
    return data.batch(epoch, 0, batch_size)


# --------------------------------------------------------------------------
# retinal patching and corruption
# --------------------------------------------------------------------------


def resize_gray(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a 2-D float array."""
    if img.shape == (size, size):
        return np.asarray(img, dtype=np.float32)
    im = Image.fromarray(np.asarray(img, dtype=np.float32), mode="F")
    return np.asarray(im.resize((size, size), Image.BILINEAR), dtype=np.float32)


def patch_retinal(image: np.ndarray, size: int = RETINAL_SIZE, patch: int = PATCH) -> np.ndarray:
    """Resize to ``size`` and cut a non-overlapping grid; returns ``(n*n, patch, patch)`` in row-major order."""
    img = resize_gray(image, size)
    n = size // patch
    return img.reshape(n, patch, n, patch).transpose(0, 2, 1, 3).reshape(n * n, patch, patch)


def stitch_patches(patches: np.ndarray) -> np.ndarray:
    patches = np.asarray(patches)
    n = int(round(np.sqrt(len(patches))))
    if n * n != len(patches):
        raise ValueError(f"{len(patches)} patches do not form a square grid")
    p = patches.shape[-1]
    return patches.reshape(n, n, p, p).transpose(0, 2, 1, 3).reshape(n * p, n * p)


def gaussian_noise(shape, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape)


def corrupt_gaussian(image: np.ndarray, sigma: float, rng=None, noise: np.ndarray | None = None) -> np.ndarray:
    """Add N(0, sigma^2) on the 0-255 scale and clip to [0, 255].

    Pass ``noise`` (standard normal, image-shaped) to reuse one draw across
    several sigma levels.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    img = np.asarray(image, dtype=np.float64)
    if sigma == 0:
        return img.copy()
    if noise is None:
        rng = rng if rng is not None else np.random.default_rng()
        noise = rng.standard_normal(img.shape)
    return np.clip(img + sigma * noise, 0.0, 255.0)


# --------------------------------------------------------------------------
# smoke corpus
# --------------------------------------------------------------------------


SMOKE_FRACTAL = FractalSpec(canvas_size=64, thickness_range=(3.0, 5.0), root_length=0.35)


def _smooth_background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    base = rng.uniform(150, 200)
    gx, gy = rng.uniform(-30, 30, size=2)
    img = base + gx * (xx - 0.5) + gy * (yy - 0.5)
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = rng.uniform(0, 1, size=2)
        r = rng.uniform(0.06, 0.2)
        amp = rng.uniform(-35, 25)
        img += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))
    img += rng.normal(0, 2.0, size=img.shape)
    return np.clip(img, 0, 255)


def make_smoke_corpus(out_dir, seed: int = 0, size: int = 64, n_angiograms: int = 16,
                      n_backgrounds: int = 16, n_fractals: int = 32, n_val: int = 4,
                      vessel_contrast: float = 80.0) -> Path:
    """Write a small synthetic dataset under ``out_dir`` and return its root.

    Angiograms are separate backgrounds darkened along a fractal mask, which
    is saved as their ground truth.  Fractal pseudo-labels use other seeds.
    """
    if max(n_angiograms, n_backgrounds, n_fractals) > 32:
        raise ValueError("smoke corpus counts are capped at 32")
    root = Path(out_dir)
    for sub in ("angiograms", "backgrounds", "fractals", "masks", "splits"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    spec = FractalSpec(**{**SMOKE_FRACTAL.__dict__, "canvas_size": size})
    ss = np.random.SeedSequence(seed)
    bg_seed, angio_seed, fr_seed = ss.spawn(3)

    rng = np.random.default_rng(bg_seed)
    for i in range(n_backgrounds):
        write_png(root / "backgrounds" / f"bg{i:03d}__frame0.png", np.rint(_smooth_background(rng, size)))

    rng = np.random.default_rng(angio_seed)
    names = []
    for i in range(n_angiograms):
        mask = synthesize_fractal_mask(spec.with_seed(10_000 + 1000 * seed + i))
        img = _smooth_background(rng, size)
        img = np.where(mask > 0, img - vessel_contrast, img)
        name = f"ang{i:03d}__frame1.png"
        write_png(root / "angiograms" / name, np.rint(np.clip(img, 0, 255)))
        write_png(root / "masks" / name, mask * 255)
        names.append(name)

    fr_base = int(fr_seed.generate_state(1)[0])
    for i in range(n_fractals):
        mask = synthesize_fractal_mask(spec.with_seed(fr_base + i))
        write_png(root / "fractals" / f"fractal_{i:06d}.png", mask * 255)

    (root / "splits" / "train.txt").write_text("\n".join(names) + "\n")
    (root / "splits" / "val.txt").write_text("\n".join(names[:n_val]) + "\n")
    (root / "splits" / "test.txt").write_text("\n".join(names) + "\n")
    meta = {"kind": "smoke", "seed": seed, "size": size, "angiograms": n_angiograms,
            "backgrounds": n_backgrounds, "fractals": n_fractals, "val": n_val,
            "vessel_contrast": vessel_contrast}
    (root / "corpus.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    log.info("smoke corpus written to %s", root)
    return root
