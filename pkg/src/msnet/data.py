"""Synthetic polyp-like segmentation data, augmentation and dataset layout.

Dataset directory::

    images/<id>.ppm
    masks/<id>.pgm
    manifest.txt        one "<split> <id>" line per sample
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imageio import read_image, read_mask, write_image, write_mask

SPLITS = ("train", "val", "test")
DIFFICULTY = {
    # contrast shift, noise sigma
    "easy": (0.4, 0.02),
    "medium": (0.2, 0.05),
    "hard": (0.1, 0.08),
}
FG_FRACTION = (0.01, 0.6)
MAX_ROTATION = 15.0
DEFAULT_SCALES = (0.75, 1.0, 1.25)


class DatasetExistsError(FileExistsError):
    pass


@dataclass
class SegmentationSample:
    image: np.ndarray  # 3 x S x S in [0, 1]
    mask: np.ndarray   # 1 x S x S in {0, 1}
    id: str = ""
    blobs: int = 0


def _low_freq_field(rng, size: int, terms: int = 3) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    field = np.zeros((size, size))
    for _ in range(terms):
        fx, fy = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field += np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    return field / terms


def _blob(rng, size: int, n_blobs: int) -> np.ndarray:
    """Star-shaped region whose radius is modulated by a few angular harmonics."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
    r0 = rng.uniform(0.08, 0.22) * size / math.sqrt(n_blobs)
    theta = np.arctan2(yy - cy, xx - cx)
    boundary = np.ones((size, size))
    for k in (2, 3, 4):
        boundary += rng.uniform(0.0, 0.15) * np.sin(k * theta + rng.uniform(0, 2 * np.pi))
    return np.hypot(yy - cy, xx - cx) / r0 < boundary


def generate_sample(seed, size: int = 64, difficulty: str = "easy", sample_id: str = "") -> SegmentationSample:
    """Deterministic image/mask pair drawn from ``seed`` (an int or a sequence of ints)."""
    if size <= 0 or size % 32:
        raise ValueError(f"size must be a positive multiple of 32, got {size}")
    if difficulty not in DIFFICULTY:
        raise ValueError(f"difficulty must be one of {sorted(DIFFICULTY)}, got {difficulty!r}")
    contrast, noise = DIFFICULTY[difficulty]
    rng = np.random.default_rng(seed)
    n_blobs = int(rng.integers(1, 4))
    while True:
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(n_blobs):
            mask |= _blob(rng, size, n_blobs)
        if FG_FRACTION[0] <= mask.mean() <= FG_FRACTION[1]:
            break

    background = rng.uniform(0.2, 0.4, size=3)
    shift = contrast * (1.0 + rng.uniform(-0.1, 0.1, size=3))
    texture = 0.04 * _low_freq_field(rng, size)
    shading = 0.03 * _low_freq_field(rng, size)
    image = background[:, None, None] + texture[None]
    image = image + mask[None] * (shift[:, None, None] + shading[None])
    image = image + rng.normal(0.0, noise, size=image.shape)
    image = np.rint(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    return SegmentationSample(image, mask[None].astype(np.float64), sample_id, n_blobs)


def split_counts(n: int, ratios=(0.8, 0.1, 0.1)) -> list[int]:
    if len(ratios) != len(SPLITS) or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    val = int(round(n * ratios[1]))
    test = int(round(n * ratios[2]))
    return [n - val - test, val, test]


def _sample_seed(seed: int, split: str, index: int) -> list[int]:
    return [seed, SPLITS.index(split), index]


def generate_dataset(out_dir, seed: int = 0, n: int = 100, ratios=(0.8, 0.1, 0.1), size: int = 64,
                     difficulty: str = "easy", force: bool = False) -> dict[str, int]:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise DatasetExistsError(f"output directory {out} is not empty (use --force to overwrite)")
        for sub, pattern in (("images", "*.ppm"), ("masks", "*.pgm")):
            for stale in (out / sub).glob(pattern):
                stale.unlink()
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    counts = dict(zip(SPLITS, split_counts(n, ratios)))
    for split, count in counts.items():
        for i in range(count):
            sample_id = f"{split}_{i:04d}"
            s = generate_sample(_sample_seed(seed, split, i), size, difficulty, sample_id)
            write_image(out / "images" / f"{sample_id}.ppm", s.image)
            write_mask(out / "masks" / f"{sample_id}.pgm", s.mask)
            lines.append(f"{split} {sample_id}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return counts


def read_manifest(root) -> dict[str, list[str]]:
    root = Path(root)
    path = root / "manifest.txt"
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    out: dict[str, list[str]] = {s: [] for s in SPLITS}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2 or parts[0] not in out:
            raise ValueError(f"{path}:{lineno}: expected '<split> <id>', got {line!r}")
        out[parts[0]].append(parts[1])
    return out


def load_split(root, split: str) -> list[SegmentationSample]:
    root = Path(root)
    ids = read_manifest(root).get(split)
    if ids is None:
        raise ValueError(f"unknown split {split!r}")
    return [SegmentationSample(read_image(root / "images" / f"{i}.ppm"),
                               read_mask(root / "masks" / f"{i}.pgm"), i) for i in ids]


# ---------------------------------------------------------------------------
# augmentation


def hflip(sample: SegmentationSample) -> SegmentationSample:
    return SegmentationSample(sample.image[..., ::-1].copy(), sample.mask[..., ::-1].copy(),
                              sample.id, sample.blobs)


def rotate(sample: SegmentationSample, angle: float) -> SegmentationSample:
    """Rotate about the centre with nearest-neighbour resampling; edges replicate."""
    kw = dict(angle=angle, axes=(2, 1), reshape=False, order=0, mode="nearest")
    image = ndimage.rotate(sample.image, **kw)
    mask = (ndimage.rotate(sample.mask, **kw) > 0.5).astype(np.float64)
    return SegmentationSample(image, mask, sample.id, sample.blobs)


def augment(sample: SegmentationSample, rng: np.random.Generator, flip: bool | None = None,
            angle: float | None = None) -> SegmentationSample:
    """Random horizontal flip (p=0.5) then a rotation uniform in [-15, 15] degrees."""
    if flip is None:
        flip = bool(rng.random() < 0.5)
    if angle is None:
        angle = float(rng.uniform(-MAX_ROTATION, MAX_ROTATION))
    out = hflip(sample) if flip else sample
    return rotate(out, angle)


def snap_side(size: int, scale: float) -> int:
    """Nearest multiple of 32 to ``size * scale``; halfway cases round up."""
    return max(32, 32 * int(math.floor(size * scale / 32.0 + 0.5)))


def resize_maps(maps: np.ndarray, height: int, width: int, order: int = 1) -> np.ndarray:
    """Resize the last two axes to ``height x width`` (order 1 bilinear, 0 nearest)."""
    h, w = maps.shape[-2:]
    if (h, w) == (height, width):
        return maps.copy()
    factors = (1,) * (maps.ndim - 2) + (height / h, width / w)
    out = ndimage.zoom(maps, factors, order=order, mode="nearest", grid_mode=True)
    return np.clip(out, 0.0, 1.0)


def resize_images(images: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize of N x C x H x W to N x C x side x side."""
    return resize_maps(images, side, side, order=1)


def resize_masks(masks: np.ndarray, side: int) -> np.ndarray:
    return (resize_maps(masks, side, side, order=0) > 0.5).astype(np.float64)


def fit_samples(samples, side: int) -> list[SegmentationSample]:
    """Samples resized to ``side x side`` (unchanged when they already match)."""
    out = []
    for s in samples:
        if s.image.shape[-1] == side and s.image.shape[-2] == side:
            out.append(s)
        else:
            out.append(SegmentationSample(resize_images(s.image[None], side)[0],
                                          resize_masks(s.mask[None], side)[0], s.id, s.blobs))
    return out


def multiscale_resize(images: np.ndarray, masks: np.ndarray, scale: float) -> tuple[np.ndarray, np.ndarray]:
    side = snap_side(images.shape[-1], scale)
    return resize_images(images, side), resize_masks(masks, side)
