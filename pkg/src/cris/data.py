"""Dataset ingestion, deterministic splitting and synthetic data.

Splits use NumPy's PCG64 generator (``numpy.random.default_rng(seed)``),
whose permutation stream is identical across platforms and NumPy >= 1.17.
Counts follow floor/floor/remainder: ``n_train = floor(0.70 N)``,
``n_val = floor(0.15 N)``, ``n_test = N - n_train - n_val``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw

from .errors import (
    ConfigError,
    DatasetTooSmallError,
    DuplicateSampleError,
    EmptyDatasetError,
    UnpairedStemError,
)
from .io import load_image, load_mask, save_image, save_mask
from .tensors import Dataset, ImageTensor, MaskTensor, Sample, validate_pair

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}

DEFAULT_SIZE: Tuple[int, int] = (128, 128)

# Folder names tried in order for each dataset kind
_LAYOUT_CANDIDATES: Dict[str, Tuple[Tuple[str, ...], Tuple[str, ...]]] = {
    "kvasir": (("images",), ("masks",)),
    "cvc": (("images", "Original"), ("masks", "Ground Truth")),
    "synth": (("images",), ("masks",)),
}


@dataclass(frozen=True)
class DatasetLayout:
    """Image and mask folders; files pair by identical stem."""
    images_dir: Path
    masks_dir: Path

    @classmethod
    def for_root(cls, root: Union[str, Path], kind: str = "kvasir") -> DatasetLayout:
        root = Path(root)
        if kind not in _LAYOUT_CANDIDATES:
            raise ConfigError(
                f"Unknown dataset kind {kind!r}; expected one of {sorted(_LAYOUT_CANDIDATES)}"
            )
        image_names, mask_names = _LAYOUT_CANDIDATES[kind]

        def pick(names: Tuple[str, ...]) -> Path:
            for n in names:
                if (root / n).is_dir():
                    return root / n
            return root / names[0]

        return cls(images_dir=pick(image_names), masks_dir=pick(mask_names))


def _index_dir(directory: Path) -> Dict[str, Path]:
    if not directory.is_dir():
        raise FileNotFoundError(f"Directory not found: {directory}")
    index: Dict[str, Path] = {}
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() not in IMAGE_SUFFIXES or path.name.startswith("."):
            continue
        if path.stem in index:
            raise DuplicateSampleError(
                f"Stem {path.stem!r} appears twice in {directory}: "
                f"{index[path.stem].name}, {path.name}"
            )
        index[path.stem] = path
    return index


def load_dataset(
    layout: DatasetLayout,
    target_size: Tuple[int, int] = DEFAULT_SIZE,
    *,
    name: Optional[str] = None,
    workers: int = 4,
) -> Dataset:
    """Load every image/mask pair, sorted by stem.

    Files decode on a thread pool; sample order is the sorted-stem order
    regardless of completion order.
    """
    images = _index_dir(layout.images_dir)
    masks = _index_dir(layout.masks_dir)
    for stem in sorted(images):
        if stem not in masks:
            raise UnpairedStemError(stem, "mask")
    for stem in sorted(masks):
        if stem not in images:
            raise UnpairedStemError(stem, "image")
    stems = sorted(images)
    if not stems:
        raise EmptyDatasetError(f"No image/mask pairs under {layout.images_dir}")

    def load(stem: str) -> Sample:
        s = Sample(
            id=stem,
            image=load_image(images[stem], target_size),
            mask=load_mask(masks[stem], target_size),
        )
        validate_pair(s)
        return s

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        samples = list(pool.map(load, stems))
    name = name or layout.images_dir.parent.name
    logger.info("Loaded %d samples from %s at %dx%d", len(samples), layout.images_dir, *target_size)
    return Dataset(samples, name=name)


def write_dataset(d: Dataset, root: Union[str, Path]) -> Path:
    """Write a dataset as ``images/`` + ``masks/`` PNG trees."""
    root = Path(root)
    for s in d:
        save_image(s.image, root / "images" / f"{s.id}.png")
        save_mask(s.mask, root / "masks" / f"{s.id}.png")
    return root


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.70
    val_frac: float = 0.15
    test_frac: float = 0.15
    seed: int = 0

    def __post_init__(self) -> None:
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f < 0 for f in fracs):
            raise ConfigError(f"Split fractions must be non-negative, got {fracs}")
        if not math.isclose(sum(fracs), 1.0, abs_tol=1e-9):
            raise ConfigError(f"Split fractions must sum to 1.0, got {sum(fracs)!r}")

    def counts(self, n: int) -> Tuple[int, int, int]:
        # round() guards products like 0.7 * 10 = 7.000000000000001 from
        # drifting below an integer boundary
        n_train = math.floor(round(self.train_frac * n, 9))
        n_val = math.floor(round(self.val_frac * n, 9))
        return n_train, n_val, n - n_train - n_val


class DatasetSplits(NamedTuple):
    train: Dataset
    val: Dataset
    test: Dataset

    def assignments(self) -> List[Tuple[str, str]]:
        """(sample id, split name) pairs sorted by id."""
        rows = [(sid, split) for split, d in zip(self._fields, self) for sid in d.ids]
        return sorted(rows)


def split_indices(n: int, spec: SplitSpec) -> Tuple[List[int], List[int], List[int]]:
    if n < 3:
        raise DatasetTooSmallError(f"Need at least 3 samples to split, got {n}")
    n_train, n_val, _ = spec.counts(n)
    perm = np.random.default_rng(spec.seed).permutation(n).tolist()
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def split_dataset(d: Dataset, spec: SplitSpec = SplitSpec()) -> DatasetSplits:
    train, val, test = split_indices(len(d), spec)
    return DatasetSplits(
        train=d.subset(train, f"{d.name}/train"),
        val=d.subset(val, f"{d.name}/val"),
        test=d.subset(test, f"{d.name}/test"),
    )


def _texture(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray,
             waves: int, freq: Tuple[float, float], amp: float) -> np.ndarray:
    out = np.zeros_like(xx)
    for _ in range(waves):
        fx, fy = rng.uniform(*freq, size=2) * rng.choice([-1.0, 1.0], size=2)
        out += np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
    return amp * out / waves


def _ellipse_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    canvas = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(canvas)
    for _ in range(int(rng.integers(1, 4))):
        cx, cy = rng.uniform(0.15, 0.85) * w, rng.uniform(0.15, 0.85) * h
        rx, ry = rng.uniform(0.08, 0.22) * w, rng.uniform(0.08, 0.22) * h
        draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=255)
    return (np.asarray(canvas) > 0).astype(np.float32)


def _synth_sample(rng: np.random.Generator, h: int, w: int, sample_id: str) -> Sample:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= h
    xx /= w
    while True:
        mask = _ellipse_mask(rng, h, w)
        if 0.01 <= mask.mean() <= 0.60:
            break

    background = rng.uniform([0.45, 0.20, 0.15], [0.65, 0.35, 0.28])[:, None, None]
    background = background + _texture(rng, yy, xx, 3, (0.5, 3.0), 0.08)[None]
    polyp = rng.uniform([0.78, 0.50, 0.38], [0.95, 0.68, 0.52])[:, None, None]
    polyp = polyp + _texture(rng, yy, xx, 2, (4.0, 9.0), 0.06)[None]

    m = mask[None]
    img = background * (1.0 - m) + polyp * m
    img = img + rng.normal(0.0, 0.03, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(id=sample_id, image=ImageTensor(img), mask=MaskTensor(m))


def synth_shapes(
    n: int, size: Tuple[int, int] = (64, 64), seed: int = 0, name: str = "synth"
) -> Dataset:
    """Textured images with 1-3 filled ellipses; masks are the exact ellipse union.

    Every mask covers between 1% and 60% of the image.
    """
    h, w = size
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    if h < 32 or w < 32:
        raise ConfigError(f"Synthetic images must be at least 32x32, got {h}x{w}")
    rng = np.random.default_rng(seed)
    samples = [_synth_sample(rng, h, w, f"{name}_{i:05d}") for i in range(n)]
    for s in samples:
        validate_pair(s)
    return Dataset(samples, name=name)
