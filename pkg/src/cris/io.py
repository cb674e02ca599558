"""Raster load/save for images, masks and probability maps."""

from __future__ import annotations

from pathlib import Path
from typing import Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import UnreadableFileError
from .tensors import ImageTensor, MaskTensor, ProbMap

PathLike = Union[str, Path]


def _open(path: PathLike, mode: str) -> Image.Image:
    try:
        with Image.open(path) as img:
            return img.convert(mode)
    except (UnidentifiedImageError, OSError) as exc:
        raise UnreadableFileError(f"Cannot read {path}: {exc}") from exc


def load_image(path: PathLike, size: Tuple[int, int]) -> ImageTensor:
    """Load an RGB raster, bilinear-resize to (H, W) and scale to [0, 1]."""
    h, w = size
    img = _open(path, "RGB").resize((w, h), Image.Resampling.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return ImageTensor(arr.transpose(2, 0, 1))


def load_mask(path: PathLike, size: Tuple[int, int]) -> MaskTensor:
    """Load a mask raster, nearest-resize to (H, W) and binarize at 0.5."""
    h, w = size
    img = _open(path, "L").resize((w, h), Image.Resampling.NEAREST)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return MaskTensor((arr >= 0.5).astype(np.float32)[None])


def to_uint8(arr: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to [0, 255] bytes with a fixed linear scale."""
    return np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def image_to_pil(img: ImageTensor) -> Image.Image:
    return Image.fromarray(to_uint8(img.data.transpose(1, 2, 0)), "RGB")


def map_to_pil(m: Union[MaskTensor, ProbMap, np.ndarray]) -> Image.Image:
    """Grayscale image of a (1, H, W) map: 0 is black, 1 is white."""
    arr = m.data if isinstance(m, (MaskTensor, ProbMap)) else np.asarray(m)
    return Image.fromarray(to_uint8(arr.reshape(arr.shape[-2:])), "L")


def save_image(img: ImageTensor, path: PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image_to_pil(img).save(str(path))


def save_mask(mask: Union[MaskTensor, ProbMap], path: PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    map_to_pil(mask).save(str(path))
