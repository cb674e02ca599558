"""Immutable array containers: images, masks, probability maps and datasets.

All containers wrap a read-only float32 NumPy array in channels-first
layout. Constructors validate by default; pass ``check=False`` to wrap raw
data and defer validation to :func:`validate_pair`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, List, Sequence, Tuple, Union

import numpy as np

from .errors import (
    DuplicateSampleError,
    InvalidThresholdError,
    NonBinaryMaskError,
    OutOfRangePixelError,
    ShapeMismatchError,
)

MIN_IMAGE_SIZE = 16


def _freeze(data: np.ndarray) -> np.ndarray:
    arr = np.array(data, dtype=np.float32, copy=True)
    arr.setflags(write=False)
    return arr


def _check_channels(arr: np.ndarray, channels: int, kind: str) -> None:
    if arr.ndim != 3 or arr.shape[0] != channels:
        raise ShapeMismatchError(
            f"{kind} expects shape ({channels}, H, W), got {arr.shape}"
        )


def _check_unit_range(arr: np.ndarray, kind: str) -> None:
    bad = ~((arr >= 0.0) & (arr <= 1.0))
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise OutOfRangePixelError(
            f"{kind} value {arr[idx]!r} at {idx} outside [0, 1]"
        )


def _check_binary(arr: np.ndarray) -> None:
    bad = (arr != 0.0) & (arr != 1.0)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonBinaryMaskError(f"Mask value {arr[idx]!r} at {idx} is not 0 or 1")


class _Array:
    """Shared behaviour of the single-array containers."""

    __slots__ = ("_data",)

    def __init__(self, data: np.ndarray) -> None:
        self._data = _freeze(data)

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def height(self) -> int:
        return self._data.shape[-2]

    @property
    def width(self) -> int:
        return self._data.shape[-1]

    @property
    def size(self) -> Tuple[int, int]:
        """(H, W)."""
        return (self.height, self.width)

    def __eq__(self, other: object) -> bool:
        if type(other) is not type(self):
            return NotImplemented
        return np.array_equal(self._data, other._data)

    def __hash__(self) -> int:
        return hash((type(self).__name__, self._data.shape, self._data.tobytes()))

    def __repr__(self) -> str:
        return f"{type(self).__name__}({'x'.join(str(s) for s in self.shape)})"


class ImageTensor(_Array):
    """RGB image, shape (3, H, W), values in [0, 1], H and W at least 16."""

    __slots__ = ()

    def __init__(self, data: np.ndarray, *, check: bool = True) -> None:
        super().__init__(data)
        if check:
            _check_image(self._data)


class MaskTensor(_Array):
    """Binary ground-truth or thresholded mask, shape (1, H, W)."""

    __slots__ = ()

    def __init__(self, data: np.ndarray, *, check: bool = True) -> None:
        super().__init__(data)
        if check:
            _check_channels(self._data, 1, "MaskTensor")
            _check_binary(self._data)

    @property
    def positives(self) -> int:
        return int(self._data.sum())


class ProbMap(_Array):
    """Per-pixel foreground probability, shape (1, H, W), values in [0, 1]."""

    __slots__ = ()

    def __init__(self, data: np.ndarray, *, check: bool = True) -> None:
        super().__init__(data)
        if check:
            _check_channels(self._data, 1, "ProbMap")
            _check_unit_range(self._data, "ProbMap")

    @classmethod
    def from_mask(cls, mask: MaskTensor) -> ProbMap:
        return cls(mask.data)


def _check_image(arr: np.ndarray) -> None:
    _check_channels(arr, 3, "ImageTensor")
    h, w = arr.shape[1:]
    if h < MIN_IMAGE_SIZE or w < MIN_IMAGE_SIZE:
        raise ShapeMismatchError(
            f"ImageTensor must be at least {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}, got {h}x{w}"
        )
    _check_unit_range(arr, "Pixel")


ArrayLike = Union[_Array, np.ndarray]


def as_array(x: ArrayLike) -> np.ndarray:
    """Unwrap a container, or pass an ndarray through."""
    if isinstance(x, _Array):
        return x.data
    return np.asarray(x)


@dataclass(frozen=True)
class Sample:
    """One (image, mask) training pair."""
    id: str
    image: ImageTensor
    mask: MaskTensor


class Dataset:
    """Ordered, immutable collection of samples with unique ids."""

    __slots__ = ("_samples", "_name", "_index")

    def __init__(self, samples: Sequence[Sample], name: str = "dataset") -> None:
        self._samples: Tuple[Sample, ...] = tuple(samples)
        self._name = name
        self._index = {}
        for i, s in enumerate(self._samples):
            if s.id in self._index:
                raise DuplicateSampleError(f"Sample id {s.id!r} appears twice in {name!r}")
            self._index[s.id] = i

    @property
    def name(self) -> str:
        return self._name

    @property
    def samples(self) -> Tuple[Sample, ...]:
        return self._samples

    @property
    def ids(self) -> List[str]:
        return [s.id for s in self._samples]

    def __len__(self) -> int:
        return len(self._samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self._samples)

    def __getitem__(self, i: int) -> Sample:
        return self._samples[i]

    def get(self, sample_id: str) -> Sample:
        try:
            return self._samples[self._index[sample_id]]
        except KeyError:
            raise KeyError(f"Sample {sample_id!r} not in {self._name!r}")

    def subset(self, indices: Sequence[int], name: str) -> Dataset:
        return Dataset([self._samples[i] for i in indices], name=name)

    def images(self) -> np.ndarray:
        """Stacked images, shape (N, 3, H, W)."""
        return np.stack([s.image.data for s in self._samples])

    def masks(self) -> np.ndarray:
        """Stacked masks, shape (N, 1, H, W)."""
        return np.stack([s.mask.data for s in self._samples])

    def __repr__(self) -> str:
        return f"Dataset({self._name!r}, n={len(self._samples)})"


def binarize(p: ArrayLike, t: float) -> MaskTensor:
    """Threshold a probability map: 1 where p >= t."""
    if not 0.0 <= t <= 1.0:
        raise InvalidThresholdError(f"Threshold must be in [0, 1], got {t!r}")
    arr = as_array(p)
    return MaskTensor((arr >= t).astype(np.float32), check=False)


def validate_pair(s: Sample) -> None:
    """Check shape agreement, pixel range and mask binarity. Raises on failure."""
    img = s.image.data
    mask = s.mask.data
    _check_channels(img, 3, "ImageTensor")
    _check_channels(mask, 1, "MaskTensor")
    if img.shape[1:] != mask.shape[1:]:
        raise ShapeMismatchError(
            f"Sample {s.id!r}: image {img.shape[1]}x{img.shape[2]} vs "
            f"mask {mask.shape[1]}x{mask.shape[2]}"
        )
    _check_image(img)
    _check_binary(mask)
