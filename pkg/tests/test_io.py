"""Tests for raster load/save."""

from __future__ import annotations

import numpy as np
import pytest
from PIL import Image

from cris.errors import UnreadableFileError
from cris.io import load_image, load_mask, map_to_pil, save_mask, to_uint8
from cris.tensors import MaskTensor, ProbMap


def test_to_uint8_fixed_scale():
    assert to_uint8(np.array([0.0, 0.5, 1.0])).tolist() == [0, 128, 255]


def test_load_image_scales_and_resizes(tmp_path):
    Image.new("RGB", (20, 10), (255, 0, 51)).save(tmp_path / "a.png")
    img = load_image(tmp_path / "a.png", (16, 32))
    assert img.shape == (3, 16, 32)
    assert img.data[:, 0, 0].tolist() == pytest.approx([1.0, 0.0, 0.2])


def test_load_mask_binarizes(tmp_path):
    arr = np.array([[0, 100], [128, 255]], dtype=np.uint8)
    Image.fromarray(arr, "L").save(tmp_path / "m.png")
    mask = load_mask(tmp_path / "m.png", (2, 2))
    assert mask.data[0].tolist() == [[0.0, 0.0], [1.0, 1.0]]


def test_mask_round_trip(tmp_path):
    mask = MaskTensor((np.random.default_rng(0).uniform(0, 1, (1, 16, 16)) > 0.5).astype(np.float32))
    save_mask(mask, tmp_path / "sub" / "m.png")
    assert load_mask(tmp_path / "sub" / "m.png", (16, 16)) == mask


def test_map_to_pil_black_to_white():
    pil = map_to_pil(ProbMap(np.array([[[0.0, 1.0]]])))
    assert pil.mode == "L"
    assert list(pil.getdata()) == [0, 255]


def test_unreadable(tmp_path):
    (tmp_path / "x.png").write_bytes(b"garbage")
    with pytest.raises(UnreadableFileError):
        load_image(tmp_path / "x.png", (16, 16))
