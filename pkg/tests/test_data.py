"""Tests for dataset loading, splitting and the synthetic generator."""

from __future__ import annotations

import numpy as np
import pytest
from PIL import Image

from cris.data import (
    DatasetLayout,
    SplitSpec,
    load_dataset,
    split_dataset,
    split_indices,
    synth_shapes,
    write_dataset,
)
from cris.errors import (
    ConfigError,
    DatasetTooSmallError,
    DuplicateSampleError,
    EmptyDatasetError,
    UnpairedStemError,
    UnreadableFileError,
)


def _write_pair(root, stem, images="images", masks="masks", size=(40, 40)):
    (root / images).mkdir(parents=True, exist_ok=True)
    (root / masks).mkdir(parents=True, exist_ok=True)
    rgb = np.zeros((*size, 3), dtype=np.uint8)
    rgb[..., 0] = 200
    Image.fromarray(rgb, "RGB").save(root / images / f"{stem}.png")
    m = np.zeros(size, dtype=np.uint8)
    m[5:20, 5:20] = 255
    Image.fromarray(m, "L").save(root / masks / f"{stem}.png")


class TestSplit:
    @pytest.mark.parametrize("n,counts", [(1000, (700, 150, 150)), (612, (428, 91, 93)),
                                          (10, (7, 1, 2)), (3, (2, 0, 1))])
    def test_counts(self, n, counts):
        assert SplitSpec().counts(n) == counts
        train, val, test = split_indices(n, SplitSpec())
        assert (len(train), len(val), len(test)) == counts

    @pytest.mark.parametrize("n", [3, 7, 20, 50, 101])
    def test_disjoint_and_exhaustive(self, n):
        train, val, test = split_indices(n, SplitSpec(seed=n))
        assert sorted(train + val + test) == list(range(n))

    def test_seed_reproducible(self):
        assert split_indices(50, SplitSpec(seed=3)) == split_indices(50, SplitSpec(seed=3))
        assert split_indices(50, SplitSpec(seed=3)) != split_indices(50, SplitSpec(seed=4))

    def test_uses_pcg64_permutation(self):
        perm = np.random.default_rng(0).permutation(20).tolist()
        train, val, test = split_indices(20, SplitSpec(seed=0))
        assert train + val + test == perm

    def test_too_small(self):
        with pytest.raises(DatasetTooSmallError):
            split_indices(2, SplitSpec())

    def test_fractions_must_sum_to_one(self):
        with pytest.raises(ConfigError):
            SplitSpec(0.7, 0.2, 0.2)

    def test_split_dataset_names(self, synth32):
        splits = split_dataset(synth32)
        assert [len(s) for s in splits] == [11, 2, 3]
        assert splits.train.name == "synth/train"
        assignments = splits.assignments()
        assert [sid for sid, _ in assignments] == sorted(synth32.ids)
        assert {split for _, split in assignments} == {"train", "val", "test"}


class TestLoad:
    def test_round_trip(self, tmp_path):
        d = synth_shapes(4, (32, 32), seed=2)
        write_dataset(d, tmp_path)
        loaded = load_dataset(DatasetLayout.for_root(tmp_path), (32, 32))
        assert loaded.ids == d.ids
        for a, b in zip(d, loaded):
            assert a.mask == b.mask
            assert np.abs(a.image.data - b.image.data).max() <= 0.5 / 255 + 1e-6

    def test_sorted_by_stem_and_resized(self, tmp_path):
        for stem in ("c", "a", "b"):
            _write_pair(tmp_path, stem)
        d = load_dataset(DatasetLayout.for_root(tmp_path), (32, 48))
        assert d.ids == ["a", "b", "c"]
        assert d[0].image.shape == (3, 32, 48)
        assert d[0].mask.shape == (1, 32, 48)
        assert set(np.unique(d[0].mask.data)) == {0.0, 1.0}

    def test_unpaired(self, tmp_path):
        _write_pair(tmp_path, "001")
        _write_pair(tmp_path, "007")
        (tmp_path / "masks" / "007.png").unlink()
        with pytest.raises(UnpairedStemError, match="'007'") as exc:
            load_dataset(DatasetLayout.for_root(tmp_path), (32, 32))
        assert exc.value.stem == "007"

    def test_empty(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "masks").mkdir()
        with pytest.raises(EmptyDatasetError):
            load_dataset(DatasetLayout.for_root(tmp_path), (32, 32))

    def test_missing_folder(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(DatasetLayout.for_root(tmp_path), (32, 32))

    def test_unreadable(self, tmp_path):
        _write_pair(tmp_path, "a")
        (tmp_path / "images" / "a.png").write_bytes(b"not a png")
        with pytest.raises(UnreadableFileError):
            load_dataset(DatasetLayout.for_root(tmp_path), (32, 32))

    def test_duplicate_stem(self, tmp_path):
        _write_pair(tmp_path, "a")
        Image.new("RGB", (40, 40)).save(tmp_path / "images" / "a.jpg")
        with pytest.raises(DuplicateSampleError):
            load_dataset(DatasetLayout.for_root(tmp_path), (32, 32))

    def test_cvc_folder_names(self, tmp_path):
        _write_pair(tmp_path, "1", images="Original", masks="Ground Truth")
        layout = DatasetLayout.for_root(tmp_path, "cvc")
        assert layout.images_dir.name == "Original"
        assert len(load_dataset(layout, (32, 32))) == 1

    def test_unknown_kind(self, tmp_path):
        with pytest.raises(ConfigError):
            DatasetLayout.for_root(tmp_path, "isic")


class TestSynth:
    def test_coverage_and_shapes(self):
        d = synth_shapes(200, (64, 64), seed=1)
        assert len(d) == 200
        for s in d:
            assert s.image.shape == (3, 64, 64)
            assert 0.01 <= s.mask.data.mean() <= 0.60

    def test_deterministic(self):
        a = synth_shapes(5, (32, 32), seed=3)
        b = synth_shapes(5, (32, 32), seed=3)
        assert all(x.image == y.image and x.mask == y.mask for x, y in zip(a, b))
        c = synth_shapes(5, (32, 32), seed=4)
        assert a[0].image != c[0].image

    def test_polyp_brighter_than_background(self):
        s = synth_shapes(1, (64, 64), seed=0)[0]
        red = s.image.data[0]
        inside = s.mask.data[0] > 0
        assert red[inside].mean() > red[~inside].mean()

    @pytest.mark.parametrize("kwargs", [{"n": 0}, {"n": 2, "size": (16, 16)}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            synth_shapes(**kwargs)
