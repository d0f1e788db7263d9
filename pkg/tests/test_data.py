"""Dataset generators and the IDX reader."""
import gzip
import struct

import numpy as np
import pytest
from pytest import approx

from bitswitch.data import (
    DatasetSpec,
    gaussian_blobs,
    load_idx_pair,
    read_idx,
    train_eval_split,
    two_moons,
)
from bitswitch.errors import ConfigError, DimensionError


class TestGaussianBlobs:
    def test_shapes_and_dtypes(self):
        x, y = gaussian_blobs(100, classes=4, features=7, seed=0)
        assert x.shape == (100, 7) and x.dtype == np.float32
        assert y.shape == (100,) and y.dtype == np.int64

    def test_same_seed_same_data(self):
        a = gaussian_blobs(50, classes=3, features=2, seed=9)
        b = gaussian_blobs(50, classes=3, features=2, seed=9)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])
        c = gaussian_blobs(50, classes=3, features=2, seed=10)
        assert not np.array_equal(a[0], c[0])

    def test_classes_nearly_balanced(self):
        _, y = gaussian_blobs(103, classes=5, features=3, seed=1)
        counts = np.bincount(y, minlength=5)
        assert counts.min() >= 103 // 5
        assert counts.max() <= -(-103 // 5)

    def test_clusters_are_separable(self):
        # nearest-class-mean should nail well-separated isotropic blobs
        x, y = gaussian_blobs(300, classes=3, features=6, seed=2)
        means = np.stack([x[y == c].mean(axis=0) for c in range(3)])
        pred = np.argmin(((x[:, None, :] - means) ** 2).sum(axis=2), axis=1)
        assert (pred == y).mean() > 0.95

    def test_rejects_bad_configs(self):
        with pytest.raises(ConfigError):
            gaussian_blobs(10, classes=1, features=2, seed=0)
        with pytest.raises(ConfigError):
            gaussian_blobs(2, classes=3, features=2, seed=0)


class TestTwoMoons:
    def test_shapes_and_label_split(self):
        x, y = two_moons(101, seed=0)
        assert x.shape == (101, 2) and x.dtype == np.float32
        assert sorted(set(y.tolist())) == [0, 1]
        assert int(y.sum()) == 101 - 101 // 2

    def test_noiseless_points_sit_on_their_circles(self):
        x, y = two_moons(200, seed=3, noise=0.0)
        outer = x[y == 0]
        inner = x[y == 1]
        r_outer = outer[:, 0] ** 2 + outer[:, 1] ** 2
        r_inner = (inner[:, 0] - 1.0) ** 2 + (inner[:, 1] - 0.5) ** 2
        assert r_outer == approx(np.ones_like(r_outer), rel=1e-5)
        assert r_inner == approx(np.ones_like(r_inner), rel=1e-5)

    def test_deterministic(self):
        a = two_moons(64, seed=7)
        b = two_moons(64, seed=7)
        np.testing.assert_array_equal(a[0], b[0])


class TestTrainEvalSplit:
    def test_sizes_eval_gets_ceiling(self):
        x = np.arange(10, dtype=np.float32)[:, None]
        y = np.arange(10)
        xt, yt, xe, ye = train_eval_split(x, y, eval_fraction=0.25, seed=0)
        assert xe.shape[0] == 3 and xt.shape[0] == 7
        assert ye.shape == (3,) and yt.shape == (7,)

    def test_partition_preserves_every_row(self):
        x = np.arange(23, dtype=np.float32)[:, None]
        y = np.arange(23)
        xt, yt, xe, ye = train_eval_split(x, y, eval_fraction=0.3, seed=5)
        together = np.sort(np.concatenate([xt, xe]).ravel())
        np.testing.assert_array_equal(together, x.ravel())
        np.testing.assert_array_equal(np.sort(np.concatenate([yt, ye])), y)
        # labels travel with their rows
        assert all(int(v) == int(lab) for v, lab in zip(xt.ravel(), yt))

    def test_deterministic(self):
        x = np.arange(12, dtype=np.float32)[:, None]
        y = np.arange(12)
        a = train_eval_split(x, y, 0.5, seed=1)
        b = train_eval_split(x, y, 0.5, seed=1)
        for left, right in zip(a, b):
            np.testing.assert_array_equal(left, right)

    def test_rejects_bad_fraction_and_mismatch(self):
        x = np.zeros((4, 2), dtype=np.float32)
        y = np.zeros(4, dtype=np.int64)
        for frac in (0.0, 1.0, -0.1):
            with pytest.raises(ConfigError):
                train_eval_split(x, y, frac, seed=0)
        with pytest.raises(DimensionError):
            train_eval_split(x, np.zeros(3, dtype=np.int64), 0.5, seed=0)


class TestDatasetSpec:
    def test_of_flat_features(self):
        x = np.zeros((10, 6), dtype=np.float32)
        y = np.array([0, 2, 1] * 3 + [2])
        spec = DatasetSpec.of(x, y)
        assert spec == DatasetSpec(num_features=6, num_classes=3, input_shape=(6,))

    def test_of_image_batch(self):
        x = np.zeros((4, 1, 5, 5), dtype=np.float32)
        y = np.array([0, 1, 0, 1])
        spec = DatasetSpec.of(x, y)
        assert spec.num_features == 25
        assert spec.input_shape == (1, 5, 5)

    def test_empty_labels_mean_zero_classes(self):
        spec = DatasetSpec.of(np.zeros((0, 3), dtype=np.float32), np.zeros(0, dtype=np.int64))
        assert spec.num_classes == 0


def idx_blob(type_byte: int, dims: tuple[int, ...], payload: bytes) -> bytes:
    header = struct.pack(">BBBB", 0, 0, type_byte, len(dims))
    header += struct.pack(f">{len(dims)}I", *dims)
    return header + payload


class TestReadIdx:
    def test_uint8_matrix(self, tmp_path):
        path = str(tmp_path / "m.idx")
        with open(path, "wb") as fh:
            fh.write(idx_blob(0x08, (3, 2), bytes([1, 2, 3, 4, 5, 250])))
        arr = read_idx(path)
        assert arr.dtype == np.uint8
        np.testing.assert_array_equal(arr, [[1, 2], [3, 4], [5, 250]])
        assert arr.flags.writeable

    def test_big_endian_int32(self, tmp_path):
        path = str(tmp_path / "i.idx")
        payload = struct.pack(">3i", -1, 0, 70000)
        with open(path, "wb") as fh:
            fh.write(idx_blob(0x0C, (3,), payload))
        np.testing.assert_array_equal(read_idx(path), [-1, 0, 70000])

    def test_gzip_by_extension(self, tmp_path):
        blob = idx_blob(0x08, (2, 2), bytes([9, 8, 7, 6]))
        path = str(tmp_path / "m.idx.gz")
        with gzip.open(path, "wb") as fh:
            fh.write(blob)
        np.testing.assert_array_equal(read_idx(path), [[9, 8], [7, 6]])

    def test_too_short(self, tmp_path):
        path = str(tmp_path / "t.idx")
        with open(path, "wb") as fh:
            fh.write(b"\x00\x00")
        with pytest.raises(DimensionError, match="too short"):
            read_idx(path)

    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "b.idx")
        with open(path, "wb") as fh:
            fh.write(b"\x01\x00\x08\x01" + b"\x00\x00\x00\x01" + b"\x05")
        with pytest.raises(DimensionError, match="magic"):
            read_idx(path)

    def test_unknown_element_type(self, tmp_path):
        path = str(tmp_path / "u.idx")
        with open(path, "wb") as fh:
            fh.write(idx_blob(0x05, (1,), b"\x00"))
        with pytest.raises(DimensionError, match="element type"):
            read_idx(path)

    def test_truncated_dimension_list(self, tmp_path):
        path = str(tmp_path / "d.idx")
        with open(path, "wb") as fh:
            fh.write(b"\x00\x00\x08\x03" + b"\x00\x00\x00\x01")
        with pytest.raises(DimensionError, match="dimension list"):
            read_idx(path)

    def test_payload_size_mismatch(self, tmp_path):
        path = str(tmp_path / "p.idx")
        with open(path, "wb") as fh:
            fh.write(idx_blob(0x08, (2, 2), bytes([1, 2, 3])))
        with pytest.raises(DimensionError, match="payload"):
            read_idx(path)


class TestLoadIdxPair:
    def write_pair(self, tmp_path, images: bytes, labels: bytes):
        ip = str(tmp_path / "images.idx")
        lp = str(tmp_path / "labels.idx")
        with open(ip, "wb") as fh:
            fh.write(images)
        with open(lp, "wb") as fh:
            fh.write(labels)
        return ip, lp

    def test_uint8_images_become_unit_scaled_nchw(self, tmp_path):
        pixels = bytes([0, 255, 128, 64, 255, 0, 32, 16])
        ip, lp = self.write_pair(
            tmp_path,
            idx_blob(0x08, (2, 2, 2), pixels),
            idx_blob(0x08, (2,), bytes([1, 0])),
        )
        x, y = load_idx_pair(ip, lp)
        assert x.shape == (2, 1, 2, 2) and x.dtype == np.float32
        assert x.max() == approx(1.0)
        assert x[0, 0, 0, 0] == 0.0
        assert x[0, 0, 0, 1] == approx(1.0)
        assert x[0, 0, 1, 0] == approx(128 / 255)
        assert y.tolist() == [1, 0] and y.dtype == np.int64

    def test_float_images_not_rescaled(self, tmp_path):
        payload = struct.pack(">4f", 0.0, 2.0, 4.0, 8.0)
        ip, lp = self.write_pair(
            tmp_path,
            idx_blob(0x0D, (2, 2), payload),
            idx_blob(0x08, (2,), bytes([0, 1])),
        )
        x, _ = load_idx_pair(ip, lp)
        assert x.shape == (2, 2)
        assert x.max() == approx(8.0)

    def test_count_mismatch(self, tmp_path):
        ip, lp = self.write_pair(
            tmp_path,
            idx_blob(0x08, (3, 2), bytes(6)),
            idx_blob(0x08, (2,), bytes(2)),
        )
        with pytest.raises(DimensionError, match="images vs"):
            load_idx_pair(ip, lp)

    def test_labels_must_be_one_dimensional(self, tmp_path):
        ip, lp = self.write_pair(
            tmp_path,
            idx_blob(0x08, (2, 2), bytes(4)),
            idx_blob(0x08, (2, 1), bytes(2)),
        )
        with pytest.raises(DimensionError, match="one-dimensional"):
            load_idx_pair(ip, lp)
