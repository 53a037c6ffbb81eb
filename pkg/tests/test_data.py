import gzip

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mbf import data
from mbf.errors import ConsistencyError, IdxFormatError, InvalidInputError


def write_pair(tmp_path, n_images=4, n_labels=4, side=2, suffix=""):
    images = (np.arange(n_images * side * side) % 256).astype(np.uint8).reshape(n_images, side, side)
    labels = (np.arange(n_labels) % 10).astype(np.uint8)
    ip, lp = tmp_path / f"img.idx{suffix}", tmp_path / f"lab.idx{suffix}"
    data.write_idx(ip, images)
    data.write_idx(lp, labels)
    return ip, lp, images, labels


class TestIdx:
    def test_small_fixture(self, tmp_path):
        ip, lp, images, labels = write_pair(tmp_path)
        b = data.load_idx(ip, lp)
        assert b.X.shape == (4, 4)
        np.testing.assert_allclose(b.X, images.reshape(4, 4) / 255.0)
        np.testing.assert_array_equal(b.labels, labels)
        np.testing.assert_array_equal(b.Y.argmax(axis=1), labels)

    def test_header_bytes(self, tmp_path):
        ip, _, _, _ = write_pair(tmp_path)
        raw = ip.read_bytes()
        assert int.from_bytes(raw[:4], "big") == data.IMAGES_MAGIC
        assert [int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(3)] == [4, 2, 2]

    def test_gzip(self, tmp_path):
        ip, lp, images, _ = write_pair(tmp_path, suffix=".gz")
        with gzip.open(ip, "rb") as fh:
            assert fh.read(4) == b"\x00\x00\x08\x03"
        np.testing.assert_array_equal(data.read_idx(ip, data.IMAGES_MAGIC), images)

    def test_wrong_magic_names_file(self, tmp_path):
        ip, lp, _, _ = write_pair(tmp_path)
        with pytest.raises(IdxFormatError, match="lab.idx"):
            data.read_idx(lp, data.IMAGES_MAGIC)

    def test_swapped_files(self, tmp_path):
        ip, lp, _, _ = write_pair(tmp_path)
        with pytest.raises(IdxFormatError, match="lab.idx"):
            data.load_idx(lp, ip)

    def test_truncated_payload(self, tmp_path):
        ip, _, _, _ = write_pair(tmp_path)
        ip.write_bytes(ip.read_bytes()[:-1])
        with pytest.raises(IdxFormatError, match="payload"):
            data.read_idx(ip)

    def test_count_mismatch(self, tmp_path):
        ip, lp, _, _ = write_pair(tmp_path, n_labels=3)
        with pytest.raises(ConsistencyError):
            data.load_idx(ip, lp)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            data.read_idx(tmp_path / "nope")

    def test_autoencoder_targets(self, tmp_path):
        ip, _, _, _ = write_pair(tmp_path)
        b = data.load_idx(ip)
        np.testing.assert_array_equal(b.X, b.Y)
        assert b.labels is None

    def test_only_uint8(self, tmp_path):
        with pytest.raises(InvalidInputError):
            data.write_idx(tmp_path / "x", np.zeros(3, dtype=np.int32))

    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(np.uint8, hnp.array_shapes(min_dims=1, max_dims=4, max_side=5)))
    def test_round_trip(self, tmp_path_factory, a):
        path = tmp_path_factory.mktemp("idx") / "a.idx"
        data.write_idx(path, a)
        np.testing.assert_array_equal(data.read_idx(path), a)


class TestFixture:
    def test_bundled_digits(self):
        b = data.load_digits()
        assert b.X.shape[1] == 784 and b.Y.shape[1] == 10
        assert len(b) > 2000
        assert 0.0 <= b.X.min() and b.X.max() <= 1.0
        assert set(np.unique(b.labels)) == set(range(10))

    def test_mnist_directory(self, tmp_path):
        images = np.zeros((3, 28, 28), dtype=np.uint8)
        data.write_idx(tmp_path / "train-images-idx3-ubyte.gz", images)
        data.write_idx(tmp_path / "train-labels-idx1-ubyte", np.array([1, 2, 3], dtype=np.uint8))
        b = data.load_digits(tmp_path)
        assert b.X.shape == (3, 784)

    def test_mnist_directory_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            data.load_digits(tmp_path)


class TestResample:
    def test_rows_sum_to_one(self):
        for n_in, n_out in [(28, 16), (28, 8), (5, 3), (4, 4)]:
            R = data.area_resample_matrix(n_in, n_out)
            np.testing.assert_allclose(R.sum(axis=1), 1.0)

    def test_integer_factor_is_block_mean(self):
        img = np.arange(16.0).reshape(1, 4, 4)
        small = data.downscale(img, 2)
        np.testing.assert_allclose(small[0], [[2.5, 4.5], [10.5, 12.5]])

    def test_preserves_mean(self, rng):
        imgs = rng.random((3, 28, 28))
        np.testing.assert_allclose(data.downscale(imgs, 16).mean(axis=(1, 2)), imgs.mean(axis=(1, 2)))


class TestSynthetic:
    @pytest.mark.parametrize("kind", data.SYNTH_KINDS)
    def test_deterministic(self, kind):
        a = data.synth_dataset(kind, 30, seed=5)
        b = data.synth_dataset(kind, 30, seed=5)
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.Y, b.Y)

    def test_shapes(self):
        assert data.synth_dataset("downscaled_digits_16x16", 20, 0).X.shape == (20, 256)
        assert data.synth_dataset("random_regression", 20, 0, d=3).Y.shape == (20, 1)
        tg = data.synth_dataset("two_gaussians", 20, 0, d=3)
        assert tg.X.shape == (20, 3) and tg.Y.shape == (20, 2)

    def test_digits_without_replacement(self):
        src = data.load_digits()
        b = data.synth_dataset("downscaled_digits_16x16", 50, 1, source=src)
        assert len(np.unique(b.X, axis=0)) == 50

    def test_unknown_kind(self):
        with pytest.raises(InvalidInputError):
            data.synth_dataset("spirals", 10, 0)
