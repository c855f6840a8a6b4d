import struct

import numpy as np
import pytest
from PIL import Image

from distortbench import (
    ImageTensor,
    InvalidArgumentError,
    load_dataset,
    read_image_tensor,
    write_dataset,
    write_image_tensor,
    write_png_preview,
)
from conftest import mid_image, random_image


class TestTensorFiles:
    def test_round_trip_preserves_float32_values(self, rng, tmp_path):
        img = random_image(rng, (3, 6, 4))
        path = tmp_path / "img.dbimg"
        write_image_tensor(path, img)
        back = read_image_tensor(path)
        assert back.shape == (3, 6, 4)
        assert np.array_equal(back.data, img.data.astype(np.float32).astype(np.float64))

    def test_float32_data_round_trips_bit_exact(self, rng, tmp_path):
        quantized = ImageTensor(
            rng.uniform(0, 1, (2, 4, 4)).astype(np.float32).astype(np.float64)
        )
        path = tmp_path / "img.dbimg"
        write_image_tensor(path, quantized)
        assert read_image_tensor(path) == quantized

    def test_rewrite_is_byte_identical(self, rng, tmp_path):
        img = random_image(rng, (3, 4, 4))
        a, b = tmp_path / "a.dbimg", tmp_path / "b.dbimg"
        write_image_tensor(a, img)
        write_image_tensor(b, img)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.dbimg"
        path.write_bytes(b"NOTIMG" + struct.pack("<III", 1, 1, 1) + b"\x00" * 4)
        with pytest.raises(InvalidArgumentError, match="magic"):
            read_image_tensor(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "short.dbimg"
        path.write_bytes(struct.pack("<6sIII", b"DBIMG1", 1, 2, 2) + b"\x00" * 8)
        with pytest.raises(InvalidArgumentError, match="expected"):
            read_image_tensor(path)

    def test_header_only_rejected(self, tmp_path):
        path = tmp_path / "tiny.dbimg"
        path.write_bytes(b"DBIMG")
        with pytest.raises(InvalidArgumentError, match="truncated"):
            read_image_tensor(path)


class TestPngPreviews:
    def test_rgb_preview_pixel_values(self, tmp_path):
        img = mid_image((3, 2, 2), 0.5)
        path = tmp_path / "img.png"
        write_png_preview(path, img)
        loaded = np.asarray(Image.open(path))
        assert loaded.shape == (2, 2, 3)
        assert np.all(loaded == 128)  # rint(0.5 * 255)

    def test_grayscale_preview(self, tmp_path):
        img = mid_image((1, 2, 2), 1.0)
        path = tmp_path / "img.png"
        write_png_preview(path, img)
        loaded = np.asarray(Image.open(path))
        assert loaded.shape == (2, 2)
        assert np.all(loaded == 255)

    def test_other_channel_counts_average(self, tmp_path):
        arr = np.zeros((2, 2, 2))
        arr[0] = 1.0
        path = tmp_path / "img.png"
        write_png_preview(path, ImageTensor(arr))
        loaded = np.asarray(Image.open(path))
        assert loaded.shape == (2, 2)
        assert np.all(loaded == 127)  # mean of 255 and 0, truncated


class TestDatasetDirectory:
    def test_round_trip_ordered_by_index(self, rng, tmp_path):
        images = [random_image(rng, (3, 4, 4)) for _ in range(3)]
        labels = [2, 0, 1]
        write_dataset(tmp_path / "data", images, labels, indices=[20, 5, 10])
        loaded_images, loaded_labels, indices = load_dataset(tmp_path / "data")
        assert indices == [5, 10, 20]
        assert loaded_labels == [0, 1, 2]
        # index 5 holds the second written image
        want = images[1].data.astype(np.float32).astype(np.float64)
        assert np.array_equal(loaded_images[0].data, want)

    def test_default_indices_are_positional(self, rng, tmp_path):
        images = [random_image(rng, (3, 4, 4)) for _ in range(2)]
        write_dataset(tmp_path / "data", images, [1, 0])
        _, labels, indices = load_dataset(tmp_path / "data")
        assert indices == [0, 1]
        assert labels == [1, 0]

    def test_misaligned_labels_rejected(self, rng, tmp_path):
        images = [random_image(rng, (3, 4, 4))]
        with pytest.raises(InvalidArgumentError):
            write_dataset(tmp_path / "data", images, [0, 1])

    def test_duplicate_indices_rejected(self, rng, tmp_path):
        images = [random_image(rng, (3, 4, 4)) for _ in range(2)]
        with pytest.raises(InvalidArgumentError):
            write_dataset(tmp_path / "data", images, [0, 1], indices=[3, 3])

    def test_missing_labels_file_rejected(self, tmp_path):
        (tmp_path / "data").mkdir()
        with pytest.raises(InvalidArgumentError, match="labels.json"):
            load_dataset(tmp_path / "data")
