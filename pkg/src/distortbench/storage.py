"""Binary image tensor files and 8-bit PNG previews.

Tensor files are little-endian: magic ``DBIMG1``, then u32 C, H, W, then
C*H*W float32 values in C-order. Float32 is the interchange precision at
every file and wire boundary; in-memory math stays float64.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidArgumentError
from .tensor import ImageTensor, as_array

MAGIC_IMAGE = b"DBIMG1"


def write_image_tensor(path, img) -> None:
    arr = as_array(img).astype(np.float32)
    channels, height, width = arr.shape
    payload = struct.pack("<6sIII", MAGIC_IMAGE, channels, height, width)
    Path(path).write_bytes(payload + arr.tobytes(order="C"))


def read_image_tensor(path) -> ImageTensor:
    raw = Path(path).read_bytes()
    header_size = struct.calcsize("<6sIII")
    if len(raw) < header_size:
        raise InvalidArgumentError(f"{path}: truncated tensor file")
    magic, channels, height, width = struct.unpack_from("<6sIII", raw)
    if magic != MAGIC_IMAGE:
        raise InvalidArgumentError(f"{path}: bad magic {magic!r}")
    expected = header_size + channels * height * width * 4
    if len(raw) != expected:
        raise InvalidArgumentError(
            f"{path}: expected {expected} bytes for shape "
            f"({channels}, {height}, {width}), got {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=header_size)
    return ImageTensor(data.reshape(channels, height, width).astype(np.float64))


def write_png_preview(path, img) -> None:
    """8-bit preview next to the tensor file; RGB when C==3, grayscale else."""
    arr = as_array(img)
    channels = arr.shape[0]
    scaled = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if channels == 3:
        Image.fromarray(np.moveaxis(scaled, 0, -1), mode="RGB").save(path)
    elif channels == 1:
        Image.fromarray(scaled[0], mode="L").save(path)
    else:
        Image.fromarray(scaled.mean(axis=0).astype(np.uint8), mode="L").save(path)


def write_dataset(dir_path, images, labels, indices=None) -> None:
    """A dataset directory: <index>.dbimg files plus labels.json."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    if indices is None:
        indices = list(range(len(images)))
    if len({*indices}) != len(images) or len(labels) != len(images):
        raise InvalidArgumentError("images, labels, and unique indices must align")
    label_map = {}
    for idx, img, label in zip(indices, images, labels):
        write_image_tensor(dir_path / f"{idx}.dbimg", img)
        label_map[str(idx)] = int(label)
    (dir_path / "labels.json").write_text(json.dumps(label_map, sort_keys=True) + "\n")


def load_dataset(dir_path):
    """Returns (images, labels, indices), ordered by ascending index."""
    dir_path = Path(dir_path)
    labels_file = dir_path / "labels.json"
    if not labels_file.exists():
        raise InvalidArgumentError(f"{dir_path}: missing labels.json")
    label_map = json.loads(labels_file.read_text())
    indices = sorted(int(k) for k in label_map)
    images, labels = [], []
    for idx in indices:
        images.append(read_image_tensor(dir_path / f"{idx}.dbimg"))
        labels.append(int(label_map[str(idx)]))
    return images, labels, indices
