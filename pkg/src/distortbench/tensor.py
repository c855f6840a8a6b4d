"""Image values, patch partitioning, and norms shared across the engine.

Images are kept channel-major as float64 internally so that long add/remove
sequences do not accumulate rounding error; float32 appears only at I/O
boundaries (wire frames, ``.dbimg`` files).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError


class ImageTensor:
    """Immutable float image in [0, 1] with shape (channels, height, width)."""

    __slots__ = ("data",)

    def __init__(self, data) -> None:
        arr = np.array(data, dtype=np.float64)
        if arr.ndim != 3:
            raise InvalidArgumentError(f"expected a (C, H, W) array, got shape {arr.shape}")
        if arr.size == 0:
            raise InvalidArgumentError("image must be non-empty")
        if not np.all(np.isfinite(arr)):
            raise InvalidArgumentError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise InvalidArgumentError("image values must lie in [0, 1]")
        arr.setflags(write=False)
        self.data = arr

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def to_float32(self) -> np.ndarray:
        """Copy of the data at I/O precision."""
        return self.data.astype(np.float32)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ImageTensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))

    def __repr__(self) -> str:
        return f"ImageTensor(shape={self.shape})"


def as_array(img) -> np.ndarray:
    """Accept an ImageTensor or a raw (C, H, W) array and return float64 data."""
    if isinstance(img, ImageTensor):
        return img.data
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3:
        raise InvalidArgumentError(f"expected a (C, H, W) array, got shape {arr.shape}")
    return arr


def l2_distance(a, b) -> float:
    """Euclidean norm of the elementwise difference over all C*H*W values."""
    arr_a = as_array(a)
    arr_b = as_array(b)
    if arr_a.shape != arr_b.shape:
        raise InvalidArgumentError(f"shape mismatch: {arr_a.shape} vs {arr_b.shape}")
    return float(np.linalg.norm((arr_a - arr_b).ravel()))


def clip_unit(img) -> ImageTensor:
    """Clamp every element to [0, 1]; in-range values pass through unchanged."""
    arr = as_array(img)
    if np.any(np.isnan(arr)):
        raise InvalidArgumentError("cannot clip NaN values")
    return ImageTensor(np.clip(arr, 0.0, 1.0))


@dataclass(frozen=True)
class PatchGrid:
    """Non-overlapping square tiling of an image plane.

    Patch ids run row-major: ``patch_id = row * cols + col``.
    """

    patch_size: int
    rows: int
    cols: int

    @property
    def num_patches(self) -> int:
        return self.rows * self.cols

    def position(self, patch_id: int) -> tuple[int, int]:
        if not 0 <= patch_id < self.num_patches:
            raise InvalidArgumentError(f"patch_id {patch_id} out of range [0, {self.num_patches})")
        return divmod(patch_id, self.cols)

    def window(self, patch_id: int) -> tuple[slice, slice]:
        """Pixel window (row slice, col slice) covered by the patch."""
        row, col = self.position(patch_id)
        n = self.patch_size
        return slice(row * n, (row + 1) * n), slice(col * n, (col + 1) * n)


def partition_patches(shape: tuple[int, int, int], n: int) -> PatchGrid:
    """Tile an image of the given (C, H, W) shape into n-by-n patches."""
    if n < 1:
        raise InvalidArgumentError(f"patch size must be >= 1, got {n}")
    _, height, width = shape
    if height % n != 0 or width % n != 0:
        raise InvalidArgumentError(
            f"image plane {height}x{width} is not divisible by patch size {n}"
        )
    return PatchGrid(patch_size=n, rows=height // n, cols=width // n)
