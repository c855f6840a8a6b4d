"""Distortion filters, reversible application ledgers, and L2 calibration.

Each distortion is applied per patch and recorded as an integer application
count per (patch, filter) pair. Masks are derived deterministically from
(episode seed, patch id, filter, application index), so a ledger can be
re-rendered from the original image at any time and removal is exact: popping
the last application restores the previous image bit for bit.

Filters compose on a patch in a fixed canonical order (noise, brightness,
blur, dead pixel) and clipping to [0, 1] happens only at render time, never
inside the ledger, so removal can always recover pre-clip content.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy import ndimage

from .errors import CalibrationError, InvalidArgumentError
from .tensor import ImageTensor, PatchGrid, as_array, l2_distance


class FilterId(str, Enum):
    GAUSSIAN_NOISE = "gaussian_noise"
    GAUSSIAN_BLUR = "gaussian_blur"
    BRIGHTNESS = "brightness"
    DEAD_PIXEL = "dead_pixel"


#: Canonical composition order when several filters touch the same patch.
COMPOSE_ORDER: tuple[str, ...] = (
    FilterId.GAUSSIAN_NOISE.value,
    FilterId.BRIGHTNESS.value,
    FilterId.GAUSSIAN_BLUR.value,
    FilterId.DEAD_PIXEL.value,
)


@dataclass(frozen=True)
class FilterParams:
    """Filter hyperparameters, fixed for the lifetime of an experiment.

    ``epsilon0`` is the target L2 impact of a single application and is what
    ``calibrate`` solves for when equalizing filters against each other.
    """

    noise_sigma: float = 0.05
    blur_sigma: float = 1.0
    brightness_delta: float = -0.1
    deadpixel_fraction: float = 0.5
    epsilon0: float = 0.1

    def __post_init__(self) -> None:
        if self.noise_sigma <= 0:
            raise InvalidArgumentError("noise_sigma must be positive")
        if self.blur_sigma <= 0:
            raise InvalidArgumentError("blur_sigma must be positive")
        if not -1.0 < self.brightness_delta < 1.0:
            raise InvalidArgumentError("brightness_delta must lie in (-1, 1)")
        if not 0.0 < self.deadpixel_fraction <= 1.0:
            raise InvalidArgumentError("deadpixel_fraction must lie in (0, 1]")
        if self.epsilon0 <= 0:
            raise InvalidArgumentError("epsilon0 must be positive")


@dataclass(frozen=True)
class Mask:
    """Patch-shaped transform descriptor produced by ``make_mask``.

    kind "additive": ``field`` (C, n, n) is added to the patch.
    kind "blur": the patch is convolved once with a Gaussian of ``sigma``,
    edges replicated inside the patch.
    kind "zero_pixels": flat spatial indices in ``pixels`` are set to 0
    across all channels.
    """

    filter: str
    kind: str
    field: np.ndarray | None = None
    pixels: np.ndarray | None = None
    sigma: float | None = None


def _filter_tag(name: str) -> int:
    # Stable across processes and platforms, unlike hash().
    digest = hashlib.blake2s(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _mask_rng(seed_ctx: tuple[int, int, str, int]) -> np.random.Generator:
    episode_seed, patch_id, filter_name, app_index = seed_ctx
    entropy = [int(episode_seed) & (2**64 - 1), patch_id, _filter_tag(filter_name), app_index]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _make_noise_mask(params, window_shape, rng):
    field = rng.normal(0.0, params.noise_sigma, size=window_shape)
    return {"kind": "additive", "field": field}


def _make_brightness_mask(params, window_shape, rng):
    field = np.full(window_shape, params.brightness_delta, dtype=np.float64)
    return {"kind": "additive", "field": field}


def _make_blur_mask(params, window_shape, rng):
    return {"kind": "blur", "sigma": params.blur_sigma}


def _make_deadpixel_mask(params, window_shape, rng):
    _, n_rows, n_cols = window_shape
    n_pixels = n_rows * n_cols
    count = int(round(params.deadpixel_fraction * n_pixels))
    pixels = np.sort(rng.choice(n_pixels, size=count, replace=False))
    return {"kind": "zero_pixels", "pixels": pixels}


_MASK_BUILDERS = {
    FilterId.GAUSSIAN_NOISE.value: _make_noise_mask,
    FilterId.BRIGHTNESS.value: _make_brightness_mask,
    FilterId.GAUSSIAN_BLUR.value: _make_blur_mask,
    FilterId.DEAD_PIXEL.value: _make_deadpixel_mask,
}

_CUSTOM_ORDER: list[str] = []


def register_filter(name: str, builder) -> None:
    """Register a custom filter under the built-in mask contract.

    ``builder(params, window_shape, rng)`` must return a dict with a ``kind``
    from {"additive", "blur", "zero_pixels"} and the matching payload. Custom
    filters compose after the built-ins, in registration order.
    """
    if name in _MASK_BUILDERS:
        raise InvalidArgumentError(f"filter {name!r} already registered")
    _MASK_BUILDERS[name] = builder
    _CUSTOM_ORDER.append(name)


def known_filters() -> tuple[str, ...]:
    return tuple(COMPOSE_ORDER) + tuple(_CUSTOM_ORDER)


def _compose_order(names) -> list[str]:
    order = [f for f in COMPOSE_ORDER if f in names]
    order += [f for f in _CUSTOM_ORDER if f in names]
    return order


def make_mask(
    filter_id: str,
    params: FilterParams,
    window_shape: tuple[int, int, int],
    seed_ctx: tuple[int, int, str, int],
) -> Mask:
    """Build the deterministic mask for one application of a filter.

    ``seed_ctx`` is (episode seed, patch id, filter name, application index);
    the same context always yields a bit-identical mask, which is what makes
    ledgers re-renderable and masks cacheable.
    """
    name = str(filter_id.value) if isinstance(filter_id, FilterId) else str(filter_id)
    builder = _MASK_BUILDERS.get(name)
    if builder is None:
        raise InvalidArgumentError(f"unknown filter {name!r}")
    rng = _mask_rng((seed_ctx[0], seed_ctx[1], name, seed_ctx[3]))
    payload = builder(params, window_shape, rng)
    mask = Mask(filter=name, **payload)
    if mask.field is not None:
        mask.field.setflags(write=False)
    if mask.pixels is not None:
        mask.pixels.setflags(write=False)
    return mask


class MaskFactory:
    """Per-episode mask cache; masks are pure functions of their seed context."""

    def __init__(self, params: FilterParams, episode_seed: int, window_shape):
        self.params = params
        self.episode_seed = int(episode_seed)
        self.window_shape = tuple(window_shape)
        self._cache: dict[tuple[int, str, int], Mask] = {}

    def get(self, patch_id: int, filter_name: str, app_index: int) -> Mask:
        key = (patch_id, filter_name, app_index)
        mask = self._cache.get(key)
        if mask is None:
            mask = make_mask(
                filter_name,
                self.params,
                self.window_shape,
                (self.episode_seed, patch_id, filter_name, app_index),
            )
            self._cache[key] = mask
        return mask


def _apply_masks(patch: np.ndarray, masks: list[Mask]) -> np.ndarray:
    """Apply a mask sequence (one filter) to un-clipped patch content."""
    out = patch
    for mask in masks:
        if mask.kind == "additive":
            out = out + mask.field
        elif mask.kind == "blur":
            out = ndimage.gaussian_filter(out, sigma=(0.0, mask.sigma, mask.sigma), mode="nearest")
        elif mask.kind == "zero_pixels":
            channels, n_rows, n_cols = out.shape
            flat = out.reshape(channels, n_rows * n_cols).copy()
            flat[:, mask.pixels] = 0.0
            out = flat.reshape(channels, n_rows, n_cols)
        else:
            raise InvalidArgumentError(f"unknown mask kind {mask.kind!r}")
    return out


class DistortionLedger:
    """Value-semantic record of per-(patch, filter) application counts.

    ``add``/``remove`` return new ledgers; rendering recomputes each touched
    patch from the original image, so the result depends only on the final
    counts and never on the order in which they were reached.
    """

    __slots__ = ("original", "grid", "params", "episode_seed", "_counts", "_factory")

    def __init__(
        self,
        original: ImageTensor,
        grid: PatchGrid,
        params: FilterParams,
        episode_seed: int,
        _counts: dict[tuple[int, str], int] | None = None,
        _factory: MaskFactory | None = None,
    ):
        channels = original.shape[0]
        self.original = original
        self.grid = grid
        self.params = params
        self.episode_seed = int(episode_seed)
        self._counts = dict(_counts) if _counts else {}
        self._factory = _factory or MaskFactory(
            params, episode_seed, (channels, grid.patch_size, grid.patch_size)
        )

    def count(self, patch_id: int, filter_name: str) -> int:
        return self._counts.get((patch_id, str(filter_name)), 0)

    def distorted_pairs(self) -> list[tuple[int, str]]:
        """(patch, filter) pairs with at least one application, in sorted order."""
        return sorted(key for key, k in self._counts.items() if k > 0)

    def total_applications(self) -> int:
        return sum(self._counts.values())

    def signature(self) -> tuple:
        """Canonical hashable key for the rendered state (used for caching)."""
        return tuple(sorted((p, f, k) for (p, f), k in self._counts.items() if k > 0))

    def _derive(self, counts: dict[tuple[int, str], int]) -> "DistortionLedger":
        ledger = DistortionLedger.__new__(DistortionLedger)
        ledger.original = self.original
        ledger.grid = self.grid
        ledger.params = self.params
        ledger.episode_seed = self.episode_seed
        ledger._counts = counts
        ledger._factory = self._factory
        return ledger

    def add(self, patch_id: int, filter_name: str) -> "DistortionLedger":
        key = (patch_id, str(filter_name))
        if not 0 <= patch_id < self.grid.num_patches:
            raise InvalidArgumentError(f"patch_id {patch_id} out of range")
        counts = dict(self._counts)
        counts[key] = counts.get(key, 0) + 1
        return self._derive(counts)

    def remove(self, patch_id: int, filter_name: str) -> "DistortionLedger":
        key = (patch_id, str(filter_name))
        current = self._counts.get(key, 0)
        if current <= 0:
            raise InvalidArgumentError(f"cannot remove from zero-count pair {key}")
        counts = dict(self._counts)
        if current == 1:
            del counts[key]
        else:
            counts[key] = current - 1
        return self._derive(counts)

    def _patch_counts(self) -> dict[int, dict[str, int]]:
        per_patch: dict[int, dict[str, int]] = {}
        for (patch_id, name), k in self._counts.items():
            if k > 0:
                per_patch.setdefault(patch_id, {})[name] = k
        return per_patch

    def render_patch(self, patch_id: int, overrides: dict[str, int] | None = None) -> np.ndarray:
        """Clipped content of one patch for this ledger's counts.

        ``overrides`` substitutes counts for specific filters, which lets the
        sensitivity scan price a candidate without building a whole ledger.
        """
        rows, cols = self.grid.window(patch_id)
        patch = self.original.data[:, rows, cols].copy()
        counts = {name: self.count(patch_id, name) for name in known_filters()}
        if overrides:
            counts.update(overrides)
        active = [name for name in _compose_order(counts) if counts.get(name, 0) > 0]
        for name in active:
            masks = [self._factory.get(patch_id, name, i) for i in range(counts[name])]
            patch = _apply_masks(patch, masks)
        return np.clip(patch, 0.0, 1.0)

    def render_array(self) -> np.ndarray:
        """Full rendered image as a float64 array (already clipped)."""
        out = self.original.data.copy()
        for patch_id in self._patch_counts():
            rows, cols = self.grid.window(patch_id)
            out[:, rows, cols] = self.render_patch(patch_id)
        return out

    def render(self) -> ImageTensor:
        return ImageTensor(self.render_array())


def ledger_add(ledger: DistortionLedger, patch_id: int, filter_name: str) -> DistortionLedger:
    return ledger.add(patch_id, filter_name)


def ledger_remove(ledger: DistortionLedger, patch_id: int, filter_name: str) -> DistortionLedger:
    return ledger.remove(patch_id, filter_name)


# Calibration: solve for the intensity parameter that makes one application
# move the image by a target L2, averaged over all patches of the samples.

_INTENSITY_FIELD = {
    FilterId.GAUSSIAN_NOISE.value: "noise_sigma",
    FilterId.GAUSSIAN_BLUR.value: "blur_sigma",
    FilterId.BRIGHTNESS.value: "brightness_delta",
    FilterId.DEAD_PIXEL.value: "deadpixel_fraction",
}

_INTENSITY_CAP = {
    FilterId.GAUSSIAN_NOISE.value: 16.0,
    FilterId.GAUSSIAN_BLUR.value: 64.0,
    FilterId.BRIGHTNESS.value: 0.999,
    FilterId.DEAD_PIXEL.value: 1.0,
}


def _with_intensity(params: FilterParams, filter_name: str, value: float) -> FilterParams:
    field = _INTENSITY_FIELD[filter_name]
    if field == "brightness_delta":
        sign = -1.0 if params.brightness_delta < 0 else 1.0
        return replace(params, brightness_delta=sign * value)
    return replace(params, **{field: value})


def mean_application_l2(
    filter_name: str,
    params: FilterParams,
    sample_images,
    grid: PatchGrid,
    seed: int = 0,
) -> float:
    """Mean L2 moved by a single application, over every patch of the samples."""
    total = 0.0
    count = 0
    for sample_index, img in enumerate(sample_images):
        ledger = DistortionLedger(img, grid, params, episode_seed=seed + sample_index)
        for patch_id in range(grid.num_patches):
            rows, cols = grid.window(patch_id)
            before = img.data[:, rows, cols]
            after = ledger.render_patch(patch_id, overrides={filter_name: 1})
            total += float(np.linalg.norm((after - before).ravel()))
            count += 1
    return total / count


def calibrate(
    filter_id: str,
    sample_images,
    grid: PatchGrid,
    target_eps0: float,
    base_params: FilterParams | None = None,
    seed: int = 0,
    tolerance: float = 0.10,
    max_steps: int = 60,
) -> FilterParams:
    """Fit one filter's intensity so its mean per-application L2 hits a target.

    Monotone bisection on the filter's intensity parameter; the dead-pixel
    response is a step function of the pixel count, so the best parameter seen
    is tracked and returned if it lands within tolerance.
    """
    name = str(filter_id.value) if isinstance(filter_id, FilterId) else str(filter_id)
    if name not in _INTENSITY_FIELD:
        raise InvalidArgumentError(f"cannot calibrate unknown filter {name!r}")
    if target_eps0 <= 0:
        raise InvalidArgumentError("target epsilon0 must be positive")
    images = list(sample_images)
    if not images:
        raise InvalidArgumentError("at least one sample image is required")
    params = base_params or FilterParams()

    def measure(value: float) -> float:
        candidate = _with_intensity(params, name, value)
        return mean_application_l2(name, candidate, images, grid, seed=seed)

    cap = _INTENSITY_CAP[name]
    lo, hi = 0.0, min(1e-3, cap)
    while measure(hi) < target_eps0 and hi < cap:
        hi = min(hi * 2.0, cap)

    best_value, best_err = hi, abs(measure(hi) - target_eps0)
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        got = measure(mid)
        err = abs(got - target_eps0)
        if err < best_err:
            best_value, best_err = mid, err
        if got < target_eps0:
            lo = mid
        else:
            hi = mid
    if best_err > tolerance * target_eps0:
        raise CalibrationError(
            f"{name}: best achievable mean L2 is off target by "
            f"{best_err / target_eps0:.1%} (> {tolerance:.0%})"
        )
    fitted = _with_intensity(params, name, best_value)
    return replace(fitted, epsilon0=target_eps0)
