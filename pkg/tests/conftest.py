"""Shared fixtures and independent reference implementations.

The brute-force search and scalar-loop recomputations here deliberately
avoid the library's own rendering/prediction code paths, so tests compare
two independent routes to the same number.
"""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from distortbench import ImageTensor, ToyLinearClassifier


def mid_image(shape=(3, 4, 4), value=0.5) -> ImageTensor:
    return ImageTensor(np.full(shape, value, dtype=np.float64))


def random_image(rng, shape=(3, 4, 4), low=0.0, high=1.0) -> ImageTensor:
    return ImageTensor(rng.uniform(low, high, size=shape))


def scalar_l2(a: np.ndarray, b: np.ndarray) -> float:
    """Plain-loop Euclidean distance, no vectorized shortcuts."""
    total = 0.0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        total += (x - y) * (x - y)
    return total**0.5


def scalar_softmax_probs(weights, bias, image_arr) -> list[float]:
    """Scalar-loop linear-softmax forward pass (float64)."""
    flat = image_arr.ravel().tolist()
    logits = []
    for k in range(len(bias)):
        acc = 0.0
        for d, x in enumerate(flat):
            acc += weights[k][d] * x
        logits.append(acc + bias[k])
    top = max(logits)
    exps = [np.exp(z - top) for z in logits]
    norm = sum(exps)
    return [e / norm for e in exps]


# Toy attack instances: small images plus linear-softmax victims whose clean
# prediction is correct with a bounded logit margin, verified attackable via
# the brightness brute force below.

BRIGHT_DELTA = -0.1


def apply_brightness_counts(image_arr, counts, patch_size=2, delta=BRIGHT_DELTA):
    """Direct arithmetic rendering of a per-patch count vector (no ledger)."""
    out = image_arr.copy()
    _, h, w = out.shape
    cols = w // patch_size
    for pid, k in enumerate(counts):
        if k:
            r, c = divmod(pid, cols)
            out[
                :,
                r * patch_size : (r + 1) * patch_size,
                c * patch_size : (c + 1) * patch_size,
            ] += k * delta
    np.clip(out, 0.0, 1.0, out=out)
    return out


def brightness_brute_force(
    image_arr, weights, bias, label, patch_size=2, max_count=3, delta=BRIGHT_DELTA
):
    """Exhaustive minimal-L2 misclassifying assignment over all per-patch
    application counts up to max_count. Victim inputs are rounded through
    float32, matching what any served or in-process victim actually sees.

    Returns (best_l2, best_counts) or (None, None) if unattackable.
    """
    _, h, w = image_arr.shape
    n_patches = (h // patch_size) * (w // patch_size)
    best_l2, best_counts = None, None
    for counts in itertools.product(range(max_count + 1), repeat=n_patches):
        if not any(counts):
            continue
        candidate = apply_brightness_counts(image_arr, counts, patch_size, delta)
        seen = candidate.astype(np.float32).astype(np.float64)
        logits = weights @ seen.ravel() + bias
        if int(np.argmax(logits)) != label:
            l2 = float(np.linalg.norm((candidate - image_arr).ravel()))
            if best_l2 is None or l2 < best_l2:
                best_l2, best_counts = l2, counts
    return best_l2, best_counts


def make_attackable_instance(seed, patch_size=2, shape=(3, 4, 4), num_classes=3):
    """One toy attack instance: image, label 0, victim weights, and the
    brute-force optimum. Rejection-samples until the clean image is
    correctly classified and some counts<=3 assignment flips it."""
    for attempt in range(200):
        rng = np.random.default_rng(np.random.SeedSequence([seed, attempt]))
        image_arr = rng.uniform(0.35, 0.7, size=shape)
        weights = rng.normal(0.0, 0.6, size=(num_classes, image_arr.size))
        logits = weights @ image_arr.ravel()
        margin = rng.uniform(0.05, 0.3)
        bias = np.zeros(num_classes)
        runner_up = max(logits[1:])
        bias[0] = -logits[0] + runner_up + margin
        adjusted = weights @ image_arr.ravel() + bias
        if int(np.argmax(adjusted)) != 0:
            continue
        best_l2, best_counts = brightness_brute_force(
            image_arr, weights, bias, 0, patch_size
        )
        if best_l2 is None:
            continue
        return {
            "image": ImageTensor(image_arr),
            "label": 0,
            "weights": weights,
            "bias": bias,
            "optimal_l2": best_l2,
            "optimal_counts": best_counts,
        }
    raise AssertionError(f"no attackable instance found for seed {seed}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_instance():
    return make_attackable_instance(7)


@pytest.fixture
def toy_victim(toy_instance):
    return ToyLinearClassifier(toy_instance["weights"], toy_instance["bias"])
