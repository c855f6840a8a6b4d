"""Model backends that turn a float32 image batch into probability rows.

Every backend receives intensities in [0, 1] exactly as transported on the
wire and returns one probability row per image. Checkpoints that emit logits
get a softmax applied here, because clients of the protocol expect
probabilities; outputs that are already normalized rows pass through.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

TOY_MAGIC = b"DBTOY1"

#: Channel statistics the standard torchvision zoo was trained with.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ModelLoadError(ValueError):
    """The model spec or checkpoint could not be turned into a servable model."""


@dataclass(frozen=True)
class ServedModel:
    """A loaded classifier plus what a client needs to know to query it."""

    identifier: str
    input_shape: tuple[int, int, int] | None
    preprocessing: str
    predict_fn: Callable[[np.ndarray], np.ndarray] = field(repr=False)

    def predict(self, batch: np.ndarray) -> np.ndarray:
        """float32 batch (N, C, H, W) in [0, 1] -> probability rows (N, K)."""
        return self.predict_fn(batch)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


def _ensure_probabilities(rows: np.ndarray) -> np.ndarray:
    """Softmax logits; leave rows that already sum to one untouched."""
    if np.all(rows >= 0.0) and np.all(np.abs(rows.sum(axis=-1) - 1.0) <= 1e-4):
        return rows
    return _softmax_rows(rows)


def _read_linear_weights(path) -> tuple[np.ndarray, np.ndarray]:
    """DBTOY1 file -> (weights (K, D), bias (K,)), both float64."""
    raw = Path(path).read_bytes()
    head = struct.calcsize("<6sII")
    if len(raw) < head:
        raise ModelLoadError(f"{path}: truncated weight file")
    magic, k, d = struct.unpack_from("<6sII", raw)
    if magic != TOY_MAGIC:
        raise ModelLoadError(f"{path}: bad magic {magic!r}")
    if len(raw) != head + (k * d + k) * 8:
        raise ModelLoadError(f"{path}: size does not match a {k}x{d} weight matrix")
    values = np.frombuffer(raw, dtype="<f8", offset=head)
    return values[: k * d].reshape(k, d).copy(), values[k * d :].copy()


def toy_model(path) -> ServedModel:
    """Linear-softmax classifier over flattened pixels, from a DBTOY1 file."""
    weights, bias = _read_linear_weights(path)
    if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(bias))):
        raise ModelLoadError(f"{path}: weights must be finite")

    def predict(batch: np.ndarray) -> np.ndarray:
        flat = batch.astype(np.float64).reshape(batch.shape[0], -1)
        if flat.shape[1] != weights.shape[1]:
            raise ValueError(
                f"input size {flat.shape[1]} does not match weights (K, {weights.shape[1]})"
            )
        return _softmax_rows(flat @ weights.T + bias)

    return ServedModel(
        identifier=f"toy:{path}",
        input_shape=None,
        preprocessing="unit-interval intensities, flattened",
        predict_fn=predict,
    )


def _torch_predict(module, device: str, normalize: bool):
    import torch

    def predict(batch: np.ndarray) -> np.ndarray:
        # wire frames decode to read-only buffers; torch needs a writable copy
        x = torch.from_numpy(np.array(batch, dtype=np.float32, order="C"))
        if normalize:
            mean = torch.tensor(IMAGENET_MEAN, dtype=torch.float32).view(1, 3, 1, 1)
            std = torch.tensor(IMAGENET_STD, dtype=torch.float32).view(1, 3, 1, 1)
            x = (x - mean) / std
        with torch.no_grad():
            out = module(x.to(device))
        return _ensure_probabilities(out.detach().cpu().double().numpy())

    return predict


def script_model(path, device: str = "cpu") -> ServedModel:
    """TorchScript classifier from disk; the checkpoint owns its preprocessing."""
    import torch

    try:
        module = torch.jit.load(str(path), map_location=device)
    except Exception as exc:
        raise ModelLoadError(f"{path}: {exc}") from exc
    module.eval()
    return ServedModel(
        identifier=f"script:{path}",
        input_shape=None,
        preprocessing="unit-interval intensities, passed through",
        predict_fn=_torch_predict(module, device, normalize=False),
    )


def torchvision_model(spec: str, device: str = "cpu") -> ServedModel:
    """torchvision architecture, optionally with a state dict from disk.

    ``resnet18`` loads the zoo's default pretrained weights (needs the
    download cache); ``resnet18@/path/ckpt.pt`` builds the architecture and
    loads the given state dict instead. Inputs get the standard channel
    normalization the zoo models were trained with.
    """
    import torch
    from torchvision import models

    arch, _, checkpoint = spec.partition("@")
    try:
        weights = None if checkpoint else "DEFAULT"
        module = models.get_model(arch, weights=weights)
    except Exception as exc:
        raise ModelLoadError(f"torchvision:{arch}: {exc}") from exc
    if checkpoint:
        try:
            state = torch.load(checkpoint, map_location=device, weights_only=True)
            module.load_state_dict(state)
        except Exception as exc:
            raise ModelLoadError(f"{checkpoint}: {exc}") from exc
    module.to(device)
    module.eval()
    return ServedModel(
        identifier=f"torchvision:{spec}",
        input_shape=None,
        preprocessing="unit-interval intensities, imagenet channel normalization",
        predict_fn=_torch_predict(module, device, normalize=True),
    )


def load_model(spec: str, device: str = "cpu") -> ServedModel:
    """Parse a ``kind:detail`` model spec and load the matching backend."""
    kind, sep, detail = spec.partition(":")
    if not sep or not detail:
        raise ModelLoadError(f"model spec {spec!r} is not of the form kind:detail")
    if kind == "toy":
        return toy_model(detail)
    if kind == "script":
        return script_model(detail, device=device)
    if kind == "torchvision":
        return torchvision_model(detail, device=device)
    raise ModelLoadError(f"unknown model kind {kind!r} (expected toy, script, or torchvision)")
