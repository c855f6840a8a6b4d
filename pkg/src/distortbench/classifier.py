"""Query-only access to victim classifiers, plus query accounting.

The engine never sees anything from a victim except probability vectors.
Toy linear-softmax victims run in process for self-contained experiments;
remote victims are reached over the binary query protocol. Both kinds pass
inputs through float32, the interchange precision, so an in-process toy and
the same toy behind a socket return bit-identical probabilities.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, ProtocolError, TransportError
from . import wire
from .tensor import as_array

log = logging.getLogger(__name__)

MAGIC_TOY = b"DBTOY1"
DEFAULT_MAX_BATCH = 128


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


def toy_linear_predict(weights: np.ndarray, bias: np.ndarray, image) -> np.ndarray:
    """softmax(W @ flatten(x) + b) in float64, no batching or counting."""
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(bias))):
        raise InvalidArgumentError("weights and bias must be finite")
    x = as_array(image).ravel()
    if weights.ndim != 2 or weights.shape[1] != x.size:
        raise InvalidArgumentError(
            f"weight shape {weights.shape} does not match input size {x.size}"
        )
    if bias.shape != (weights.shape[0],):
        raise InvalidArgumentError(f"bias shape {bias.shape} does not match {weights.shape[0]}")
    return softmax(weights @ x + bias)


def save_toy_weights(path, weights: np.ndarray, bias: np.ndarray) -> None:
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weights.ndim != 2 or bias.shape != (weights.shape[0],):
        raise InvalidArgumentError("expected weights (K, D) and bias (K,)")
    k, d = weights.shape
    header = struct.pack("<6sII", MAGIC_TOY, k, d)
    body = weights.astype("<f8").tobytes(order="C") + bias.astype("<f8").tobytes()
    Path(path).write_bytes(header + body)


def load_toy_weights(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    header_size = struct.calcsize("<6sII")
    if len(raw) < header_size:
        raise InvalidArgumentError(f"{path}: truncated weight file")
    magic, k, d = struct.unpack_from("<6sII", raw)
    if magic != MAGIC_TOY:
        raise InvalidArgumentError(f"{path}: bad magic {magic!r}")
    expected = header_size + (k * d + k) * 8
    if len(raw) != expected:
        raise InvalidArgumentError(f"{path}: expected {expected} bytes, got {len(raw)}")
    values = np.frombuffer(raw, dtype="<f8", offset=header_size)
    weights = values[: k * d].reshape(k, d).copy()
    bias = values[k * d :].copy()
    return weights, bias


class QueryCounter:
    """Thread-safe tally of victim queries under both counting conventions."""

    def __init__(self):
        self._lock = threading.Lock()
        self.evaluations = 0
        self.batches = 0

    def record(self, n_images: int) -> None:
        with self._lock:
            self.evaluations += n_images
            self.batches += 1

    def snapshot(self) -> tuple[int, int]:
        with self._lock:
            return self.evaluations, self.batches

    def merge(self, other: "QueryCounter") -> None:
        evals, batches = other.snapshot()
        with self._lock:
            self.evaluations += evals
            self.batches += batches


class Classifier:
    """Base class: batching, shape checks, and query accounting.

    Subclasses implement ``_predict_batch(batch)`` on a float64 (N, C, H, W)
    array and return float64 (N, K) probabilities.
    """

    def __init__(self, num_classes: int | None, max_batch: int = DEFAULT_MAX_BATCH):
        if max_batch < 1:
            raise InvalidArgumentError("max_batch must be >= 1")
        self.num_classes = num_classes
        self.max_batch = max_batch
        self.counter = QueryCounter()

    def predict(self, images) -> np.ndarray:
        arrays = [as_array(img) for img in images]
        if not arrays:
            raise InvalidArgumentError("predict needs at least one image")
        shape = arrays[0].shape
        for arr in arrays:
            if arr.shape != shape:
                raise InvalidArgumentError(f"mixed image shapes {shape} vs {arr.shape}")
        batch = np.stack(arrays)
        rows = []
        for start in range(0, len(arrays), self.max_batch):
            chunk = batch[start : start + self.max_batch]
            out = self._predict_batch(chunk)
            self.counter.record(len(chunk))
            rows.append(np.asarray(out, dtype=np.float64))
        probs = np.concatenate(rows, axis=0)
        if self.num_classes is None:
            self.num_classes = probs.shape[1]
        elif probs.shape[1] != self.num_classes:
            raise ProtocolError(
                f"victim returned {probs.shape[1]} classes, expected {self.num_classes}"
            )
        return probs

    def predict_one(self, image) -> np.ndarray:
        return self.predict([image])[0]

    def _predict_batch(self, batch: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def fork(self) -> "Classifier":
        """Same backend, fresh connection/counter; lets worker threads keep
        exact per-episode query counts. Default: share this handle."""
        return self


class ToyLinearClassifier(Classifier):
    """In-process linear-softmax victim.

    Inputs and outputs are rounded through float32 so the same model served
    over the wire (which transports float32 both ways) is indistinguishable
    from this object, query for query.
    """

    def __init__(self, weights, bias, max_batch: int = DEFAULT_MAX_BATCH):
        weights = np.asarray(weights, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(bias))):
            raise InvalidArgumentError("weights and bias must be finite")
        if weights.ndim != 2 or bias.shape != (weights.shape[0],):
            raise InvalidArgumentError("expected weights (K, D) and bias (K,)")
        super().__init__(num_classes=weights.shape[0], max_batch=max_batch)
        self.weights = weights
        self.bias = bias

    @classmethod
    def from_file(cls, path, max_batch: int = DEFAULT_MAX_BATCH) -> "ToyLinearClassifier":
        weights, bias = load_toy_weights(path)
        return cls(weights, bias, max_batch=max_batch)

    def _predict_batch(self, batch: np.ndarray) -> np.ndarray:
        n = batch.shape[0]
        flat = batch.astype(np.float32).astype(np.float64).reshape(n, -1)
        if flat.shape[1] != self.weights.shape[1]:
            raise InvalidArgumentError(
                f"input size {flat.shape[1]} does not match weights "
                f"(K, {self.weights.shape[1]})"
            )
        probs = softmax(flat @ self.weights.T + self.bias)
        return probs.astype(np.float32).astype(np.float64)

    def fork(self) -> "ToyLinearClassifier":
        return ToyLinearClassifier(self.weights, self.bias, max_batch=self.max_batch)


class ConstantClassifier(Classifier):
    """Returns the same probability vector for every input (test victim)."""

    def __init__(self, probs, max_batch: int = DEFAULT_MAX_BATCH):
        probs = np.asarray(probs, dtype=np.float64)
        super().__init__(num_classes=probs.shape[0], max_batch=max_batch)
        self.probs = probs

    def _predict_batch(self, batch: np.ndarray) -> np.ndarray:
        return np.tile(self.probs, (batch.shape[0], 1))

    def fork(self) -> "ConstantClassifier":
        return ConstantClassifier(self.probs, max_batch=self.max_batch)


#: Responses whose probability sum is off by more than this abort the run.
SUM_ABORT_TOL = 1e-3
#: Off by more than this (but under the abort bound) renormalizes with a warning.
SUM_EXACT_TOL = 1e-5


def check_normalization(probs: np.ndarray, source: str = "remote") -> np.ndarray:
    """Enforce the response-normalization policy on remote probabilities.

    Rows summing within SUM_EXACT_TOL of 1 pass through; within SUM_ABORT_TOL
    they are renormalized with a logged warning (float32 transport slack);
    anything worse, or a meaningfully negative entry, is a protocol error.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if not np.all(np.isfinite(probs)):
        raise ProtocolError(f"{source}: non-finite probabilities")
    if np.min(probs) < -SUM_EXACT_TOL:
        raise ProtocolError(f"{source}: negative probability {np.min(probs):.3g}")
    probs = np.maximum(probs, 0.0)
    sums = probs.sum(axis=-1)
    worst = float(np.max(np.abs(sums - 1.0)))
    if worst <= SUM_EXACT_TOL:
        return probs
    if worst > SUM_ABORT_TOL:
        raise ProtocolError(f"{source}: probability rows sum off by {worst:.3g}")
    log.warning("%s: renormalizing probability rows (worst sum error %.3g)", source, worst)
    return probs / sums[:, None]


class RemoteClassifier(Classifier):
    """Client for a prediction server speaking the binary query protocol.

    Keeps one connection open and serializes requests over it; transport
    failures reconnect and retry a bounded number of times before the
    episode-level TransportError escapes.
    """

    def __init__(
        self,
        host: str,
        port: int,
        max_batch: int = DEFAULT_MAX_BATCH,
        retries: int = 3,
        timeout: float = 30.0,
    ):
        super().__init__(num_classes=None, max_batch=max_batch)
        self.host = host
        self.port = port
        self.retries = retries
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._stream = None
        self._io_lock = threading.Lock()

    def close(self) -> None:
        with self._io_lock:
            self._drop_connection()

    def _drop_connection(self) -> None:
        if self._stream is not None:
            try:
                self._stream.close()
            except OSError:
                pass
            self._stream = None
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None

    def _ensure_connection(self) -> None:
        if self._sock is None:
            sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
            self._sock = sock
            self._stream = sock.makefile("rwb")

    def _roundtrip(self, frame: bytes) -> bytes:
        self._ensure_connection()
        self._stream.write(frame)
        self._stream.flush()
        reply = wire.read_frame(self._stream)
        if not reply:
            raise TransportError("connection closed before response")
        return reply

    def _predict_batch(self, batch: np.ndarray) -> np.ndarray:
        request = wire.encode_predict_request(batch.astype(np.float32))
        last_error: Exception | None = None
        with self._io_lock:
            for attempt in range(self.retries):
                try:
                    reply = self._roundtrip(request)
                    probs = wire.decode_predict_response(reply)
                    return check_normalization(probs, source=f"{self.host}:{self.port}")
                except (OSError, EOFError, TransportError) as exc:
                    last_error = exc
                    self._drop_connection()
                    log.warning(
                        "transport failure to %s:%s (attempt %d/%d): %s",
                        self.host, self.port, attempt + 1, self.retries, exc,
                    )
        raise TransportError(
            f"giving up on {self.host}:{self.port} after {self.retries} attempts: {last_error}"
        )

    def fork(self) -> "RemoteClassifier":
        return RemoteClassifier(
            self.host, self.port, max_batch=self.max_batch,
            retries=self.retries, timeout=self.timeout,
        )


def open_victim(victim: str, endpoint=None, max_batch: int = DEFAULT_MAX_BATCH) -> Classifier:
    """Build a classifier handle from a victim descriptor.

    ``toy:<weights-file>`` loads an in-process linear-softmax victim;
    ``remote`` connects to ``endpoint`` (host, port).
    """
    if victim.startswith("toy:"):
        return ToyLinearClassifier.from_file(victim[len("toy:"):], max_batch=max_batch)
    if victim == "remote":
        if endpoint is None:
            raise InvalidArgumentError("remote victim requires an endpoint (host, port)")
        host, port = endpoint
        return RemoteClassifier(host, int(port), max_batch=max_batch)
    raise InvalidArgumentError(f"unknown victim descriptor {victim!r}")
