"""Length-delimited binary frames for batched prediction over TCP.

This is a standalone implementation of the DBQ1 wire format; it shares no
code with the benchmark engine and interoperates with it byte for byte.

Frame layout, little-endian throughout:

  offset 0  b"DBQ1"
  offset 4  message kind (u8)
  then, per kind:
    1   predict request:  u32 n, c, h, w, then n*c*h*w float32 intensities
                          in [0, 1], image-major, channel-major
    2   predict response: u32 n, k, then n*k float32 probabilities, row-major
    255 error:            u32 byte count, then a UTF-8 message

Every frame declares its own payload size, so a stream can carry frames back
to back with no outer envelope.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"DBQ1"
KIND_REQUEST = 1
KIND_RESPONSE = 2
KIND_ERROR = 255

#: Frames declaring more payload than this are treated as corrupt headers,
#: not allocation requests.
PAYLOAD_LIMIT = 1 << 30


class FrameError(ValueError):
    """The bytes on the wire do not form a valid frame."""


class StreamEnded(Exception):
    """The peer closed the connection in the middle of a frame."""


def kind_of(frame: bytes) -> int:
    if len(frame) < 5:
        raise FrameError("frame shorter than its envelope")
    if frame[:4] != MAGIC:
        raise FrameError(f"bad magic {frame[:4]!r}")
    return frame[4]


def _body(frame: bytes, expected_kind: int) -> bytes:
    kind = kind_of(frame)
    if kind != expected_kind:
        raise FrameError(f"message kind {kind} where {expected_kind} was expected")
    return frame[5:]


def build_request(batch) -> bytes:
    arr = np.ascontiguousarray(batch, dtype="<f4")
    if arr.ndim != 4:
        raise FrameError(f"request batch must be (N, C, H, W), got shape {arr.shape}")
    return (
        MAGIC
        + struct.pack("<BIIII", KIND_REQUEST, *arr.shape)
        + arr.tobytes(order="C")
    )


def parse_request(frame: bytes) -> np.ndarray:
    """Complete request frame -> float32 batch of shape (N, C, H, W)."""
    body = _body(frame, KIND_REQUEST)
    if len(body) < 16:
        raise FrameError("request frame truncated before its dimensions")
    n, c, h, w = struct.unpack_from("<IIII", body)
    nbytes = n * c * h * w * 4
    if nbytes > PAYLOAD_LIMIT:
        raise FrameError(f"request declares {nbytes} payload bytes, over the limit")
    if len(body) - 16 != nbytes:
        raise FrameError(
            f"request declares {n}x{c}x{h}x{w} values but carries {len(body) - 16} bytes"
        )
    return np.frombuffer(body, dtype="<f4", offset=16).reshape(n, c, h, w)


def build_response(rows) -> bytes:
    arr = np.ascontiguousarray(rows, dtype="<f4")
    if arr.ndim != 2:
        raise FrameError(f"response rows must be (N, K), got shape {arr.shape}")
    return (
        MAGIC
        + struct.pack("<BII", KIND_RESPONSE, *arr.shape)
        + arr.tobytes(order="C")
    )


def parse_response(frame: bytes) -> np.ndarray:
    """Complete response frame -> float32 probability rows of shape (N, K)."""
    body = _body(frame, KIND_RESPONSE)
    if len(body) < 8:
        raise FrameError("response frame truncated before its dimensions")
    n, k = struct.unpack_from("<II", body)
    nbytes = n * k * 4
    if nbytes > PAYLOAD_LIMIT:
        raise FrameError(f"response declares {nbytes} payload bytes, over the limit")
    if len(body) - 8 != nbytes:
        raise FrameError(f"response declares {n}x{k} values but carries {len(body) - 8} bytes")
    return np.frombuffer(body, dtype="<f4", offset=8).reshape(n, k)


def build_error(message: str) -> bytes:
    text = message.encode("utf-8")
    return MAGIC + struct.pack("<BI", KIND_ERROR, len(text)) + text


def parse_error(frame: bytes) -> str:
    body = _body(frame, KIND_ERROR)
    if len(body) < 4:
        raise FrameError("error frame truncated before its length field")
    (length,) = struct.unpack_from("<I", body)
    if len(body) - 4 != length:
        raise FrameError(f"error frame declares {length} bytes but carries {len(body) - 4}")
    return body[4:].decode("utf-8", errors="replace")


def _read_exact(stream, count: int) -> bytes:
    parts = []
    need = count
    while need > 0:
        chunk = stream.read(need)
        if not chunk:
            raise StreamEnded("connection closed mid-frame")
        parts.append(chunk)
        need -= len(chunk)
    return b"".join(parts)


def recv_frame(stream) -> bytes:
    """Read one complete frame from a blocking binary stream.

    Returns the raw frame (magic included), or b"" on clean end of stream at
    a frame boundary. Raises FrameError if the stream is not positioned at a
    frame, StreamEnded if the peer hangs up partway through one.
    """
    first = stream.read(1)
    if not first:
        return b""
    head = first + _read_exact(stream, 4)
    if head[:4] != MAGIC:
        raise FrameError(f"bad magic {head[:4]!r}")
    kind = head[4]
    if kind == KIND_REQUEST:
        dims = _read_exact(stream, 16)
        n, c, h, w = struct.unpack("<IIII", dims)
        nbytes = n * c * h * w * 4
    elif kind == KIND_RESPONSE:
        dims = _read_exact(stream, 8)
        n, k = struct.unpack("<II", dims)
        nbytes = n * k * 4
    elif kind == KIND_ERROR:
        dims = _read_exact(stream, 4)
        (nbytes,) = struct.unpack("<I", dims)
    else:
        raise FrameError(f"unknown message kind {kind}")
    if nbytes > PAYLOAD_LIMIT:
        raise FrameError(f"declared payload of {nbytes} bytes exceeds the limit")
    return head + dims + _read_exact(stream, nbytes)
