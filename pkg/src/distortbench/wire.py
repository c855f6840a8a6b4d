"""Binary query protocol spoken between the generator and prediction servers.

Every frame starts with the 4-byte magic ``DBQ1`` and a one-byte message
type; all integers are little-endian u32 and all tensor payloads float32.

  type 1 (predict request):  N, C, H, W, then N*C*H*W intensities in [0, 1],
                             image-major, channel-major
  type 2 (predict response): N, K, then N*K probabilities, row-major
  type 255 (error):          byte length, then a UTF-8 message

Frames carry enough header to be length-delimited, so a stream reader can
recover message boundaries without any outer envelope.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ProtocolError, TransportError

MAGIC = b"DBQ1"
MSG_PREDICT_REQUEST = 1
MSG_PREDICT_RESPONSE = 2
MSG_ERROR = 255

#: Upper bound on a single frame's payload; anything larger is treated as a
#: corrupt header rather than an allocation request.
MAX_PAYLOAD_BYTES = 1 << 30


def encode_predict_request(images) -> bytes:
    batch = np.ascontiguousarray(np.asarray(images, dtype=np.float64))
    if batch.ndim != 4:
        raise ProtocolError(f"request batch must be 4-D (N,C,H,W), got {batch.shape}")
    n, c, h, w = batch.shape
    header = MAGIC + struct.pack("<BIIII", MSG_PREDICT_REQUEST, n, c, h, w)
    return header + batch.astype("<f4").tobytes(order="C")


def decode_predict_request(frame: bytes) -> np.ndarray:
    """Complete request frame -> float32 batch of shape (N, C, H, W)."""
    body = _check_envelope(frame, MSG_PREDICT_REQUEST)
    if len(body) < 16:
        raise ProtocolError("truncated request header")
    n, c, h, w = struct.unpack_from("<IIII", body)
    expected = n * c * h * w * 4
    if expected > MAX_PAYLOAD_BYTES:
        raise ProtocolError(f"request payload of {expected} bytes exceeds limit")
    payload = body[16:]
    if len(payload) != expected:
        raise ProtocolError(
            f"request declares {n}x{c}x{h}x{w} values but carries {len(payload)} bytes"
        )
    data = np.frombuffer(payload, dtype="<f4")
    return data.reshape(n, c, h, w)


def encode_predict_response(probs) -> bytes:
    rows = np.ascontiguousarray(np.asarray(probs, dtype=np.float64))
    if rows.ndim != 2:
        raise ProtocolError(f"response must be 2-D (N,K), got {rows.shape}")
    n, k = rows.shape
    header = MAGIC + struct.pack("<BII", MSG_PREDICT_RESPONSE, n, k)
    return header + rows.astype("<f4").tobytes(order="C")


def decode_predict_response(frame: bytes) -> np.ndarray:
    """Complete response frame -> float64 probabilities of shape (N, K).

    An error frame raises ProtocolError with the server's message.
    """
    msg_type = _frame_type(frame)
    if msg_type == MSG_ERROR:
        raise ProtocolError(f"server error: {decode_error(frame)}")
    body = _check_envelope(frame, MSG_PREDICT_RESPONSE)
    if len(body) < 8:
        raise ProtocolError("truncated response header")
    n, k = struct.unpack_from("<II", body)
    expected = n * k * 4
    if expected > MAX_PAYLOAD_BYTES:
        raise ProtocolError(f"response payload of {expected} bytes exceeds limit")
    payload = body[8:]
    if len(payload) != expected:
        raise ProtocolError(f"response declares {n}x{k} values but carries {len(payload)} bytes")
    data = np.frombuffer(payload, dtype="<f4")
    return data.reshape(n, k).astype(np.float64)


def encode_error(message: str) -> bytes:
    text = message.encode("utf-8")
    return MAGIC + struct.pack("<BI", MSG_ERROR, len(text)) + text


def decode_error(frame: bytes) -> str:
    body = _check_envelope(frame, MSG_ERROR)
    if len(body) < 4:
        raise ProtocolError("truncated error header")
    (length,) = struct.unpack_from("<I", body)
    payload = body[4:]
    if len(payload) != length:
        raise ProtocolError(f"error frame declares {length} bytes but carries {len(payload)}")
    return payload.decode("utf-8", errors="replace")


def _frame_type(frame: bytes) -> int:
    if len(frame) < 5:
        raise ProtocolError("frame shorter than envelope")
    if frame[:4] != MAGIC:
        raise ProtocolError(f"bad magic {frame[:4]!r}")
    return frame[4]


def _check_envelope(frame: bytes, expected_type: int) -> bytes:
    msg_type = _frame_type(frame)
    if msg_type != expected_type:
        raise ProtocolError(f"unexpected message type {msg_type} (wanted {expected_type})")
    return frame[5:]


def _read_exact(stream, count: int) -> bytes:
    chunks = []
    remaining = count
    while remaining > 0:
        chunk = stream.read(remaining)
        if not chunk:
            raise TransportError("connection closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(stream) -> bytes:
    """Read one complete frame from a blocking binary stream.

    Returns the raw frame bytes (magic included) ready for the decoders;
    returns b"" on clean EOF at a frame boundary.
    """
    first = stream.read(1)
    if not first:
        return b""
    head = first + _read_exact(stream, 4)
    if head[:4] != MAGIC:
        raise ProtocolError(f"bad magic {head[:4]!r}")
    msg_type = head[4]
    if msg_type == MSG_PREDICT_REQUEST:
        dims = _read_exact(stream, 16)
        n, c, h, w = struct.unpack("<IIII", dims)
        size = n * c * h * w * 4
    elif msg_type == MSG_PREDICT_RESPONSE:
        dims = _read_exact(stream, 8)
        n, k = struct.unpack("<II", dims)
        size = n * k * 4
    elif msg_type == MSG_ERROR:
        dims = _read_exact(stream, 4)
        (size,) = struct.unpack("<I", dims)
    else:
        raise ProtocolError(f"unknown message type {msg_type}")
    if size > MAX_PAYLOAD_BYTES:
        raise ProtocolError(f"declared payload of {size} bytes exceeds limit")
    return head + dims + _read_exact(stream, size)
