"""In-process prediction server hosting a toy linear-softmax victim.

Speaks the same binary query protocol the remote-classifier client uses, so
the whole remote code path is exercisable without any external serving
stack. Responses are computed with the same float64 math on float32 inputs
as the in-process classifier, which makes the two paths bit-identical.
"""

from __future__ import annotations

import socketserver
import threading

import numpy as np

from . import wire
from .classifier import load_toy_weights, softmax
from .errors import DistortBenchError, ProtocolError, TransportError


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        while True:
            try:
                frame = wire.read_frame(self.rfile)
            except TransportError:
                return  # peer vanished mid-frame
            except ProtocolError as exc:
                # Bad magic or header: the stream is desynchronized, report
                # once and drop the connection.
                self._reply(wire.encode_error(str(exc)))
                return
            if not frame:
                return
            try:
                batch = wire.decode_predict_request(frame)
                reply = wire.encode_predict_response(self.server.predict(batch))
            except DistortBenchError as exc:
                reply = wire.encode_error(str(exc))
            if not self._reply(reply):
                return

    def _reply(self, frame: bytes) -> bool:
        try:
            self.wfile.write(frame)
            self.wfile.flush()
            return True
        except OSError:
            return False


class ToyServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], weights, bias):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        super().__init__(address, _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def predict(self, batch_f32: np.ndarray) -> np.ndarray:
        flat = batch_f32.astype(np.float64).reshape(batch_f32.shape[0], -1)
        if flat.shape[1] != self.weights.shape[1]:
            raise ProtocolError(
                f"request input size {flat.shape[1]} does not match model "
                f"input size {self.weights.shape[1]}"
            )
        return softmax(flat @ self.weights.T + self.bias)


def serve_toy(weights_path, host: str = "127.0.0.1", port: int = 0) -> ToyServer:
    """Bind a toy server (port 0 picks a free port); caller runs it."""
    weights, bias = load_toy_weights(weights_path)
    return ToyServer((host, port), weights, bias)


def start_background(server: ToyServer) -> threading.Thread:
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return thread
