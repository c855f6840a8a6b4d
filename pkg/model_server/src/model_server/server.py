"""TCP server that answers prediction frames with probability frames.

Each connection is an independent loop: read one frame, answer one frame.
Responses depend only on the request and the loaded model, never on
connection history, so any number of clients can share one server.
"""

from __future__ import annotations

import socketserver
import threading

from . import protocol
from .backends import ServedModel

DEFAULT_MAX_BATCH = 128


def handle_predict(frame: bytes, model: ServedModel, max_batch: int = DEFAULT_MAX_BATCH) -> bytes:
    """One request frame in, one response or error frame out.

    Malformed frames and model failures both come back as error frames, so
    the caller always has exactly one reply to forward.
    """
    try:
        batch = protocol.parse_request(frame)
    except protocol.FrameError as exc:
        return protocol.build_error(str(exc))
    if batch.shape[0] > max_batch:
        return protocol.build_error(
            f"batch of {batch.shape[0]} exceeds the server limit of {max_batch}"
        )
    if model.input_shape is not None and tuple(batch.shape[1:]) != model.input_shape:
        return protocol.build_error(
            f"model {model.identifier} expects {model.input_shape}, got {tuple(batch.shape[1:])}"
        )
    try:
        rows = model.predict(batch)
        return protocol.build_response(rows)
    except Exception as exc:
        return protocol.build_error(f"{type(exc).__name__}: {exc}")


class _Connection(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        server: PredictionServer = self.server
        while True:
            try:
                frame = protocol.recv_frame(self.rfile)
            except protocol.StreamEnded:
                return
            except protocol.FrameError as exc:
                # The stream is desynchronized; report once and hang up,
                # since frame boundaries cannot be recovered.
                self._reply(protocol.build_error(str(exc)))
                return
            if not frame:
                return
            if not self._reply(handle_predict(frame, server.model, server.max_batch)):
                return

    def _reply(self, frame: bytes) -> bool:
        try:
            self.wfile.write(frame)
            self.wfile.flush()
            return True
        except (BrokenPipeError, ConnectionResetError):
            return False


class PredictionServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], model: ServedModel,
                 max_batch: int = DEFAULT_MAX_BATCH):
        super().__init__(address, _Connection)
        self.model = model
        self.max_batch = max_batch

    @property
    def port(self) -> int:
        return self.server_address[1]


def serve(model: ServedModel, host: str = "127.0.0.1", port: int = 0,
          max_batch: int = DEFAULT_MAX_BATCH) -> PredictionServer:
    """Bind a server for the model; port 0 picks a free one."""
    return PredictionServer((host, port), model, max_batch=max_batch)


def start_in_background(server: PredictionServer) -> threading.Thread:
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return thread
