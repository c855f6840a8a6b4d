"""Image-classifier serving over the DBQ1 batched prediction protocol."""

from .backends import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    ModelLoadError,
    ServedModel,
    load_model,
    script_model,
    torchvision_model,
    toy_model,
)
from .protocol import (
    FrameError,
    StreamEnded,
    build_error,
    build_request,
    build_response,
    kind_of,
    parse_error,
    parse_request,
    parse_response,
    recv_frame,
)
from .server import (
    DEFAULT_MAX_BATCH,
    PredictionServer,
    handle_predict,
    serve,
    start_in_background,
)

__all__ = [
    "IMAGENET_MEAN",
    "IMAGENET_STD",
    "ModelLoadError",
    "ServedModel",
    "load_model",
    "script_model",
    "torchvision_model",
    "toy_model",
    "FrameError",
    "StreamEnded",
    "build_error",
    "build_request",
    "build_response",
    "kind_of",
    "parse_error",
    "parse_request",
    "parse_response",
    "recv_frame",
    "DEFAULT_MAX_BATCH",
    "PredictionServer",
    "handle_predict",
    "serve",
    "start_in_background",
]
