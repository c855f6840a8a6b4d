"""Command line front end: load a model and serve it until interrupted."""

from __future__ import annotations

import argparse
import sys

from .backends import ModelLoadError, load_model
from .server import DEFAULT_MAX_BATCH, serve


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="model-server",
        description="Serve an image classifier behind the DBQ1 prediction protocol.",
    )
    parser.add_argument(
        "--model",
        required=True,
        help="toy:<weights.dbtoy>, script:<module.pt>, or torchvision:<arch>[@<state_dict.pt>]",
    )
    parser.add_argument("--host", default="127.0.0.1", help="bind address (default 127.0.0.1)")
    parser.add_argument("--port", type=int, default=0, help="bind port; 0 picks a free one")
    parser.add_argument("--device", default="cpu", help="inference device for torch backends")
    parser.add_argument(
        "--max-batch",
        type=int,
        default=DEFAULT_MAX_BATCH,
        help=f"largest batch accepted per request (default {DEFAULT_MAX_BATCH})",
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.max_batch < 1:
        print("--max-batch must be at least 1", file=sys.stderr)
        return 2
    try:
        model = load_model(args.model, device=args.device)
    except ModelLoadError as exc:
        print(f"cannot load model: {exc}", file=sys.stderr)
        return 2
    server = serve(model, host=args.host, port=args.port, max_batch=args.max_batch)
    print(f"serving {model.identifier} on {args.host}:{server.port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
