"""Command line entry: embed-sidecar --model <name-or-path> [--port ...]."""
from __future__ import annotations

import argparse

from .app import serve
from .config import SidecarConfig


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="embed-sidecar")
    parser.add_argument("--model", required=True,
                        help="transformers model id or local directory")
    parser.add_argument("--layer", type=int, default=0,
                        help="default hidden-state layer when requests omit one")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--max-text-length", type=int, default=4096)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8765)
    args = parser.parse_args(argv)
    config = SidecarConfig(
        model_name=args.model,
        layer=args.layer,
        device=args.device,
        max_text_length=args.max_text_length,
    )
    serve(config, host=args.host, port=args.port)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
