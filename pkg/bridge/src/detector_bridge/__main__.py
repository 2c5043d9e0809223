"""Command-line entry: host the built-in stub or a user-supplied callable
behind the wire protocol.

    python -m detector_bridge --stub
    python -m detector_bridge --callable mypkg.inference:detect \
        --classes car,truck --model-name my-model --max-batch 4
    python -m detector_bridge --stub --tcp 9178
"""

from __future__ import annotations

import argparse
import importlib
import sys

from .server import BridgeConfig, serve


def load_callable(spec: str):
    module_name, sep, attr = spec.partition(":")
    if not sep:
        raise SystemExit(
            f"error: --callable must look like 'module:function', "
            f"got {spec!r}"
        )
    module = importlib.import_module(module_name)
    try:
        return getattr(module, attr)
    except AttributeError as exc:
        raise SystemExit(f"error: {exc}") from exc


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="detector-bridge")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument(
        "--stub", action="store_true",
        help="serve the built-in geometric stub detector",
    )
    source.add_argument(
        "--callable",
        help="module:function mapping an (M, 4) array to detections",
    )
    parser.add_argument("--model-name", default=None)
    parser.add_argument("--classes", default=None,
                        help="comma-separated class labels")
    parser.add_argument("--max-batch", type=int, default=8)
    parser.add_argument("--tcp", type=int, default=None,
                        help="serve one TCP connection on this port")
    args = parser.parse_args(argv)

    if args.stub:
        from . import stub

        detector = stub.detect
        model_name = args.model_name or "bridge-stub"
        classes = (
            args.classes.split(",") if args.classes else stub.CLASSES
        )
    else:
        detector = load_callable(args.callable)
        model_name = args.model_name or args.callable
        classes = args.classes.split(",") if args.classes else []

    config = BridgeConfig(
        detector=detector,
        model_name=model_name,
        classes=tuple(classes),
        max_batch=args.max_batch,
        tcp_port=args.tcp,
    )
    return serve(config)


if __name__ == "__main__":
    sys.exit(main())
