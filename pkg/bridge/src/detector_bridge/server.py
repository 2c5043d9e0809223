"""The request-serving loop: handshake, then answer every request line
until the peer closes the stream.

One batch is processed at a time (real detectors are usually not
reentrant); a failing user callable produces an error response for that
id and the process keeps serving.
"""

from __future__ import annotations

import socket
import sys
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .protocol import (
    RequestError,
    decode_request,
    encode_detections,
    encode_error,
    encode_handshake,
    validate_detections,
)

Detector = Callable[[np.ndarray], list]


@dataclass(frozen=True)
class BridgeConfig:
    detector: Detector
    model_name: str = "bridge"
    classes: tuple[str, ...] = ()
    max_batch: int = 8
    tcp_port: int | None = None  # None: serve on stdio

    def __post_init__(self) -> None:
        if self.max_batch < 1:
            raise ValueError("max_batch must be >= 1")
        if not callable(self.detector):
            raise ValueError("detector must be callable")


def serve_streams(config: BridgeConfig, lines, write) -> None:
    """Serve the protocol over any (line iterator, write function) pair."""
    write(
        encode_handshake(
            config.model_name, list(config.classes), config.max_batch
        )
    )
    for line in lines:
        if not line.strip():
            continue
        try:
            request_id, points = decode_request(line)
        except RequestError as exc:
            write(encode_error(exc.request_id, str(exc)))
            continue
        try:
            raw = config.detector(points)
            detections = validate_detections(raw)
        except RequestError as exc:
            write(encode_error(request_id, str(exc)))
            continue
        except Exception as exc:  # the process must outlive bad inputs
            write(encode_error(request_id, f"detector failed: {exc}"))
            continue
        write(encode_detections(request_id, detections))


def serve(config: BridgeConfig) -> int:
    if config.tcp_port is None:
        out = sys.stdout

        def write(text: str) -> None:
            out.write(text + "\n")
            out.flush()

        serve_streams(config, sys.stdin, write)
        return 0

    with socket.create_server(("127.0.0.1", config.tcp_port)) as server:
        conn, _ = server.accept()
        with conn:
            reader = conn.makefile("r", encoding="utf-8")
            writer = conn.makefile("w", encoding="utf-8")

            def write(text: str) -> None:
                writer.write(text + "\n")
                writer.flush()

            serve_streams(config, reader, write)
    return 0
