"""Client for the external-detector wire protocol.

One JSON object per LF-terminated UTF-8 line. The server speaks first with
a handshake, then answers each request exactly once, in any order:

    handshake  {"protocol_version": 1, "model_name": ..., "classes": [...],
                "max_batch": N}
    request    {"id": I, "points": [[x, y, z, intensity], ...]}
    response   {"id": I, "detections": [{"label": L, "score": S,
                "box": [cx, cy, cz, dx, dy, dz, yaw]}]}
    error      {"id": I, "error": "message"}

Floats are serialized with 9 significant digits. The full format lives in
docs/wire_protocol.md. Transport is the stdio of a spawned child process
by default, or a TCP socket.
"""

from __future__ import annotations

import json
import math
import queue
import shlex
import socket
import subprocess
import threading
import time
from dataclasses import dataclass

import numpy as np

from ..core import (
    Box3D,
    Detection,
    DetectorError,
    InvalidArgumentError,
    PointCloud,
    ProtocolError,
)
from .base import DetectorBackend

PROTOCOL_VERSION = 1


def format_float(value: float) -> str:
    """Canonical wire representation: 9 significant digits."""
    return format(float(value), ".9g")


def encode_request(request_id: int, points: np.ndarray) -> str:
    rows = ",".join(
        "[%s,%s,%s,%s]"
        % (
            format_float(p[0]),
            format_float(p[1]),
            format_float(p[2]),
            format_float(p[3]),
        )
        for p in points.tolist()
    )
    return '{"id":%d,"points":[%s]}' % (request_id, rows)


@dataclass(frozen=True)
class WireConfig:
    command: str | None = None  # child process, stdio transport
    tcp: tuple[str, int] | None = None  # alternative TCP transport
    timeout: float = 60.0  # per batch, seconds
    supports_empty_cloud: bool = False

    def __post_init__(self) -> None:
        if (self.command is None) == (self.tcp is None):
            raise InvalidArgumentError(
                "exactly one of command or tcp must be given"
            )
        if self.timeout <= 0.0:
            raise InvalidArgumentError("timeout must be positive")


class WireDetector(DetectorBackend):
    """Single-writer/single-reader client with an in-flight window of
    ``max_batch`` requests. ``detect_batch`` may be called from several
    engine workers; calls are serialized internally."""

    def __init__(self, config: WireConfig | str):
        if isinstance(config, str):
            config = WireConfig(command=config)
        self.config = config
        self._lock = threading.Lock()
        self._next_id = 0
        self._proc: subprocess.Popen | None = None
        self._sock: socket.socket | None = None
        if config.command is not None:
            self._proc = subprocess.Popen(
                shlex.split(config.command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
            self._writer = self._proc.stdin
            read_stream = self._proc.stdout
        else:
            host, port = config.tcp
            self._sock = socket.create_connection((host, port))
            self._writer = self._sock.makefile("w", encoding="utf-8")
            read_stream = self._sock.makefile("r", encoding="utf-8")
        self._lines: queue.Queue[str | None] = queue.Queue()
        self._reader = threading.Thread(
            target=self._pump, args=(read_stream,), daemon=True
        )
        self._reader.start()

        hello = self._parse_json(self._next_line(config.timeout))
        version = hello.get("protocol_version")
        if version != PROTOCOL_VERSION:
            raise ProtocolError(
                f"unsupported protocol_version {version!r}; "
                f"expected {PROTOCOL_VERSION}"
            )
        try:
            self.model_name = str(hello["model_name"])
            self.classes = [str(c) for c in hello["classes"]]
            self.max_batch = int(hello["max_batch"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed handshake: {exc}") from exc
        if self.max_batch < 1:
            raise ProtocolError("handshake max_batch must be >= 1")
        self.supports_empty_cloud = config.supports_empty_cloud

    # -- transport ---------------------------------------------------------

    def _pump(self, stream) -> None:
        try:
            for line in stream:
                self._lines.put(line)
        except (OSError, ValueError):
            pass
        self._lines.put(None)

    def _next_line(self, timeout: float) -> str:
        try:
            line = self._lines.get(timeout=timeout)
        except queue.Empty:
            raise DetectorError(
                f"detector timed out after {timeout:.1f}s"
            ) from None
        if line is None:
            code = self._proc.poll() if self._proc else None
            raise DetectorError(
                f"detector stream closed (exit code {code})"
            )
        return line

    def _send(self, text: str) -> None:
        try:
            self._writer.write(text + "\n")
            self._writer.flush()
        except (BrokenPipeError, OSError) as exc:
            raise DetectorError(f"detector pipe broken: {exc}") from exc

    # -- protocol ----------------------------------------------------------

    @staticmethod
    def _parse_json(line: str) -> dict:
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(
                f"malformed response line ({exc}): {line.rstrip()!r}"
            ) from exc
        if not isinstance(obj, dict):
            raise ProtocolError(
                f"response is not an object: {line.rstrip()!r}"
            )
        return obj

    @staticmethod
    def _parse_detections(obj: dict, line: str) -> list[Detection]:
        if "error" in obj:
            raise DetectorError(f"detector reported: {obj['error']}")
        raw = obj.get("detections")
        if not isinstance(raw, list):
            raise ProtocolError(
                f"response lacks a detections array: {line.rstrip()!r}"
            )
        out = []
        for item in raw:
            try:
                box = [float(v) for v in item["box"]]
                if len(box) != 7 or not all(math.isfinite(v) for v in box):
                    raise InvalidArgumentError("box must be 7 finite values")
                out.append(
                    Detection(
                        label=str(item["label"]),
                        confidence=float(item["score"]),
                        box=Box3D(box[0:3], box[3:6], box[6]),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ProtocolError(
                    f"invalid detection ({exc}): {line.rstrip()!r}"
                ) from exc
        return out

    # -- backend interface ---------------------------------------------------

    def detect(self, cloud: PointCloud) -> list[Detection]:
        return self.detect_batch([cloud])[0]

    def detect_batch(self, clouds: list[PointCloud]) -> list[list[Detection]]:
        with self._lock:
            return self._detect_batch_locked(clouds)

    def _detect_batch_locked(self, clouds):
        results: list[list[Detection] | None] = [None] * len(clouds)
        sendable: list[tuple[int, PointCloud]] = []
        for pos, cloud in enumerate(clouds):
            if len(cloud) == 0 and not self.supports_empty_cloud:
                results[pos] = []
            else:
                sendable.append((pos, cloud))
        deadline = time.monotonic() + self.config.timeout
        pending: dict[int, int] = {}
        cursor = 0
        while cursor < len(sendable) or pending:
            while cursor < len(sendable) and len(pending) < self.max_batch:
                pos, cloud = sendable[cursor]
                req_id = self._next_id
                self._next_id += 1
                pending[req_id] = pos
                self._send(encode_request(req_id, cloud.points))
                cursor += 1
            remaining = deadline - time.monotonic()
            if remaining <= 0.0:
                raise DetectorError(
                    f"detector timed out after {self.config.timeout:.1f}s "
                    f"with {len(pending)} responses outstanding"
                )
            line = self._next_line(remaining)
            obj = self._parse_json(line)
            resp_id = obj.get("id")
            if resp_id not in pending:
                raise ProtocolError(
                    f"unexpected response id {resp_id!r}: {line.rstrip()!r}"
                )
            results[pending.pop(resp_id)] = self._parse_detections(obj, line)
        return results  # type: ignore[return-value]

    def close(self) -> None:
        if self._proc is not None:
            try:
                if self._proc.stdin:
                    self._proc.stdin.close()
                self._proc.wait(timeout=5)
            except (OSError, subprocess.TimeoutExpired):
                self._proc.kill()
                self._proc.wait()
            self._reader.join(timeout=5)
            if self._proc.stdout:
                self._proc.stdout.close()
        if self._sock is not None:
            try:
                self._writer.flush()
                self._sock.shutdown(socket.SHUT_WR)  # EOF for the server
            except OSError:
                pass
            self._sock.close()

    def __enter__(self) -> "WireDetector":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
