"""Wire protocol encoding, decoding and validation (server side).

One JSON object per LF-terminated UTF-8 line; floats carry 9 significant
digits. See the engine repository's docs/wire_protocol.md for the
authoritative format.
"""

from __future__ import annotations

import json
import math

import numpy as np

PROTOCOL_VERSION = 1


class RequestError(ValueError):
    """A request line that cannot be served (the connection survives)."""

    def __init__(self, message: str, request_id: int | None = None):
        super().__init__(message)
        self.request_id = request_id


def format_float(value: float) -> str:
    return format(float(value), ".9g")


def encode_handshake(model_name: str, classes: list[str],
                     max_batch: int) -> str:
    return json.dumps(
        {
            "protocol_version": PROTOCOL_VERSION,
            "model_name": model_name,
            "classes": list(classes),
            "max_batch": int(max_batch),
        }
    )


def encode_detections(request_id: int, detections) -> str:
    """``detections``: iterable of (label, score, 7-value box)."""
    items = []
    for label, score, box in detections:
        box_txt = ",".join(format_float(v) for v in box)
        items.append(
            '{"label":%s,"score":%s,"box":[%s]}'
            % (json.dumps(str(label)), format_float(score), box_txt)
        )
    return '{"id":%d,"detections":[%s]}' % (request_id, ",".join(items))


def encode_error(request_id: int | None, message: str) -> str:
    id_txt = "null" if request_id is None else str(int(request_id))
    return '{"id":%s,"error":%s}' % (id_txt, json.dumps(message))


def decode_request(line: str) -> tuple[int, np.ndarray]:
    """Parse and validate one request line into (id, (M, 4) float array)."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise RequestError(f"malformed request line: {exc}") from exc
    if not isinstance(obj, dict):
        raise RequestError("request is not a JSON object")
    request_id = obj.get("id")
    if not isinstance(request_id, int) or isinstance(request_id, bool):
        raise RequestError("request id must be an integer")
    raw = obj.get("points")
    if not isinstance(raw, list):
        raise RequestError("request lacks a points array", request_id)
    try:
        points = np.asarray(raw, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise RequestError(f"unreadable points array: {exc}", request_id)
    if points.size == 0:
        points = points.reshape(0, 4)
    if points.ndim != 2 or points.shape[1] != 4:
        raise RequestError(
            "points must be [x, y, z, intensity] quadruples", request_id
        )
    if not np.isfinite(points).all():
        raise RequestError("points contain non-finite values", request_id)
    return request_id, points


def validate_detections(detections) -> list[tuple[str, float, list[float]]]:
    """Check user-callable output against the protocol invariants.

    Out-of-range values are rejected, never clamped: a detector that
    emits them is broken and silently fixing its output would corrupt
    the analysis.
    """
    out = []
    for item in detections:
        try:
            label, score, box = item
        except (TypeError, ValueError) as exc:
            raise RequestError(
                f"detection must be (label, score, box): {exc}"
            ) from exc
        score = float(score)
        if not math.isfinite(score) or not 0.0 <= score <= 1.0:
            raise RequestError(f"score {score!r} outside [0, 1]")
        box = [float(v) for v in box]
        if len(box) != 7 or not all(math.isfinite(v) for v in box):
            raise RequestError("box must be 7 finite values")
        if min(box[3:6]) <= 0.0:
            raise RequestError("box dimensions must be strictly positive")
        out.append((str(label), score, box))
    return out
