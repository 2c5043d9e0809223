"""Built-in stub detector.

A deterministic geometric detector over raw point arrays: ground removal,
coarse-grid connected-component clustering, principal-axis box fits with
an intensity-based heading, size-gated labels and an evidence-driven
confidence. It exists so the bridge can be exercised end to end (and
compared against an in-process detector) without shipping a neural model.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

CELL = 0.5
MIN_POINTS = 5
GROUND_Z = -1.4
MARKER_INTENSITY = 0.7
EVIDENCE_POINTS = 150.0
EVIDENCE_MARKERS = 8.0
W_POINTS = 2.5
W_MARKERS = 2.0
BIAS = 2.0
SIZE_GATES = {
    "car": ((1.8, 6.5), (0.6, 3.0), (0.3, 2.5)),
    "pedestrian": ((0.1, 1.4), (0.1, 1.4), (0.5, 2.2)),
}

CLASSES = list(SIZE_GATES)


def _sigmoid(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _fit_cluster(pts: np.ndarray):
    xy = pts[:, :2]
    mean = xy.mean(axis=0)
    d = xy - mean
    cxx = float((d[:, 0] * d[:, 0]).mean())
    cyy = float((d[:, 1] * d[:, 1]).mean())
    cxy = float((d[:, 0] * d[:, 1]).mean())
    theta = 0.5 * math.atan2(2.0 * cxy, cxx - cyy)
    ux, uy = math.cos(theta), math.sin(theta)

    weights = pts[:, 3]
    wsum = float(weights.sum())
    if wsum > 0.0:
        off = weights @ d / wsum
        proj = float(off[0] * ux + off[1] * uy)
    else:
        proj = 0.0
    if proj < 0.0:
        ux, uy, theta = -ux, -uy, theta + math.pi
    elif proj == 0.0 and (ux < 0.0 or (ux == 0.0 and uy < 0.0)):
        ux, uy, theta = -ux, -uy, theta + math.pi
    theta = math.fmod(theta + math.pi, 2.0 * math.pi)
    if theta < 0.0:
        theta += 2.0 * math.pi
    theta -= math.pi
    if theta >= math.pi:
        theta -= 2.0 * math.pi

    along = d[:, 0] * ux + d[:, 1] * uy
    across = -d[:, 0] * uy + d[:, 1] * ux
    z = pts[:, 2]
    lo_a, hi_a = float(along.min()), float(along.max())
    lo_c, hi_c = float(across.min()), float(across.max())
    lo_z, hi_z = float(z.min()), float(z.max())
    dims = (
        max(hi_a - lo_a, 0.05),
        max(hi_c - lo_c, 0.05),
        max(hi_z - lo_z, 0.05),
    )
    mid_a, mid_c = 0.5 * (lo_a + hi_a), 0.5 * (lo_c + hi_c)
    center = (
        float(mean[0] + mid_a * ux - mid_c * uy),
        float(mean[1] + mid_a * uy + mid_c * ux),
        0.5 * (lo_z + hi_z),
    )

    label = None
    for name, gates in SIZE_GATES.items():
        if all(lo <= dims[i] <= hi for i, (lo, hi) in enumerate(gates)):
            label = name
            break
    if label is None:
        return None

    n = len(pts)
    markers = int((weights >= MARKER_INTENSITY).sum())
    conf = _sigmoid(
        W_POINTS * (n / EVIDENCE_POINTS)
        + W_MARKERS * min(markers / EVIDENCE_MARKERS, 1.0)
        - BIAS
    )
    box = [center[0], center[1], center[2], dims[0], dims[1], dims[2],
           theta]
    return (label, conf, box)


def detect(points: np.ndarray) -> list[tuple[str, float, list[float]]]:
    """Map an (M, 4) array of (x, y, z, intensity) to detections."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        return []
    order = np.lexsort((pts[:, 3], pts[:, 2], pts[:, 1], pts[:, 0]))
    pts = pts[order]
    pts = pts[pts[:, 2] > GROUND_Z]
    if len(pts) < MIN_POINTS:
        return []

    cells = np.floor(pts[:, :3] / CELL).astype(np.int64)
    mins = cells.min(axis=0)
    cells -= mins
    shape = cells.max(axis=0) + 1
    grid = np.zeros(shape, dtype=bool)
    grid[cells[:, 0], cells[:, 1], cells[:, 2]] = True
    labels, n_clusters = ndimage.label(
        grid, structure=np.ones((3, 3, 3), dtype=int)
    )
    point_label = labels[cells[:, 0], cells[:, 1], cells[:, 2]]

    detections = []
    counts = np.bincount(point_label, minlength=n_clusters + 1)
    group = np.argsort(point_label, kind="stable")
    bounds = np.cumsum(counts)
    for lab in range(1, n_clusters + 1):
        if counts[lab] < MIN_POINTS:
            continue
        members = group[bounds[lab - 1] : bounds[lab]]
        det = _fit_cluster(pts[members])
        if det is not None:
            detections.append(det)
    return detections
