"""Deterministic geometric detector over synthetic scenes.

The pipeline is intentionally simple and analyzable: drop near-ground
points, cluster the rest on a coarse grid with 26-connectivity, fit an
oriented box per cluster from its ground-plane principal axis, gate the
label by size, and score confidence by how much evidence the cluster
carries. High-intensity marker points count extra and also pin down the
heading sign, which makes them genuinely more important to the detector
than plain surface points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..core import Box3D, Detection, PointCloud, normalize_yaw
from .base import DetectorBackend

DEFAULT_SIZE_GATES: dict[str, tuple[tuple[float, float], ...]] = {
    # (length range, width range, height range) of the fitted extents
    "car": ((1.8, 6.5), (0.6, 3.0), (0.3, 2.5)),
    "pedestrian": ((0.1, 1.4), (0.1, 1.4), (0.5, 2.2)),
}

# permissive single-class gate for evaluation scenes where detections must
# survive heavy point removal without falling out of the gate
WIDE_CAR_GATE: dict[str, tuple[tuple[float, float], ...]] = {
    "car": ((0.02, 9.0), (0.02, 5.0), (0.02, 4.0)),
}


@dataclass(frozen=True)
class MockDetectorConfig:
    cell: float = 0.5
    min_points: int = 5
    ground_z: float | None = -1.4  # drop points at or below this height
    marker_intensity: float = 0.7
    evidence_points: float = 150.0  # cluster size scaling the point term
    evidence_markers: float = 8.0  # marker count saturating the marker term
    w_points: float = 2.5
    w_markers: float = 2.0
    bias: float = 2.0
    size_gates: dict[str, tuple[tuple[float, float], ...]] = field(
        default_factory=lambda: dict(DEFAULT_SIZE_GATES)
    )


def _sigmoid(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _fit_cluster(
    pts: np.ndarray, cfg: MockDetectorConfig
) -> Detection | None:
    xy = pts[:, :2]
    mean = xy.mean(axis=0)
    d = xy - mean
    cxx = float((d[:, 0] * d[:, 0]).mean())
    cyy = float((d[:, 1] * d[:, 1]).mean())
    cxy = float((d[:, 0] * d[:, 1]).mean())
    theta = 0.5 * math.atan2(2.0 * cxy, cxx - cyy)
    ux, uy = math.cos(theta), math.sin(theta)

    # orient the heading toward the intensity-weighted side of the cluster;
    # reflective markers sit on the front face, so this sign is stable as
    # long as they are visible
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
    theta = normalize_yaw(theta)

    along = d[:, 0] * ux + d[:, 1] * uy
    across = -d[:, 0] * uy + d[:, 1] * ux
    z = pts[:, 2]
    lo_a, hi_a = float(along.min()), float(along.max())
    lo_c, hi_c = float(across.min()), float(across.max())
    lo_z, hi_z = float(z.min()), float(z.max())
    dims = np.array(
        [
            max(hi_a - lo_a, 0.05),
            max(hi_c - lo_c, 0.05),
            max(hi_z - lo_z, 0.05),
        ]
    )
    mid_a, mid_c = 0.5 * (lo_a + hi_a), 0.5 * (lo_c + hi_c)
    center = np.array(
        [
            mean[0] + mid_a * ux - mid_c * uy,
            mean[1] + mid_a * uy + mid_c * ux,
            0.5 * (lo_z + hi_z),
        ]
    )

    label = None
    for name, gates in cfg.size_gates.items():
        if all(lo <= dims[i] <= hi for i, (lo, hi) in enumerate(gates)):
            label = name
            break
    if label is None:
        return None

    n = len(pts)
    markers = int((weights >= cfg.marker_intensity).sum())
    conf = _sigmoid(
        cfg.w_points * (n / cfg.evidence_points)
        + cfg.w_markers * min(markers / cfg.evidence_markers, 1.0)
        - cfg.bias
    )
    return Detection(label, conf, Box3D(center, dims, theta))


class MockDetector(DetectorBackend):
    """Pure, permutation-invariant detector; callable concurrently."""

    max_batch: int | None = None
    supports_empty_cloud = True

    def __init__(self, cfg: MockDetectorConfig | None = None):
        self.cfg = cfg or MockDetectorConfig()

    def detect(self, cloud: PointCloud) -> list[Detection]:
        cfg = self.cfg
        pts = cloud.points
        if len(pts) == 0:
            return []
        # canonical point order makes every downstream reduction exactly
        # permutation-invariant
        order = np.lexsort((pts[:, 3], pts[:, 2], pts[:, 1], pts[:, 0]))
        pts = pts[order]
        if cfg.ground_z is not None:
            pts = pts[pts[:, 2] > cfg.ground_z]
        if len(pts) < cfg.min_points:
            return []

        cells = np.floor(pts[:, :3] / cfg.cell).astype(np.int64)
        mins = cells.min(axis=0)
        cells -= mins
        shape = cells.max(axis=0) + 1
        grid = np.zeros(shape, dtype=bool)
        grid[cells[:, 0], cells[:, 1], cells[:, 2]] = True
        labels, n_clusters = ndimage.label(
            grid, structure=np.ones((3, 3, 3), dtype=int)
        )
        point_label = labels[cells[:, 0], cells[:, 1], cells[:, 2]]

        detections: list[Detection] = []
        counts = np.bincount(point_label, minlength=n_clusters + 1)
        group = np.argsort(point_label, kind="stable")
        bounds = np.cumsum(counts)
        for lab in range(1, n_clusters + 1):
            if counts[lab] < cfg.min_points:
                continue
            members = group[bounds[lab - 1] : bounds[lab]]
            det = _fit_cluster(pts[members], cfg)
            if det is not None:
                detections.append(det)
        return detections
