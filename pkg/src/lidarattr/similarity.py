"""Detection similarity: how well a target detection survives in a perturbed
detector output.

The pairwise score is the product of six sub-metrics (class match, box
overlap, confidence, translation, scale, orientation), and the per-target
score against a whole detection set is the maximum pairwise product. All
functions are pure and safe for unrestricted parallel use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .core import Box3D, Detection, InvalidArgumentError, normalize_yaw

# Intersection areas below this (m^2) are treated as measure-zero contact,
# so touching faces/edges yield IoU == 0.
_AREA_EPS = 1e-12

SUBMETRIC_NAMES = (
    "class",
    "overlap",
    "confidence",
    "translation",
    "scale",
    "orientation",
)


@dataclass(frozen=True)
class SimilarityBreakdown:
    """Per-pair sub-metric values alongside their product.

    ``matched_index`` is the index of the arg-max perturbed detection when
    the breakdown comes out of :func:`best_similarity`, else None.
    """

    s_class: float
    s_overlap: float
    s_conf: float
    s_translation: float
    s_scale: float
    s_orientation: float
    product: float
    matched_index: int | None = None

    @classmethod
    def empty(cls) -> "SimilarityBreakdown":
        """Breakdown for 'object not detected at all': everything zero."""
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, None)

    def field_values(self) -> tuple[float, ...]:
        return (
            self.s_class,
            self.s_overlap,
            self.s_conf,
            self.s_translation,
            self.s_scale,
            self.s_orientation,
        )


def bev_corners(box: Box3D) -> list[tuple[float, float]]:
    """Counter-clockwise ground-plane corners of a yaw-rotated box."""
    cx, cy = float(box.center[0]), float(box.center[1])
    hl, hw = 0.5 * float(box.dims[0]), 0.5 * float(box.dims[1])
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    out = []
    for dx, dy in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)):
        out.append((cx + c * dx - s * dy, cy + s * dx + c * dy))
    return out


def _polygon_area(poly: list[tuple[float, float]]) -> float:
    if len(poly) < 3:
        return 0.0
    area = 0.0
    x0, y0 = poly[-1]
    for x1, y1 in poly:
        area += x0 * y1 - x1 * y0
        x0, y0 = x1, y1
    return 0.5 * abs(area)


def _clip_convex(
    subject: list[tuple[float, float]], clip: list[tuple[float, float]]
) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clip of a convex subject by a CCW convex polygon."""
    output = subject
    ax, ay = clip[-1]
    for bx, by in clip:
        if not output:
            break
        ex, ey = bx - ax, by - ay
        input_poly = output
        output = []
        px, py = input_poly[-1]
        p_side = ex * (py - ay) - ey * (px - ax)
        for qx, qy in input_poly:
            q_side = ex * (qy - ay) - ey * (qx - ax)
            if (q_side >= 0.0) != (p_side >= 0.0):
                t = p_side / (p_side - q_side)
                output.append((px + t * (qx - px), py + t * (qy - py)))
            if q_side >= 0.0:
                output.append((qx, qy))
            px, py, p_side = qx, qy, q_side
        ax, ay = bx, by
    return output


def bev_intersection_area(b1: Box3D, b2: Box3D) -> float:
    area = _polygon_area(_clip_convex(bev_corners(b1), bev_corners(b2)))
    return 0.0 if area < _AREA_EPS else area


def iou_bev(b1: Box3D, b2: Box3D) -> float:
    """Ground-plane IoU of the two yaw-rotated rectangles."""
    inter = bev_intersection_area(b1, b2)
    if inter <= 0.0:
        return 0.0
    a1 = float(b1.dims[0] * b1.dims[1])
    a2 = float(b2.dims[0] * b2.dims[1])
    return min(inter / (a1 + a2 - inter), 1.0)


def iou_3d(b1: Box3D, b2: Box3D) -> float:
    """Volume IoU: BEV polygon intersection times vertical overlap."""
    z_lo = max(
        float(b1.center[2]) - 0.5 * float(b1.dims[2]),
        float(b2.center[2]) - 0.5 * float(b2.dims[2]),
    )
    z_hi = min(
        float(b1.center[2]) + 0.5 * float(b1.dims[2]),
        float(b2.center[2]) + 0.5 * float(b2.dims[2]),
    )
    dz = z_hi - z_lo
    if dz <= 0.0:
        return 0.0
    inter_area = bev_intersection_area(b1, b2)
    if inter_area <= 0.0:
        return 0.0
    inter = inter_area * dz
    union = b1.volume + b2.volume - inter
    return min(inter / union, 1.0)


def s_class(d_k: Detection, d_l: Detection) -> float:
    """1 if the labels are identical, else 0 (exact identifier match)."""
    return 1.0 if d_k.label == d_l.label else 0.0


def s_overlap(d_k: Detection, d_l: Detection, overlap: str = "3d") -> float:
    """1 if the boxes overlap with strictly positive IoU, else 0."""
    iou = _overlap_iou(d_k.box, d_l.box, overlap)
    return 1.0 if iou > 0.0 else 0.0


def s_conf(d_k: Detection, d_l: Detection) -> float:
    """The perturbed detection's own confidence; a confidence higher than
    the original's is not penalized."""
    return d_l.confidence


def s_translation(d_k: Detection, d_l: Detection) -> float:
    dx = d_k.box.center[0] - d_l.box.center[0]
    dy = d_k.box.center[1] - d_l.box.center[1]
    dz = d_k.box.center[2] - d_l.box.center[2]
    dist = math.sqrt(dx * dx + dy * dy + dz * dz)
    return max(1.0 - dist, 0.0)


def s_scale(d_k: Detection, d_l: Detection) -> float:
    """IoU after aligning both boxes on a common center with zero yaw,
    which reduces to an axis-aligned IoU of the dimension triples."""
    inter = 1.0
    for a, b in zip(d_k.box.dims, d_l.box.dims):
        inter *= min(float(a), float(b))
    union = d_k.box.volume + d_l.box.volume - inter
    return inter / union


def s_orientation(d_k: Detection, d_l: Detection) -> float:
    delta = abs(normalize_yaw(d_k.box.yaw - d_l.box.yaw))
    return max(1.0 - delta, 0.0)


def _overlap_iou(b1: Box3D, b2: Box3D, overlap: str) -> float:
    if overlap == "3d":
        return iou_3d(b1, b2)
    if overlap == "bev":
        return iou_bev(b1, b2)
    raise InvalidArgumentError(f"unknown overlap mode {overlap!r}")


def pairwise_similarity(
    d_k: Detection, d_l: Detection, overlap: str = "3d"
) -> SimilarityBreakdown:
    """Product of the six sub-metrics, with the breakdown retained."""
    cls = s_class(d_k, d_l)
    ovl = s_overlap(d_k, d_l, overlap)
    conf = s_conf(d_k, d_l)
    trans = s_translation(d_k, d_l)
    scale = s_scale(d_k, d_l)
    orient = s_orientation(d_k, d_l)
    product = cls * ovl * conf * trans * scale * orient
    return SimilarityBreakdown(cls, ovl, conf, trans, scale, orient, product)


def best_similarity(
    d_k: Detection,
    candidates: list[Detection],
    overlap: str = "3d",
) -> tuple[float, SimilarityBreakdown]:
    """Maximum pairwise similarity of the target against a detection set.

    An empty candidate set means the object went undetected: score 0 with
    an all-zero breakdown. Ties break toward the lowest candidate index.
    """
    best: SimilarityBreakdown | None = None
    for idx, d_l in enumerate(candidates):
        pair = pairwise_similarity(d_k, d_l, overlap)
        if best is None or pair.product > best.product:
            best = SimilarityBreakdown(
                pair.s_class,
                pair.s_overlap,
                pair.s_conf,
                pair.s_translation,
                pair.s_scale,
                pair.s_orientation,
                pair.product,
                matched_index=idx,
            )
    if best is None:
        best = SimilarityBreakdown.empty()
    return best.product, best
