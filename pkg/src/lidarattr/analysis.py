"""Post-processing of attribution results: class-averaged maps in a
normalized box frame, point-dropping degradation curves, and the pointing
game."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    AttributionMap,
    Box3D,
    Detection,
    DetectorError,
    InsufficientDataError,
    InvalidArgumentError,
    PointCloud,
)
from .detectors.base import DetectorBackend
from .engine import AnalysisResult
from .similarity import iou_3d

DEFAULT_RESOLUTION = (32, 32, 16)
DEFAULT_FRACTIONS = tuple(np.round(np.arange(0.0, 1.0001, 0.05), 4))
ORDERINGS = ("descending", "ascending", "random")


@dataclass
class AverageAttributionMap:
    """Per-voxel mean attribution over all detections of one class, in the
    unit-box frame (front of the box toward +x). The margin extends the
    binned domain beyond the box so that near-box context (think side
    mirrors) is retained."""

    label: str
    resolution: tuple[int, int, int]
    margin: float
    means: np.ndarray  # (nx, ny, nz)
    counts: np.ndarray  # (nx, ny, nz) contributing point count
    intensity_means: np.ndarray
    detections_used: int


def box_frame_coords(box: Box3D, xyz: np.ndarray) -> np.ndarray:
    """Normalized box-frame coordinates: inside-box points land in
    [-0.5, 0.5]^3."""
    return box.to_frame(xyz) / box.dims


def average_maps(
    results: list[AnalysisResult],
    label: str,
    resolution: tuple[int, int, int] = DEFAULT_RESOLUTION,
    margin: float = 0.10,
) -> AverageAttributionMap:
    """Average attribution voxel grid over every detection of ``label``."""
    res = np.asarray(resolution, dtype=np.int64)
    if (res < 1).any():
        raise InvalidArgumentError("resolution components must be >= 1")
    limit = 0.5 * (1.0 + margin)
    sums = np.zeros(tuple(res))
    counts = np.zeros(tuple(res), dtype=np.int64)
    int_sums = np.zeros(tuple(res))
    used = 0
    for result in results:
        xyz = result.cloud.xyz
        intensity = result.cloud.intensity
        for amap in result.maps:
            if amap.target.label != label:
                continue
            used += 1
            q = box_frame_coords(amap.target.box, xyz)
            inside = (np.abs(q) <= limit).all(axis=1)
            if not inside.any():
                continue
            u = (q[inside] + limit) / (2.0 * limit)
            cells = np.minimum(
                (u * res).astype(np.int64), res - 1
            )
            flat = np.ravel_multi_index(
                (cells[:, 0], cells[:, 1], cells[:, 2]), tuple(res)
            )
            np.add.at(sums.ravel(), flat, amap.scores[inside])
            np.add.at(int_sums.ravel(), flat, intensity[inside])
            np.add.at(counts.ravel(), flat, 1)
    if used == 0:
        raise InsufficientDataError(f"no detections with label {label!r}")
    means = np.zeros_like(sums)
    imeans = np.zeros_like(int_sums)
    occupied = counts > 0
    means[occupied] = sums[occupied] / counts[occupied]
    imeans[occupied] = int_sums[occupied] / counts[occupied]
    return AverageAttributionMap(
        label=label,
        resolution=tuple(int(v) for v in res),
        margin=margin,
        means=means,
        counts=counts,
        intensity_means=imeans,
        detections_used=used,
    )


@dataclass
class DropCurve:
    ordering: str
    fractions: np.ndarray
    mean_iou: np.ndarray
    mean_confidence: np.ndarray
    repeats: int = 1


def _match_against(
    pseudo_gt: list[Detection], perturbed: list[Detection]
) -> tuple[float, float]:
    """Mean matched IoU and confidence over the pseudo ground truth.

    Matching is by maximum 3D IoU (ties toward the lowest index); an
    unmatched pseudo-GT detection contributes zeros."""
    ious = []
    confs = []
    for gt in pseudo_gt:
        best_iou = 0.0
        best_conf = 0.0
        for det in perturbed:
            iou = iou_3d(gt.box, det.box)
            if iou > best_iou:
                best_iou = iou
                best_conf = det.confidence
        ious.append(best_iou)
        confs.append(best_conf)
    return float(np.mean(ious)), float(np.mean(confs))


def _removal_order(
    scores: np.ndarray, in_box: np.ndarray, ordering: str,
    rng: np.random.Generator | None,
) -> np.ndarray:
    if ordering == "descending":
        return in_box[np.lexsort((in_box, -scores[in_box]))]
    if ordering == "ascending":
        return in_box[np.lexsort((in_box, scores[in_box]))]
    if ordering == "random":
        return rng.permutation(in_box)
    raise InvalidArgumentError(f"unknown ordering {ordering!r}")


def drop_curve(
    cloud: PointCloud,
    detector: DetectorBackend,
    maps: list[AttributionMap],
    ordering: str,
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS,
    seed: int = 0,
    repeats: int = 5,
) -> DropCurve:
    """Remove the top/bottom/random fraction of each detection's in-box
    points, re-run the detector once per fraction, and score the output
    against the original detections (the pseudo ground truth)."""
    fr = np.asarray(fractions, dtype=np.float64)
    if (np.diff(fr) <= 0.0).any() or fr.min() < 0.0 or fr.max() > 1.0:
        raise InvalidArgumentError(
            "fractions must be strictly increasing within [0, 1]"
        )
    for amap in maps:
        if len(amap) != len(cloud):
            raise InvalidArgumentError("maps do not match the cloud")
    pseudo_gt = [m.target for m in maps]
    in_box = [
        np.flatnonzero(m.target.box.contains(cloud.xyz)) for m in maps
    ]
    n_repeats = repeats if ordering == "random" else 1
    iou_acc = np.zeros(len(fr))
    conf_acc = np.zeros(len(fr))
    for rep in range(n_repeats):
        orders = []
        for k, amap in enumerate(maps):
            rng = (
                np.random.default_rng([seed, rep, k])
                if ordering == "random"
                else None
            )
            orders.append(
                _removal_order(amap.scores, in_box[k], ordering, rng)
            )
        for fi, f in enumerate(fr):
            removed: list[np.ndarray] = []
            for order in orders:
                k_remove = int(round(f * len(order)))
                if k_remove:
                    removed.append(order[:k_remove])
            keep = np.ones(len(cloud), dtype=bool)
            if removed:
                keep[np.concatenate(removed)] = False
            modified = PointCloud._trusted(cloud.points[keep])
            try:
                perturbed = detector.detect_batch([modified])[0]
            except Exception as exc:
                raise DetectorError(
                    f"detector failed at fraction {f:g} "
                    f"({ordering}, repeat {rep}): {exc}"
                ) from exc
            iou, conf = _match_against(pseudo_gt, perturbed)
            iou_acc[fi] += iou
            conf_acc[fi] += conf
    return DropCurve(
        ordering=ordering,
        fractions=fr,
        mean_iou=iou_acc / n_repeats,
        mean_confidence=conf_acc / n_repeats,
        repeats=n_repeats,
    )


def drop_curves(
    cloud: PointCloud,
    detector: DetectorBackend,
    maps: list[AttributionMap],
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS,
    seed: int = 0,
    repeats: int = 5,
) -> dict[str, DropCurve]:
    return {
        ordering: drop_curve(
            cloud, detector, maps, ordering, fractions, seed, repeats
        )
        for ordering in ORDERINGS
    }


@dataclass
class PointingGameResult:
    score: float
    hits: int
    total: int


def pointing_game(
    results: list[AnalysisResult],
    ground_truths: list[list[tuple[str, Box3D]]],
    dilation: float = 1.0,
    iou_threshold: float = 0.5,
) -> PointingGameResult:
    """Fraction of correctly detected objects whose arg-max attribution
    point falls inside the (optionally dilated) ground-truth box.

    A detection counts as correct when a ground-truth box of the same label
    overlaps it with 3D IoU >= ``iou_threshold``. Arg-max ties break toward
    the lowest point index.
    """
    if len(results) != len(ground_truths):
        raise InvalidArgumentError(
            "need one ground-truth list per analysis result"
        )
    if dilation <= 0.0:
        raise InvalidArgumentError("dilation must be positive")
    hits = 0
    total = 0
    for result, gt in zip(results, ground_truths):
        for amap in result.maps:
            det = amap.target
            best_iou = 0.0
            best_box: Box3D | None = None
            for label, box in gt:
                if label != det.label:
                    continue
                iou = iou_3d(det.box, box)
                if iou > best_iou:
                    best_iou, best_box = iou, box
            if best_box is None or best_iou < iou_threshold:
                continue
            total += 1
            top = int(np.argmax(amap.scores))
            if bool(best_box.contains(result.cloud.xyz[top], dilation)[0]):
                hits += 1
    if total == 0:
        raise InsufficientDataError(
            "no correctly detected objects; pointing-game score undefined"
        )
    return PointingGameResult(score=hits / total, hits=hits, total=total)


def binned_mean_similarity(
    distances: np.ndarray, similarities: np.ndarray, bin_width: float = 5.0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean per-target similarity in distance bins: the flatness-by-range
    diagnostic for a sampling scheme.

    Returns (bin_centers, means, counts) for populated bins only.
    """
    if bin_width <= 0.0:
        raise InvalidArgumentError("bin_width must be positive")
    d = np.asarray(distances, dtype=np.float64)
    s = np.asarray(similarities, dtype=np.float64)
    if d.shape != s.shape:
        raise InvalidArgumentError("distances and similarities must align")
    if len(d) == 0:
        raise InsufficientDataError("no targets to bin")
    which = np.floor(d / bin_width).astype(np.int64)
    n_bins = int(which.max()) + 1
    counts = np.bincount(which, minlength=n_bins)
    sums = np.bincount(which, weights=s, minlength=n_bins)
    ok = counts > 0
    centers = (np.flatnonzero(ok) + 0.5) * bin_width
    return centers, sums[ok] / counts[ok], counts[ok]
