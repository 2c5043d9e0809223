"""Shared domain types: point clouds, oriented boxes, detections, masks and
per-point attribution maps.

All types are immutable after construction (backing numpy arrays are marked
read-only), so instances can be shared freely across worker threads.
Constructors validate their invariants and reject bad values instead of
silently fixing them; the single documented exception is the intensity
channel, which is clamped to [0, 1] with a logged warning because several
datasets store raw reflectance.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi


class InvalidArgumentError(ValueError):
    """An argument violates a documented precondition or type invariant."""


class InsufficientDataError(ValueError):
    """Not enough data to compute the requested statistic or fit."""


class FormatError(ValueError):
    """A file or stream does not conform to its documented format."""


class ProtocolError(RuntimeError):
    """The remote detector violated the wire protocol."""


class DetectorError(RuntimeError):
    """A detector backend failed while the engine was driving it."""


def normalize_yaw(angle: float) -> float:
    """Wrap an angle to [-pi, pi), congruent to the input mod 2*pi."""
    angle = float(angle)
    if not math.isfinite(angle):
        raise InvalidArgumentError(f"yaw angle must be finite, got {angle!r}")
    out = math.fmod(angle + math.pi, TWO_PI)
    if out < 0.0:
        out += TWO_PI
    out -= math.pi
    if out >= math.pi:  # guard against rounding at the wrap boundary
        out -= TWO_PI
    return out


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An ordered set of LiDAR returns: per point (x, y, z) in meters plus a
    reflectance intensity in [0, 1].

    Point order is stable; index j refers to the same physical point in
    every mask and attribution map of one analysis run.
    """

    points: np.ndarray  # (M, 4) float64: x, y, z, intensity
    source_indices: np.ndarray | None = None  # indices into a parent cloud

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise InvalidArgumentError(
                f"points must have shape (M, 4), got {pts.shape}"
            )
        if not np.isfinite(pts[:, :3]).all():
            raise InvalidArgumentError("point coordinates must be finite")
        intensity = pts[:, 3]
        if not np.isfinite(intensity).all():
            raise InvalidArgumentError("point intensities must be finite")
        if len(pts) and (intensity.min() < 0.0 or intensity.max() > 1.0):
            logger.warning(
                "clamping %d intensity values outside [0, 1]",
                int(((intensity < 0.0) | (intensity > 1.0)).sum()),
            )
            pts = pts.copy()
            np.clip(pts[:, 3], 0.0, 1.0, out=pts[:, 3])
        object.__setattr__(self, "points", _readonly(pts))
        if self.source_indices is not None:
            idx = np.asarray(self.source_indices, dtype=np.int64)
            if idx.shape != (len(pts),):
                raise InvalidArgumentError("source_indices length mismatch")
            object.__setattr__(self, "source_indices", _readonly(idx))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    def ranges(self) -> np.ndarray:
        """Euclidean distance of every point from the sensor origin."""
        return np.linalg.norm(self.xyz, axis=1)

    @classmethod
    def from_arrays(
        cls, xyz: np.ndarray, intensity: np.ndarray | None = None
    ) -> "PointCloud":
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        if intensity is None:
            intensity = np.zeros(len(xyz))
        pts = np.column_stack([xyz, np.asarray(intensity, dtype=np.float64)])
        return cls(pts)

    @classmethod
    def _trusted(
        cls, points: np.ndarray, source_indices: np.ndarray | None = None
    ) -> "PointCloud":
        """Skip validation for rows taken verbatim from a validated cloud;
        the masking hot path constructs millions of sub-clouds."""
        self = object.__new__(cls)
        object.__setattr__(self, "points", _readonly(points))
        object.__setattr__(self, "source_indices", source_indices)
        return self


@dataclass(frozen=True, eq=False)
class Box3D:
    """Gravity-aligned oriented 3D box: center (m), dims (length, width,
    height in m, along the box frame x/y/z axes) and yaw about +z.

    Yaw is normalized to [-pi, pi) at construction.
    """

    center: np.ndarray
    dims: np.ndarray
    yaw: float

    def __post_init__(self) -> None:
        center = np.asarray(self.center, dtype=np.float64).reshape(3)
        dims = np.asarray(self.dims, dtype=np.float64).reshape(3)
        if not np.isfinite(center).all():
            raise InvalidArgumentError("box center must be finite")
        if not np.isfinite(dims).all() or (dims <= 0.0).any():
            raise InvalidArgumentError(
                f"box dims must be strictly positive, got {dims.tolist()}"
            )
        object.__setattr__(self, "center", _readonly(center))
        object.__setattr__(self, "dims", _readonly(dims))
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @property
    def volume(self) -> float:
        return float(self.dims[0] * self.dims[1] * self.dims[2])

    def to_frame(self, xyz: np.ndarray) -> np.ndarray:
        """Map world points into the box frame (center at origin, +x along
        the heading)."""
        xyz = np.atleast_2d(np.asarray(xyz, dtype=np.float64))
        q = xyz - self.center
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = q.copy()
        out[:, 0] = c * q[:, 0] + s * q[:, 1]
        out[:, 1] = -s * q[:, 0] + c * q[:, 1]
        return out

    def from_frame(self, q: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`to_frame`."""
        q = np.atleast_2d(np.asarray(q, dtype=np.float64))
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = q.copy()
        out[:, 0] = c * q[:, 0] - s * q[:, 1]
        out[:, 1] = s * q[:, 0] + c * q[:, 1]
        return out + self.center

    def contains(self, xyz: np.ndarray, dilation: float = 1.0) -> np.ndarray:
        """Boolean per-point membership test, with an optional per-axis
        dilation factor applied to the dims. Boundary points count as
        inside (up to a small float tolerance)."""
        q = np.abs(self.to_frame(xyz))
        half = 0.5 * dilation * self.dims
        return (q <= half + 1e-9).all(axis=1)


@dataclass(frozen=True, eq=False)
class Detection:
    """One detector output: class label, confidence in [0, 1], oriented box."""

    label: str
    confidence: float
    box: Box3D

    def __post_init__(self) -> None:
        conf = float(self.confidence)
        if not math.isfinite(conf) or not 0.0 <= conf <= 1.0:
            raise InvalidArgumentError(
                f"confidence must be in [0, 1], got {conf!r}"
            )
        object.__setattr__(self, "confidence", conf)
        object.__setattr__(self, "label", str(self.label))


@dataclass(frozen=True, eq=False)
class SamplingMask:
    """Binary keep/drop vector over the points of one cloud."""

    keep: np.ndarray  # (M,) bool

    def __post_init__(self) -> None:
        keep = np.asarray(self.keep, dtype=bool).reshape(-1)
        object.__setattr__(self, "keep", _readonly(keep))

    def __len__(self) -> int:
        return len(self.keep)

    @property
    def kept_count(self) -> int:
        return int(self.keep.sum())

    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.keep)


@dataclass(frozen=True, eq=False)
class AttributionMap:
    """Per-point contribution scores for one target detection.

    ``scores[j]`` is the empirical mean similarity over the iterations in
    which point j was visible (``visible_counts[j]`` of them). Points that
    were never visible are flagged ``unobserved`` and carry a score of 0.
    """

    target: Detection
    scores: np.ndarray  # (M,) float64 in [0, 1]
    visible_counts: np.ndarray  # (M,) int64
    iterations: int
    unobserved: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        counts = np.asarray(self.visible_counts, dtype=np.int64).reshape(-1)
        if len(scores) != len(counts):
            raise InvalidArgumentError(
                "scores and visible_counts must have equal length"
            )
        if int(self.iterations) < 1:
            raise InvalidArgumentError("iterations must be >= 1")
        if (counts < 0).any() or (counts > self.iterations).any():
            raise InvalidArgumentError("visible_counts out of range")
        if not np.isfinite(scores).all() or (scores < 0.0).any():
            raise InvalidArgumentError("scores must be finite and >= 0")
        if (scores > 1.0 + 1e-9).any():
            raise InvalidArgumentError("scores must be <= 1")
        scores = np.minimum(scores, 1.0)  # guard accumulated rounding
        if self.unobserved is None:
            unobserved = counts == 0
        else:
            unobserved = np.asarray(self.unobserved, dtype=bool).reshape(-1)
            if len(unobserved) != len(scores):
                raise InvalidArgumentError("unobserved flag length mismatch")
        if (scores[counts == 0] != 0.0).any():
            raise InvalidArgumentError(
                "unobserved points must carry a zero score"
            )
        object.__setattr__(self, "scores", _readonly(scores))
        object.__setattr__(self, "visible_counts", _readonly(counts))
        object.__setattr__(self, "iterations", int(self.iterations))
        object.__setattr__(self, "unobserved", _readonly(unobserved))

    def __len__(self) -> int:
        return len(self.scores)
