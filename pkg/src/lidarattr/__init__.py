"""Per-point attribution maps for black-box 3D object detectors on LiDAR
point clouds."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    AttributionMap,
    Box3D,
    Detection,
    DetectorError,
    FormatError,
    InsufficientDataError,
    InvalidArgumentError,
    PointCloud,
    ProtocolError,
    SamplingMask,
    normalize_yaw,
)

__all__ = [
    "__version__",
    "AttributionMap",
    "Box3D",
    "Detection",
    "DetectorError",
    "FormatError",
    "InsufficientDataError",
    "InvalidArgumentError",
    "PointCloud",
    "ProtocolError",
    "SamplingMask",
    "normalize_yaw",
]
