"""Detector backends: the black-box boundary of the engine.

``MockDetector`` is a deterministic geometric detector over synthetic
scenes, used as an analyzable stand-in for real models. ``WireDetector``
talks the line-delimited wire protocol to an external detector process.
"""

from .base import DetectorBackend
from .mock import MockDetector, MockDetectorConfig
from .scene import SceneSpec, SyntheticScene, SceneObject, generate_scene
from .wire import WireDetector, WireConfig

__all__ = [
    "DetectorBackend",
    "MockDetector",
    "MockDetectorConfig",
    "SceneSpec",
    "SyntheticScene",
    "SceneObject",
    "generate_scene",
    "WireDetector",
    "WireConfig",
]
