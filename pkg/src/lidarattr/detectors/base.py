"""Backend interface the engine drives."""

from __future__ import annotations

from ..core import Detection, PointCloud


class DetectorBackend:
    """A black-box detector: ``detect`` must be a pure function of the cloud
    for a fixed backend configuration.

    ``max_batch`` is the largest batch the backend accepts per call (None
    for unbounded); ``supports_empty_cloud`` declares whether an empty
    cloud may be submitted or must be short-circuited to no detections.
    """

    max_batch: int | None = None
    supports_empty_cloud: bool = True

    def detect(self, cloud: PointCloud) -> list[Detection]:
        raise NotImplementedError

    def detect_batch(self, clouds: list[PointCloud]) -> list[list[Detection]]:
        return [self.detect(c) for c in clouds]

    def close(self) -> None:
        """Release external resources; in-process backends need nothing."""
