"""Monte Carlo attribution loop: drive the detector over N density-aware
sub-samples of a cloud and aggregate, per target detection, the mean
similarity of every point's "visible" iterations.

Iterations are independent jobs over a thread pool; iteration i draws all
of its randomness from a substream seeded by (master_seed, i), and the
reduction into the accumulators happens in iteration order, so results are
bit-identical for a fixed master seed regardless of worker count or
scheduling.
"""

from __future__ import annotations

import logging
import os
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .core import (
    AttributionMap,
    Detection,
    DetectorError,
    InvalidArgumentError,
    PointCloud,
)
from .detectors.base import DetectorBackend
from .sampling import DensityModel, VoxelGridSpec, apply_mask, generate_mask
from .similarity import SUBMETRIC_NAMES, best_similarity

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AnalysisConfig:
    density: DensityModel
    n_iterations: int = 3000
    edge_length: float = 0.20
    master_seed: int = 0
    batch_size: int = 16
    submetrics: tuple[str, ...] = ()
    workers: int | None = None  # None: one per available core
    overlap: str = "3d"

    def __post_init__(self) -> None:
        if self.n_iterations < 1:
            raise InvalidArgumentError("n_iterations must be >= 1")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")
        if self.master_seed < 0:
            raise InvalidArgumentError("master_seed must be >= 0")
        for name in self.submetrics:
            if name not in SUBMETRIC_NAMES:
                raise InvalidArgumentError(
                    f"unknown sub-metric {name!r}; "
                    f"expected one of {SUBMETRIC_NAMES}"
                )
        if self.workers is not None and self.workers < 1:
            raise InvalidArgumentError("workers must be >= 1")
        if self.overlap not in ("3d", "bev"):
            raise InvalidArgumentError(
                f"overlap must be '3d' or 'bev', got {self.overlap!r}"
            )

    def effective_workers(self) -> int:
        if self.workers is not None:
            return self.workers
        return max(os.cpu_count() or 1, 1)


@dataclass
class RunMetadata:
    master_seed: int
    n_iterations: int
    edge_length: float
    lam: float
    p_min: float
    p_max: float
    engine_version: str
    target_distances: np.ndarray
    mean_similarity: np.ndarray
    timings: dict[str, float] = field(default_factory=dict)
    workers: int = 1
    warnings: tuple[str, ...] = ()


@dataclass
class AnalysisResult:
    cloud: PointCloud
    detections: list[Detection]
    maps: list[AttributionMap]
    submetric_maps: dict[str, list[AttributionMap]]
    metadata: RunMetadata


@dataclass(frozen=True)
class IterationOutcome:
    """What one Monte Carlo iteration contributes to the accumulators."""

    index: int
    kept_indices: np.ndarray  # indices of visible points
    scores: np.ndarray  # (K,) best similarity per target
    submetric_values: dict[str, np.ndarray]  # name -> (K,)


class AttributionAccumulator:
    """Order-independent sums; the caller fixes the reduction order."""

    def __init__(self, n_targets: int, n_points: int,
                 submetrics: tuple[str, ...] = ()):
        self.n_targets = n_targets
        self.n_points = n_points
        self.score_sums = np.zeros((n_targets, n_points))
        self.visible_counts = np.zeros(n_points, dtype=np.int64)
        self.similarity_totals = np.zeros(n_targets)
        self.submetric_sums = {
            name: np.zeros((n_targets, n_points)) for name in submetrics
        }
        self.iterations = 0

    def add(self, outcome: IterationOutcome) -> None:
        if outcome.scores.shape != (self.n_targets,):
            raise InvalidArgumentError(
                f"expected {self.n_targets} per-target scores, "
                f"got shape {outcome.scores.shape}"
            )
        idx = outcome.kept_indices
        self.visible_counts[idx] += 1
        self.score_sums[:, idx] += outcome.scores[:, None]
        self.similarity_totals += outcome.scores
        for name, sums in self.submetric_sums.items():
            sums[:, idx] += outcome.submetric_values[name][:, None]
        self.iterations += 1


def reduce_in_order(
    acc: AttributionAccumulator, outcomes: list[IterationOutcome]
) -> AttributionAccumulator:
    """Apply outcomes keyed by iteration index, so the floating-point
    reduction order never depends on arrival order."""
    for outcome in sorted(outcomes, key=lambda o: o.index):
        acc.add(outcome)
    return acc


def _submetric_value(breakdown, name: str) -> float:
    return breakdown.field_values()[SUBMETRIC_NAMES.index(name)]


def iteration_substream(master_seed: int, index: int) -> np.random.Generator:
    """Independent random stream for one iteration."""
    return np.random.default_rng([master_seed, index])


def _score_iteration(
    index: int,
    kept_indices: np.ndarray,
    perturbed: list[Detection],
    targets: list[Detection],
    cfg: AnalysisConfig,
) -> IterationOutcome:
    k = len(targets)
    scores = np.empty(k)
    sub_values = {name: np.empty(k) for name in cfg.submetrics}
    for t, target in enumerate(targets):
        score, breakdown = best_similarity(target, perturbed, cfg.overlap)
        scores[t] = score
        for name in cfg.submetrics:
            sub_values[name][t] = _submetric_value(breakdown, name)
    return IterationOutcome(index, kept_indices, scores, sub_values)


def _run_chunk(
    cloud: PointCloud,
    detector: DetectorBackend,
    targets: list[Detection],
    cfg: AnalysisConfig,
    start: int,
    stop: int,
) -> list[IterationOutcome]:
    kept: list[np.ndarray] = []
    subclouds: list[PointCloud] = []
    for i in range(start, stop):
        rng = iteration_substream(cfg.master_seed, i)
        grid = VoxelGridSpec.with_random_jitter(cfg.edge_length, rng)
        mask = generate_mask(cloud, grid, cfg.density, rng)
        kept.append(mask.indices())
        subclouds.append(apply_mask(cloud, mask))
    # empty sub-samples are not sent to the detector; their detection set
    # is empty by definition
    live = [j for j, sc in enumerate(subclouds) if len(sc) > 0]
    perturbed: list[list[Detection]] = [[] for _ in subclouds]
    if live:
        try:
            batches = detector.detect_batch([subclouds[j] for j in live])
        except Exception as exc:
            raise DetectorError(
                f"detector failed on iterations [{start}, {stop}): {exc}"
            ) from exc
        if len(batches) != len(live):
            raise DetectorError(
                f"detector returned {len(batches)} results for "
                f"{len(live)} clouds (iterations [{start}, {stop}))"
            )
        for j, dets in zip(live, batches):
            perturbed[j] = dets
    return [
        _score_iteration(start + j, kept[j], perturbed[j], targets, cfg)
        for j in range(len(subclouds))
    ]


def _finalize_maps(
    acc: AttributionAccumulator,
    targets: list[Detection],
    n_iterations: int,
) -> tuple[list[AttributionMap], dict[str, list[AttributionMap]]]:
    counts = acc.visible_counts
    observed = counts > 0
    unobserved = ~observed

    def normalize(sums: np.ndarray) -> np.ndarray:
        psi = np.zeros_like(sums)
        psi[:, observed] = sums[:, observed] / counts[observed]
        return psi

    def build(sums: np.ndarray) -> list[AttributionMap]:
        psi = normalize(sums)
        return [
            AttributionMap(
                target=targets[k],
                scores=psi[k],
                visible_counts=counts,
                iterations=n_iterations,
                unobserved=unobserved,
            )
            for k in range(len(targets))
        ]

    maps = build(acc.score_sums)
    sub_maps = {
        name: build(sums) for name, sums in acc.submetric_sums.items()
    }
    return maps, sub_maps


def run_analysis(
    cloud: PointCloud, detector: DetectorBackend, cfg: AnalysisConfig
) -> AnalysisResult:
    """Full attribution run: detect once on the original cloud, then probe
    with ``cfg.n_iterations`` masked sub-samples and aggregate one
    attribution map per original detection (plus optional per-sub-metric
    maps)."""
    if len(cloud) == 0:
        raise InvalidArgumentError("cannot analyze an empty cloud")
    t_start = time.monotonic()
    targets = detector.detect_batch([cloud])[0]
    t_detect = time.monotonic()

    warnings: tuple[str, ...] = ()
    if not targets:
        warnings = ("detector produced no detections on the input cloud",)
        logger.warning(warnings[0])

    acc = AttributionAccumulator(len(targets), len(cloud), cfg.submetrics)
    n = cfg.n_iterations
    batch = cfg.batch_size
    if detector.max_batch:
        batch = min(batch, detector.max_batch)
    starts = list(range(0, n, batch))
    workers = cfg.effective_workers()
    if targets:
        if workers == 1:
            for s in starts:
                for outcome in _run_chunk(
                    cloud, detector, targets, cfg, s, min(s + batch, n)
                ):
                    acc.add(outcome)
        else:
            # bounded pipeline; chunks are reduced strictly in order
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures: deque = deque()
                s_iter = iter(starts)
                try:
                    while True:
                        while len(futures) < workers + 2:
                            s = next(s_iter, None)
                            if s is None:
                                break
                            futures.append(
                                pool.submit(
                                    _run_chunk,
                                    cloud,
                                    detector,
                                    targets,
                                    cfg,
                                    s,
                                    min(s + batch, n),
                                )
                            )
                        if not futures:
                            break
                        for outcome in futures.popleft().result():
                            acc.add(outcome)
                finally:
                    for f in futures:
                        f.cancel()
    t_loop = time.monotonic()

    maps, sub_maps = _finalize_maps(acc, targets, n)
    distances = np.array(
        [float(np.linalg.norm(t.box.center)) for t in targets]
    )
    mean_similarity = (
        acc.similarity_totals / n if targets else np.zeros(0)
    )
    metadata = RunMetadata(
        master_seed=cfg.master_seed,
        n_iterations=n,
        edge_length=cfg.edge_length,
        lam=cfg.density.lam,
        p_min=cfg.density.p_min,
        p_max=cfg.density.p_max,
        engine_version=__version__,
        target_distances=distances,
        mean_similarity=mean_similarity,
        timings={
            "detect_original_s": t_detect - t_start,
            "iterations_s": t_loop - t_detect,
            "total_s": time.monotonic() - t_start,
        },
        workers=workers,
        warnings=warnings,
    )
    return AnalysisResult(
        cloud=cloud,
        detections=targets,
        maps=maps,
        submetric_maps=sub_maps,
        metadata=metadata,
    )
