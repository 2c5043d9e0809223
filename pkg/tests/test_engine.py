import re

import numpy as np
import pytest

from lidarattr.core import (
    Box3D,
    Detection,
    DetectorError,
    InvalidArgumentError,
    PointCloud,
)
from lidarattr.detectors.base import DetectorBackend
from lidarattr.engine import (
    AnalysisConfig,
    AttributionAccumulator,
    IterationOutcome,
    iteration_substream,
    reduce_in_order,
    run_analysis,
)
from lidarattr.sampling import DensityModel


BOX = Box3D((5.0, 0.0, 0.0), (4.0, 2.0, 1.5), 0.2)


def flat_model(p):
    return DensityModel(0.0, 0.0, 1.0, lam=p, p_min=0.0, p_max=1.0)


def spread_cloud(n=8, seed=0):
    rng = np.random.default_rng(seed)
    return PointCloud.from_arrays(rng.uniform(-25, 25, (n, 3)))


class EchoDetector(DetectorBackend):
    """Always reports the same detection set, regardless of input."""

    def __init__(self, detections):
        self.detections = detections
        self.calls = 0
        self.empty_calls = 0

    def detect(self, cloud):
        self.calls += 1
        if len(cloud) == 0:
            self.empty_calls += 1
        return list(self.detections)


class SilentDetector(DetectorBackend):
    """Detects the target on the full cloud, nothing on sub-samples."""

    def __init__(self, detections):
        self.detections = detections
        self.first = True

    def detect(self, cloud):
        if self.first:
            self.first = False
            return list(self.detections)
        return []


class TestAccumulator:
    def test_hand_aggregation(self):
        # masks {110, 011, 101, 111}, similarities {0.5, 1.0, 0.0, 0.8}:
        # psi = (1.3/3, 2.3/3, 1.8/3)
        acc = AttributionAccumulator(1, 3)
        masks = [np.array([0, 1]), np.array([1, 2]), np.array([0, 2]),
                 np.array([0, 1, 2])]
        scores = [0.5, 1.0, 0.0, 0.8]
        for i, (m, s) in enumerate(zip(masks, scores)):
            acc.add(IterationOutcome(i, m, np.array([s]), {}))
        counts = acc.visible_counts
        psi = acc.score_sums[0] / counts
        np.testing.assert_allclose(
            psi, [1.3 / 3, 2.3 / 3, 1.8 / 3], atol=1e-15
        )
        assert counts.tolist() == [3, 3, 3]

    def test_zero_score_iteration_only_touches_counts(self):
        acc = AttributionAccumulator(2, 4)
        acc.add(IterationOutcome(0, np.array([1, 3]), np.zeros(2), {}))
        assert acc.score_sums.sum() == 0.0
        assert acc.visible_counts.tolist() == [0, 1, 0, 1]

    def test_full_mask_unit_score(self):
        acc = AttributionAccumulator(1, 3)
        acc.add(IterationOutcome(0, np.arange(3), np.array([1.0]), {}))
        np.testing.assert_array_equal(acc.score_sums[0], np.ones(3))

    def test_reduce_in_order_is_arrival_order_independent(self):
        outcomes = []
        rng = np.random.default_rng(1)
        for i in range(10):
            idx = np.flatnonzero(rng.random(6) < 0.5)
            outcomes.append(
                IterationOutcome(i, idx, rng.random(2), {})
            )
        a = reduce_in_order(AttributionAccumulator(2, 6), outcomes)
        b = reduce_in_order(
            AttributionAccumulator(2, 6), list(reversed(outcomes))
        )
        np.testing.assert_array_equal(a.score_sums, b.score_sums)
        np.testing.assert_array_equal(a.visible_counts, b.visible_counts)

    def test_dimension_mismatch_rejected(self):
        acc = AttributionAccumulator(2, 4)
        with pytest.raises(InvalidArgumentError):
            acc.add(IterationOutcome(0, np.array([0]), np.zeros(3), {}))


class TestRunAnalysis:
    def test_constant_perfect_detector_gives_psi_one(self):
        cloud = spread_cloud()
        target = Detection("car", 1.0, BOX)
        detector = EchoDetector([target])
        cfg = AnalysisConfig(
            density=flat_model(0.5), n_iterations=60, edge_length=0.01,
            master_seed=0, workers=1,
        )
        result = run_analysis(cloud, detector, cfg)
        amap = result.maps[0]
        observed = ~amap.unobserved
        assert observed.any()
        np.testing.assert_allclose(amap.scores[observed], 1.0)
        assert (amap.scores[amap.unobserved] == 0.0).all()

    def test_never_detecting_gives_psi_zero(self):
        cloud = spread_cloud()
        detector = SilentDetector([Detection("car", 0.9, BOX)])
        cfg = AnalysisConfig(
            density=flat_model(0.5), n_iterations=40, edge_length=0.01,
            master_seed=0, workers=1,
        )
        result = run_analysis(cloud, detector, cfg)
        assert (result.maps[0].scores == 0.0).all()
        assert result.metadata.mean_similarity[0] == 0.0

    def test_psi_bounds_and_counts(self):
        rng = np.random.default_rng(3)

        class NoisyConf(DetectorBackend):
            def detect(self, cloud):
                # deterministic function of the cloud size
                conf = 0.1 + 0.8 * (len(cloud) % 7) / 6.0
                return [Detection("car", conf, BOX)]

        cloud = spread_cloud(n=20, seed=5)
        cfg = AnalysisConfig(
            density=flat_model(0.4), n_iterations=100, edge_length=0.01,
            master_seed=1, workers=1,
        )
        result = run_analysis(cloud, NoisyConf(), cfg)
        amap = result.maps[0]
        assert (amap.scores >= 0.0).all() and (amap.scores <= 1.0).all()
        assert (amap.visible_counts <= cfg.n_iterations).all()

    def test_empty_detections_yields_zero_maps_and_warning(self):
        class Blind(DetectorBackend):
            def detect(self, cloud):
                return []

        result = run_analysis(
            spread_cloud(),
            Blind(),
            AnalysisConfig(
                density=flat_model(0.5), n_iterations=5,
                edge_length=0.01, workers=1,
            ),
        )
        assert result.maps == []
        assert result.detections == []
        assert any("no detections" in w for w in result.metadata.warnings)

    def test_empty_subsamples_skip_detector(self):
        cloud = spread_cloud()
        target = Detection("car", 1.0, BOX)
        detector = EchoDetector([target])
        cfg = AnalysisConfig(
            density=flat_model(0.0), n_iterations=30, edge_length=0.01,
            master_seed=0, workers=1,
        )
        result = run_analysis(cloud, detector, cfg)
        # one call for the original cloud only
        assert detector.calls == 1
        assert detector.empty_calls == 0
        amap = result.maps[0]
        assert amap.unobserved.all()
        assert (amap.scores == 0.0).all()

    def test_detector_failure_names_iterations(self):
        class Flaky(DetectorBackend):
            def __init__(self):
                self.calls = 0

            def detect(self, cloud):
                self.calls += 1
                if self.calls > 3:
                    raise RuntimeError("cuda out of memory")
                return [Detection("car", 0.9, BOX)]

        cfg = AnalysisConfig(
            density=flat_model(0.9), n_iterations=64, edge_length=0.01,
            master_seed=0, batch_size=2, workers=1,
        )
        with pytest.raises(DetectorError, match=r"iterations \[\d+, \d+\)"):
            run_analysis(spread_cloud(), Flaky(), cfg)

    def test_seed_determinism_across_worker_counts(self, density_model):
        from lidarattr.detectors import MockDetector, SceneSpec, generate_scene

        scene = generate_scene(
            SceneSpec(
                n_boxes=3, classes=("car",), r_range=(14, 30),
                points_at_10m=1500, ground_points=400, seed=50,
            )
        )
        detector = MockDetector()

        def run(workers):
            cfg = AnalysisConfig(
                density=density_model, n_iterations=80, edge_length=0.10,
                master_seed=11, batch_size=8, workers=workers,
                submetrics=("confidence", "orientation"),
            )
            return run_analysis(scene.cloud, detector, cfg)

        base = run(1)
        for workers in (1, 3, 8):
            other = run(workers)
            for a, b in zip(base.maps, other.maps):
                np.testing.assert_array_equal(a.scores, b.scores)
                np.testing.assert_array_equal(
                    a.visible_counts, b.visible_counts
                )
            for name in base.submetric_maps:
                for a, b in zip(
                    base.submetric_maps[name], other.submetric_maps[name]
                ):
                    np.testing.assert_array_equal(a.scores, b.scores)

    def test_submetric_maps_for_exact_copies(self):
        cloud = spread_cloud()
        target = Detection("car", 0.7, BOX)
        cfg = AnalysisConfig(
            density=flat_model(0.5), n_iterations=50, edge_length=0.01,
            master_seed=2, workers=1,
            submetrics=("orientation", "translation", "scale"),
        )
        result = run_analysis(cloud, EchoDetector([target]), cfg)
        for name in ("orientation", "translation", "scale"):
            amap = result.submetric_maps[name][0]
            observed = ~amap.unobserved
            np.testing.assert_allclose(amap.scores[observed], 1.0)

    def test_no_submetrics_no_extra_maps(self):
        result = run_analysis(
            spread_cloud(),
            EchoDetector([Detection("car", 0.7, BOX)]),
            AnalysisConfig(
                density=flat_model(0.5), n_iterations=5,
                edge_length=0.01, workers=1,
            ),
        )
        assert result.submetric_maps == {}

    def test_empty_cloud_rejected(self):
        with pytest.raises(InvalidArgumentError):
            run_analysis(
                PointCloud(np.zeros((0, 4))),
                EchoDetector([]),
                AnalysisConfig(density=flat_model(0.5), workers=1),
            )


class TestConfigValidation:
    def test_bad_values(self):
        model = flat_model(0.5)
        with pytest.raises(InvalidArgumentError):
            AnalysisConfig(density=model, n_iterations=0)
        with pytest.raises(InvalidArgumentError):
            AnalysisConfig(density=model, batch_size=0)
        with pytest.raises(InvalidArgumentError):
            AnalysisConfig(density=model, submetrics=("bogus",))
        with pytest.raises(InvalidArgumentError):
            AnalysisConfig(density=model, master_seed=-1)

    def test_substreams_differ_by_iteration(self):
        a = iteration_substream(7, 0).random(4)
        b = iteration_substream(7, 1).random(4)
        c = iteration_substream(7, 0).random(4)
        assert not np.array_equal(a, b)
        np.testing.assert_array_equal(a, c)
