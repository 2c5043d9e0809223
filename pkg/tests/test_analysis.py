import numpy as np
import pytest

from lidarattr.analysis import (
    average_maps,
    drop_curve,
    drop_curves,
    pointing_game,
    binned_mean_similarity,
)
from lidarattr.core import (
    AttributionMap,
    Box3D,
    Detection,
    InsufficientDataError,
    InvalidArgumentError,
    PointCloud,
)
from lidarattr.detectors.base import DetectorBackend
from lidarattr.engine import AnalysisResult, RunMetadata


def make_result(cloud, maps):
    dets = [m.target for m in maps]
    meta = RunMetadata(
        master_seed=0,
        n_iterations=maps[0].iterations if maps else 1,
        edge_length=0.1,
        lam=1.0,
        p_min=0.0,
        p_max=1.0,
        engine_version="test",
        target_distances=np.zeros(len(dets)),
        mean_similarity=np.zeros(len(dets)),
    )
    return AnalysisResult(
        cloud=cloud, detections=dets, maps=maps, submetric_maps={},
        metadata=meta,
    )


def make_map(target, scores, iterations=10):
    scores = np.asarray(scores, dtype=np.float64)
    return AttributionMap(
        target=target,
        scores=scores,
        visible_counts=np.full(len(scores), iterations, dtype=np.int64),
        iterations=iterations,
    )


class TestAverageMaps:
    def test_uniform_scores_give_uniform_voxels(self):
        box = Box3D((5.0, 2.0, 0.0), (4.0, 2.0, 1.6), 0.4)
        rng = np.random.default_rng(0)
        local = (rng.random((60, 3)) - 0.5) * box.dims * 0.9
        cloud = PointCloud.from_arrays(box.from_frame(local))
        det = Detection("car", 0.9, box)
        result = make_result(cloud, [make_map(det, np.full(60, 0.37))])
        avg = average_maps([result], "car", resolution=(8, 8, 4))
        occupied = avg.counts > 0
        assert occupied.any()
        np.testing.assert_allclose(avg.means[occupied], 0.37)
        assert avg.counts.sum() == 60

    def test_disjoint_detections_union_with_counts_one(self):
        b1 = Box3D((0.0, 0.0, 0.0), (4.0, 2.0, 1.6), 0.0)
        b2 = Box3D((40.0, 0.0, 0.0), (4.0, 2.0, 1.6), 0.0)
        # one point deep in each box, at mirrored local positions so the
        # two contributions land in different voxels
        p1 = b1.from_frame(np.array([[1.3, 0.4, 0.3]]))
        p2 = b2.from_frame(np.array([[-1.3, -0.4, -0.3]]))
        cloud = PointCloud.from_arrays(np.vstack([p1, p2]))
        d1, d2 = Detection("car", 0.9, b1), Detection("car", 0.8, b2)
        scores1 = np.array([0.8, 0.0])
        scores2 = np.array([0.0, 0.3])
        result = make_result(
            cloud, [make_map(d1, scores1), make_map(d2, scores2)]
        )
        avg = average_maps([result], "car", resolution=(8, 8, 4))
        # each in-box point lands in its own voxel with count 1; the
        # out-of-box point of the other map is far outside the margin
        assert (avg.counts > 0).sum() == 2
        assert set(np.round(avg.means[avg.counts > 0], 6)) == {0.8, 0.3}
        assert (avg.counts[avg.counts > 0] == 1).all()

    def test_mirrored_points_give_symmetric_map(self):
        box = Box3D((0.0, 0.0, 0.0), (4.0, 2.0, 1.6), 0.0)
        rng = np.random.default_rng(1)
        half = np.column_stack(
            [
                rng.uniform(-1.9, 1.9, 40),
                rng.uniform(0.02, 0.95, 40),
                rng.uniform(-0.7, 0.7, 40),
            ]
        )
        pts = np.vstack([half, half * [1.0, -1.0, 1.0]])
        cloud = PointCloud.from_arrays(pts)
        scores = np.concatenate([rng.random(40)] * 2)
        det = Detection("car", 0.9, box)
        avg = average_maps(
            [make_result(cloud, [make_map(det, scores)])],
            "car",
            resolution=(8, 8, 4),
        )
        np.testing.assert_allclose(avg.means, avg.means[:, ::-1, :])
        np.testing.assert_allclose(avg.counts, avg.counts[:, ::-1, :])

    def test_margin_keeps_near_box_context(self):
        box = Box3D((0.0, 0.0, 0.0), (4.0, 2.0, 1.6), 0.0)
        # 4% beyond the face is inside the 10% margin; 30% beyond is not
        pts = np.array([[2.08, 0.0, 0.0], [2.6, 0.0, 0.0]])
        cloud = PointCloud.from_arrays(pts)
        det = Detection("car", 0.9, box)
        avg = average_maps(
            [make_result(cloud, [make_map(det, np.array([0.5, 0.5]))])],
            "car",
        )
        assert avg.counts.sum() == 1

    def test_order_invariance(self):
        rng = np.random.default_rng(2)
        boxes = [
            Box3D(rng.uniform(-20, 20, 3), (4.0, 2.0, 1.6), rng.uniform(-3, 3))
            for _ in range(4)
        ]
        cloud = PointCloud.from_arrays(
            np.vstack([b.from_frame((rng.random((25, 3)) - 0.5) * b.dims)
                       for b in boxes])
        )
        maps = [
            make_map(Detection("car", 0.9, b), rng.random(len(cloud)))
            for b in boxes
        ]
        fwd = average_maps([make_result(cloud, maps)], "car")
        rev = average_maps([make_result(cloud, maps[::-1])], "car")
        np.testing.assert_allclose(fwd.means, rev.means, atol=1e-12)
        np.testing.assert_array_equal(fwd.counts, rev.counts)

    def test_unknown_label_rejected(self):
        box = Box3D((0, 0, 0), (4, 2, 1.6), 0.0)
        cloud = PointCloud.from_arrays(np.zeros((1, 3)))
        result = make_result(
            cloud, [make_map(Detection("car", 0.9, box), np.array([0.1]))]
        )
        with pytest.raises(InsufficientDataError):
            average_maps([result], "pedestrian")


class MassDetector(DetectorBackend):
    """Confidence equals the surviving attribution mass of the target box;
    the map under test is the stub's own importance assignment."""

    def __init__(self, cloud, box, values):
        self.box = box
        self.values = {
            cloud.points[j].tobytes(): float(values[j])
            for j in range(len(cloud))
        }
        self.total = float(np.sum(values))

    def detect(self, cloud):
        kept = sum(
            self.values.get(cloud.points[j].tobytes(), 0.0)
            for j in range(len(cloud))
        )
        conf = min(kept / self.total, 1.0)
        return [Detection("car", conf, self.box)]


class TestDropCurve:
    def _setup(self):
        rng = np.random.default_rng(3)
        box = Box3D((10.0, 0.0, 0.0), (4.0, 2.0, 1.6), 0.2)
        inside = box.from_frame((rng.random((40, 3)) - 0.5) * box.dims * 0.95)
        outside = rng.uniform(30, 50, (20, 3))
        cloud = PointCloud.from_arrays(np.vstack([inside, outside]))
        values = np.concatenate(
            [np.linspace(0.02, 1.0, 40), np.zeros(20)]
        )
        det = MassDetector(cloud, box, values)
        target = det.detect(cloud)[0]
        amap = make_map(target, values)
        return cloud, det, [amap]

    def test_f_zero_is_self_match(self):
        cloud, det, maps = self._setup()
        for ordering in ("descending", "ascending", "random"):
            curve = drop_curve(
                cloud, det, maps, ordering, fractions=(0.0, 0.5), seed=1
            )
            assert curve.mean_iou[0] == pytest.approx(1.0)
            assert curve.mean_confidence[0] == pytest.approx(1.0)

    def test_f_one_removes_all_in_box_points(self):
        cloud, det, maps = self._setup()
        seen = []

        class Recorder(DetectorBackend):
            def detect(self, c):
                seen.append(c)
                return det.detect(c)

        drop_curve(cloud, Recorder(), maps, "descending",
                   fractions=(0.0, 1.0))
        final = seen[-1]
        assert len(final) == 20  # only the out-of-box points remain
        assert not maps[0].target.box.contains(final.xyz).any()

    def test_descending_strictly_below_random(self):
        cloud, det, maps = self._setup()
        fractions = tuple(np.round(np.arange(0.0, 1.0001, 0.1), 3))
        curves = drop_curves(
            cloud, det, maps, fractions=fractions, seed=7, repeats=5
        )
        desc = curves["descending"].mean_confidence
        rand = curves["random"].mean_confidence
        asc = curves["ascending"].mean_confidence
        interior = slice(1, len(fractions) - 1)
        assert (desc[interior] < rand[interior]).all()
        assert (rand[interior] < asc[interior]).all()

    def test_random_curves_are_seeded(self):
        cloud, det, maps = self._setup()
        a = drop_curve(cloud, det, maps, "random",
                       fractions=(0.0, 0.4, 0.8), seed=5)
        b = drop_curve(cloud, det, maps, "random",
                       fractions=(0.0, 0.4, 0.8), seed=5)
        np.testing.assert_array_equal(a.mean_confidence, b.mean_confidence)

    def test_bad_fractions_rejected(self):
        cloud, det, maps = self._setup()
        with pytest.raises(InvalidArgumentError):
            drop_curve(cloud, det, maps, "descending", fractions=(0.5, 0.2))
        with pytest.raises(InvalidArgumentError):
            drop_curve(cloud, det, maps, "sideways", fractions=(0.0, 1.0))


class TestPointingGame:
    def _scene_result(self, peak_on_object):
        box = Box3D((10.0, 0.0, 0.0), (4.0, 2.0, 1.6), 0.0)
        inside = box.from_frame(
            (np.random.default_rng(4).random((20, 3)) - 0.5) * box.dims * 0.9
        )
        ground = np.array([[40.0, 40.0, -1.7], [45.0, -20.0, -1.7]])
        cloud = PointCloud.from_arrays(np.vstack([inside, ground]))
        scores = np.full(22, 0.1)
        if peak_on_object:
            scores[5] = 0.9
        else:
            scores[20] = 0.9
        det = Detection("car", 0.9, box)
        result = make_result(cloud, [make_map(det, scores)])
        return result, [("car", box)]

    def test_hit(self):
        result, gt = self._scene_result(True)
        out = pointing_game([result], [gt])
        assert out.score == 1.0 and out.total == 1

    def test_miss(self):
        result, gt = self._scene_result(False)
        out = pointing_game([result], [gt])
        assert out.score == 0.0

    def test_wrong_label_not_evaluated(self):
        result, gt = self._scene_result(True)
        with pytest.raises(InsufficientDataError):
            pointing_game([result], [[("pedestrian", gt[0][1])]])

    def test_dilation_monotone(self):
        rng = np.random.default_rng(6)
        results, truths = [], []
        for s in range(6):
            box = Box3D(rng.uniform(-15, 15, 3), (4.0, 2.0, 1.6),
                        rng.uniform(-3, 3))
            near = box.from_frame(
                (rng.random((30, 3)) - 0.5) * box.dims * 1.3
            )
            cloud = PointCloud.from_arrays(near)
            det = Detection("car", 0.9, box)
            results.append(
                make_result(cloud, [make_map(det, rng.random(30))])
            )
            truths.append([("car", box)])
        scores = [
            pointing_game(results, truths, dilation=d).score
            for d in (1.0, 1.1, 1.3, 1.6)
        ]
        assert all(b >= a for a, b in zip(scores, scores[1:]))


class TestBinnedSimilarity:
    def test_binning(self):
        d = np.array([12.0, 13.0, 27.0, 28.0])
        s = np.array([0.2, 0.4, 0.6, 0.8])
        centers, means, counts = binned_mean_similarity(d, s, 5.0)
        np.testing.assert_allclose(centers, [12.5, 27.5])
        np.testing.assert_allclose(means, [0.3, 0.7])
        assert counts.tolist() == [2, 2]

    def test_empty_rejected(self):
        with pytest.raises(InsufficientDataError):
            binned_mean_similarity(np.zeros(0), np.zeros(0))
