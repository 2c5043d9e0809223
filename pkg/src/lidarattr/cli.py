"""Command-line entry points wiring the pipeline end to end.

Every command validates its flags before any compute, exits non-zero with
a one-line diagnostic on failure, and derives all randomness from a single
--seed flag. Outputs embed the full effective configuration.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, io
from .analysis import average_maps, drop_curves, pointing_game
from .core import (
    DetectorError,
    FormatError,
    InsufficientDataError,
    InvalidArgumentError,
    PointCloud,
    ProtocolError,
)
from .detectors import (
    MockDetector,
    SceneSpec,
    WireConfig,
    WireDetector,
    generate_scene,
)
from .engine import AnalysisConfig, AnalysisResult, RunMetadata, run_analysis
from .sampling import (
    VoxelGridSpec,
    calibrate_lambda,
    fit_density_model,
)

_ERRORS = (
    InvalidArgumentError,
    InsufficientDataError,
    FormatError,
    ProtocolError,
    DetectorError,
    OSError,
    ValueError,
)


def _default_workers() -> int:
    env = os.environ.get("LIDARATTR_WORKERS")
    if env:
        return max(int(env), 1)
    return max(os.cpu_count() or 1, 1)


def _parse_pair(text: str, what: str) -> tuple[float, float]:
    parts = text.split(":")
    if len(parts) != 2:
        raise InvalidArgumentError(f"{what} must look like 'A:B', got {text!r}")
    return float(parts[0]), float(parts[1])


def _parse_fractions(text: str) -> tuple[float, ...]:
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise InvalidArgumentError(
                "fraction ranges must look like 'start:stop:step'"
            )
        start, stop, step = (float(p) for p in parts)
        if step <= 0.0:
            raise InvalidArgumentError("fraction step must be positive")
        values = np.arange(start, stop + 0.5 * step, step)
        return tuple(float(round(v, 9)) for v in values)
    return tuple(float(v) for v in text.split(","))


def _parse_resolution(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise InvalidArgumentError("resolution must look like '32x32x16'")
    return tuple(int(p) for p in parts)  # type: ignore[return-value]


def _make_detector(spec: str, timeout: float):
    if spec == "mock":
        return MockDetector()
    if spec.startswith("wire:"):
        command = spec[len("wire:"):]
        if not command:
            raise InvalidArgumentError("wire detector needs a command")
        return WireDetector(WireConfig(command=command, timeout=timeout))
    if spec.startswith("tcp:"):
        host, _, port = spec[len("tcp:"):].partition(":")
        if not port:
            raise InvalidArgumentError("tcp detector needs host:port")
        return WireDetector(
            WireConfig(tcp=(host, int(port)), timeout=timeout)
        )
    raise InvalidArgumentError(
        f"unknown detector {spec!r}; expected mock, wire:CMD or tcp:HOST:PORT"
    )


# -- subcommands -------------------------------------------------------------


def _cmd_gen_scene(args) -> int:
    ranges = None
    if args.ranges:
        ranges = tuple(float(v) for v in args.ranges.split(","))
    spec = SceneSpec(
        n_boxes=args.boxes,
        classes=tuple(args.classes.split(",")),
        r_range=_parse_pair(args.range, "--range"),
        ranges=ranges,
        points_at_10m=args.points_at_10m,
        marker_fraction=args.marker_fraction,
        ground_points=args.ground_points,
        seed=args.seed,
    )
    scene = generate_scene(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_kitti_bin(out / "cloud.bin", scene.cloud)
    io.write_boxes(out / "boxes.txt", scene.ground_truth())
    io.write_config(
        out / "scene.txt",
        {
            "boxes": str(spec.n_boxes),
            "classes": ",".join(spec.classes),
            "range": f"{spec.r_range[0]:g}:{spec.r_range[1]:g}",
            "points_at_10m": str(spec.points_at_10m),
            "marker_fraction": repr(spec.marker_fraction),
            "ground_points": str(spec.ground_points),
            "seed": str(spec.seed),
            "points": str(len(scene.cloud)),
            "generator_version": __version__,
        },
    )
    print(f"wrote scene with {len(scene.cloud)} points to {out}")
    return 0


def _cmd_fit_density(args) -> int:
    clouds_dir = Path(args.clouds)
    files = sorted(clouds_dir.glob("*.bin"))
    if not files:
        raise InvalidArgumentError(f"no .bin clouds found in {clouds_dir}")
    clouds = [io.read_kitti_bin(f) for f in files]
    grid = VoxelGridSpec(edge_length=args.voxel)
    model = fit_density_model(
        clouds,
        grid,
        bin_width=args.bin_width,
        max_range=args.max_range,
    )
    io.save_density_model(args.out, model)
    print(
        f"fitted density on {len(files)} clouds: "
        f"a={model.a:.6g} b={model.b:.6g} c={model.c:.6g}"
    )
    return 0


def _cmd_analyze(args) -> int:
    if args.n < 1:
        raise InvalidArgumentError("--n must be >= 1")
    cloud = io.read_kitti_bin(args.cloud)
    model = io.load_density_model(args.density)
    r_ref, p_ref = _parse_pair(args.lambda_ref, "--lambda-ref")
    model = model.with_lambda(calibrate_lambda(model, r_ref, p_ref))
    edge = args.voxel
    if edge is None:
        edge = float(model.fit_meta.get("edge_length_m", 0.20))
    submetrics: tuple[str, ...] = ()
    if args.submetrics and args.submetrics != "none":
        submetrics = tuple(args.submetrics.split(","))
    cfg = AnalysisConfig(
        density=model,
        n_iterations=args.n,
        edge_length=edge,
        master_seed=args.seed,
        batch_size=args.batch,
        submetrics=submetrics,
        workers=args.workers,
        overlap=args.overlap,
    )
    detector = _make_detector(args.detector, args.timeout)
    try:
        result = run_analysis(cloud, detector, cfg)
    finally:
        detector.close()
    config_snapshot = {
        "cloud": str(args.cloud),
        "detector": args.detector,
        "density": str(args.density),
        "n_iterations": str(args.n),
        "master_seed": str(args.seed),
        "batch_size": str(args.batch),
        "lambda_ref": args.lambda_ref,
        "submetrics": ",".join(submetrics) if submetrics else "none",
        "overlap": args.overlap,
        "edge_length": repr(edge),
        "engine_version": __version__,
    }
    io.write_bundle(args.out, result, config_snapshot, model)
    if args.export_colored:
        color_dir = Path(args.export_colored)
        color_dir.mkdir(parents=True, exist_ok=True)
        for k, amap in enumerate(result.maps):
            io.write_colored_cloud(
                color_dir / f"map_{k:04d}.ply", cloud, amap.scores
            )
    print(
        f"analyzed {len(cloud)} points, {len(result.detections)} "
        f"detections, N={args.n}: bundle at {args.out}"
    )
    return 0


def _result_from_bundle(bundle: io.BundleData) -> AnalysisResult:
    cloud = io.read_kitti_bin(bundle.config["cloud"])
    meta = bundle.metadata
    metadata = RunMetadata(
        master_seed=int(meta.get("master_seed", 0)),
        n_iterations=int(meta.get("n_iterations", 1)),
        edge_length=float(meta.get("edge_length", 0.2)),
        lam=float(meta.get("lam", 1.0)),
        p_min=float(meta.get("p_min", 0.01)),
        p_max=float(meta.get("p_max", 0.95)),
        engine_version=meta.get("engine_version", "unknown"),
        target_distances=np.zeros(len(bundle.detections)),
        mean_similarity=np.zeros(len(bundle.detections)),
    )
    return AnalysisResult(
        cloud=cloud,
        detections=bundle.detections,
        maps=bundle.maps,
        submetric_maps=bundle.submetric_maps,
        metadata=metadata,
    )


def _cmd_average(args) -> int:
    if not args.bundles:
        raise InvalidArgumentError("need at least one bundle")
    results = [
        _result_from_bundle(io.read_bundle(b)) for b in args.bundles
    ]
    avg = average_maps(
        results,
        args.label,
        resolution=_parse_resolution(args.resolution),
        margin=args.margin,
    )
    io.write_average_map_csv(args.out, avg)
    if args.ply:
        occupied = np.argwhere(avg.counts > 0)
        res = np.asarray(avg.resolution, dtype=np.float64)
        limit = 0.5 * (1.0 + avg.margin)
        centers = (occupied + 0.5) / res * (2.0 * limit) - limit
        scores = avg.means[avg.counts > 0]
        voxel_cloud = PointCloud.from_arrays(centers)
        io.write_colored_cloud(args.ply, voxel_cloud, scores)
    print(
        f"averaged {avg.detections_used} detections of {args.label!r} "
        f"into {args.out}"
    )
    return 0


def _cmd_drop_eval(args) -> int:
    bundle = io.read_bundle(args.bundle)
    cloud_path = args.cloud or bundle.config["cloud"]
    cloud = io.read_kitti_bin(cloud_path)
    detector = _make_detector(args.detector, args.timeout)
    try:
        curves = drop_curves(
            cloud,
            detector,
            bundle.maps,
            fractions=_parse_fractions(args.fractions),
            seed=args.seed,
            repeats=args.repeats,
        )
    finally:
        detector.close()
    io.write_drop_curves(args.out, curves)
    print(f"wrote descending/ascending/random drop curves to {args.out}")
    return 0


def _cmd_pointing_game(args) -> int:
    if not args.bundles:
        raise InvalidArgumentError("need at least one bundle")
    gt_paths = args.gt_boxes
    if len(gt_paths) == 1:
        gt_paths = gt_paths * len(args.bundles)
    if len(gt_paths) != len(args.bundles):
        raise InvalidArgumentError(
            "need one --gt-boxes per bundle (or a single shared file)"
        )
    results = [
        _result_from_bundle(io.read_bundle(b)) for b in args.bundles
    ]
    truths = [io.read_boxes(p) for p in gt_paths]
    outcome = pointing_game(
        results, truths, dilation=args.dilation,
        iou_threshold=args.iou_threshold,
    )
    print(
        f"pointing_game_score = {outcome.score:.4f} "
        f"({outcome.hits}/{outcome.total})"
    )
    return 0


def _cmd_serve_check(args) -> int:
    detector = _make_detector(args.detector, args.timeout)
    if not isinstance(detector, WireDetector):
        detector.close()
        raise InvalidArgumentError("serve-check needs a wire detector")
    try:
        probe = PointCloud.from_arrays(
            np.array([[10.0, 0.0, 0.0]]), np.array([0.5])
        )
        detector.detect_batch([probe])
        print(
            f"ok: model={detector.model_name} "
            f"classes={','.join(detector.classes)} "
            f"max_batch={detector.max_batch}"
        )
    finally:
        detector.close()
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lidarattr",
        description="Attribution maps for black-box 3D detectors on LiDAR "
        "point clouds",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a synthetic scene")
    p.add_argument("--boxes", type=int, default=6)
    p.add_argument("--classes", default="car")
    p.add_argument("--range", default="10:45")
    p.add_argument("--ranges", default=None,
                   help="explicit per-box ranges, comma-separated")
    p.add_argument("--points-at-10m", type=int, default=400)
    p.add_argument("--marker-fraction", type=float, default=0.05)
    p.add_argument("--ground-points", type=int, default=1500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_scene)

    p = sub.add_parser("fit-density", help="fit the voxel density model")
    p.add_argument("--clouds", required=True, help="directory of .bin files")
    p.add_argument("--voxel", type=float, default=0.20)
    p.add_argument("--bin-width", type=float, default=1.0)
    p.add_argument("--max-range", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fit_density)

    p = sub.add_parser("analyze", help="run the attribution engine")
    p.add_argument("--cloud", required=True)
    p.add_argument("--detector", default="mock")
    p.add_argument("--density", required=True)
    p.add_argument("--n", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda-ref", default="25:0.15",
                   help="'R:P' so that P_v(R)=P before clamping")
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--workers", type=int, default=_default_workers())
    p.add_argument("--voxel", type=float, default=None,
                   help="grid edge; defaults to the density file's value")
    p.add_argument("--submetrics",
                   default="confidence,translation,scale,orientation")
    p.add_argument("--overlap", choices=("3d", "bev"), default="3d")
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--export-colored", default=None,
                   help="also write turbo-colored PLY per detection")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("average", help="class-averaged attribution map")
    p.add_argument("--bundles", nargs="+", required=True)
    p.add_argument("--label", required=True)
    p.add_argument("--resolution", default="32x32x16")
    p.add_argument("--margin", type=float, default=0.10)
    p.add_argument("--out", required=True)
    p.add_argument("--ply", default=None)
    p.set_defaults(func=_cmd_average)

    p = sub.add_parser("drop-eval", help="point-dropping evaluation")
    p.add_argument("--bundle", required=True)
    p.add_argument("--cloud", default=None,
                   help="override the cloud path recorded in the bundle")
    p.add_argument("--detector", default="mock")
    p.add_argument("--fractions", default="0:1:0.05")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_drop_eval)

    p = sub.add_parser("pointing-game", help="arg-max-in-box hit rate")
    p.add_argument("--bundles", nargs="+", required=True)
    p.add_argument("--gt-boxes", nargs="+", required=True)
    p.add_argument("--dilation", type=float, default=1.0)
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.set_defaults(func=_cmd_pointing_game)

    p = sub.add_parser("serve-check", help="validate an external detector")
    p.add_argument("--detector", required=True)
    p.add_argument("--timeout", type=float, default=10.0)
    p.set_defaults(func=_cmd_serve_check)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
