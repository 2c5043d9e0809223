"""File formats: KITTI .bin ingestion, versioned columnar attribution
files, density-model and config key-value files, PLY-style colored cloud
export, and run bundles.

All writers are deterministic byte-for-byte given identical inputs; floats
are written with ``repr`` so numeric round trips are exact. The one
documented exception is a bundle's ``timings.txt``, which records wall
clock and worker count and is excluded from the bundle's reproducibility
contract.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import AverageAttributionMap, DropCurve
from .core import (
    AttributionMap,
    Box3D,
    Detection,
    FormatError,
    InvalidArgumentError,
    PointCloud,
)
from .colormap import map_colors, normalize_scores
from .engine import AnalysisResult
from .sampling import DensityModel

ATTRIBUTION_MAGIC = "lidarattr-attribution v1"
DENSITY_MAGIC = "lidarattr-density v1"
BOXES_MAGIC = "lidarattr-boxes v1"
DETECTIONS_MAGIC = "lidarattr-detections v1"
CONFIG_MAGIC = "lidarattr-config v1"

_POINT_BYTES = 16  # four little-endian float32 per point


# -- KITTI-style raw clouds --------------------------------------------------


def read_kitti_bin(path: str | Path) -> PointCloud:
    """Read little-endian float32 (x, y, z, intensity) quadruples."""
    data = Path(path).read_bytes()
    if len(data) % _POINT_BYTES != 0:
        raise FormatError(
            f"{path}: size {len(data)} is not a multiple of "
            f"{_POINT_BYTES} bytes"
        )
    arr = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    finite = np.isfinite(arr)
    if not finite.all():
        row, col = np.argwhere(~finite)[0]
        raise FormatError(
            f"{path}: non-finite value at byte offset "
            f"{int(row) * _POINT_BYTES + int(col) * 4}"
        )
    return PointCloud(arr.astype(np.float64))


def write_kitti_bin(path: str | Path, cloud: PointCloud) -> None:
    Path(path).write_bytes(
        np.ascontiguousarray(cloud.points, dtype="<f4").tobytes()
    )


# -- colored cloud export ----------------------------------------------------


def write_colored_cloud(
    path: str | Path,
    cloud: PointCloud,
    scores: np.ndarray,
    colormap: str = "turbo",
) -> None:
    """ASCII PLY with per-point RGB from min-max-normalized scores."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(cloud):
        raise InvalidArgumentError(
            f"scores length {len(scores)} != cloud length {len(cloud)}"
        )
    rgb = map_colors(normalize_scores(scores), colormap)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    xyz = cloud.xyz
    for j in range(len(cloud)):
        lines.append(
            f"{float(xyz[j, 0])!r} {float(xyz[j, 1])!r} "
            f"{float(xyz[j, 2])!r} "
            f"{int(rgb[j, 0])} {int(rgb[j, 1])} {int(rgb[j, 2])}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- attribution maps --------------------------------------------------------


def write_attribution(path: str | Path, amap: AttributionMap) -> None:
    det = amap.target
    if "\n" in det.label:
        raise InvalidArgumentError("labels must not contain newlines")
    box = det.box
    head = [
        ATTRIBUTION_MAGIC,
        f"label = {det.label}",
        f"confidence = {det.confidence!r}",
        "box = "
        + " ".join(
            repr(float(v))
            for v in (*box.center, *box.dims, box.yaw)
        ),
        f"iterations = {amap.iterations}",
        f"points = {len(amap)}",
        "columns = index psi visible_count unobserved",
    ]
    rows = [
        f"{j} {float(amap.scores[j])!r} {int(amap.visible_counts[j])} "
        f"{int(amap.unobserved[j])}"
        for j in range(len(amap))
    ]
    Path(path).write_text("\n".join(head + rows) + "\n", encoding="utf-8")


def _header_value(line: str, key: str, path) -> str:
    prefix = f"{key} = "
    if not line.startswith(prefix):
        raise FormatError(f"{path}: expected '{key} = ...', got {line!r}")
    return line[len(prefix):]


def read_attribution(path: str | Path) -> AttributionMap:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0] != ATTRIBUTION_MAGIC:
        raise FormatError(
            f"{path}: not a {ATTRIBUTION_MAGIC!r} file "
            f"(got {lines[0]!r})" if lines else f"{path}: empty file"
        )
    if len(lines) < 7:
        raise FormatError(f"{path}: truncated header")
    label = _header_value(lines[1], "label", path)
    confidence = float(_header_value(lines[2], "confidence", path))
    box_vals = [float(v) for v in _header_value(lines[3], "box", path).split()]
    if len(box_vals) != 7:
        raise FormatError(f"{path}: box must have 7 values")
    iterations = int(_header_value(lines[4], "iterations", path))
    n_points = int(_header_value(lines[5], "points", path))
    rows = lines[7:]
    if len(rows) != n_points:
        raise FormatError(
            f"{path}: expected {n_points} rows, found {len(rows)}"
        )
    scores = np.empty(n_points)
    counts = np.empty(n_points, dtype=np.int64)
    unobserved = np.empty(n_points, dtype=bool)
    try:
        for j, row in enumerate(rows):
            idx_s, psi_s, cnt_s, flag_s = row.split()
            if int(idx_s) != j:
                raise FormatError(f"{path}: row {j} carries index {idx_s}")
            scores[j] = float(psi_s)
            counts[j] = int(cnt_s)
            unobserved[j] = bool(int(flag_s))
    except ValueError as exc:
        raise FormatError(f"{path}: bad data row: {exc}") from exc
    target = Detection(
        label=label,
        confidence=confidence,
        box=Box3D(box_vals[0:3], box_vals[3:6], box_vals[6]),
    )
    return AttributionMap(
        target=target,
        scores=scores,
        visible_counts=counts,
        iterations=iterations,
        unobserved=unobserved,
    )


# -- density model -----------------------------------------------------------


def save_density_model(path: str | Path, model: DensityModel) -> None:
    lines = [DENSITY_MAGIC]
    for key in ("a", "b", "c", "lam", "p_min", "p_max"):
        lines.append(f"{key} = {getattr(model, key)!r}")
    for key in sorted(model.fit_meta):
        lines.append(f"meta.{key} = {model.fit_meta[key]}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_density_model(path: str | Path) -> DensityModel:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != DENSITY_MAGIC:
        raise FormatError(f"{path}: not a {DENSITY_MAGIC!r} file")
    values: dict[str, str] = {}
    meta: dict[str, str] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise FormatError(f"{path}: malformed line {line!r}")
        if key.startswith("meta."):
            meta[key[5:]] = value
        else:
            values[key] = value
    try:
        return DensityModel(
            a=float(values["a"]),
            b=float(values["b"]),
            c=float(values["c"]),
            lam=float(values["lam"]),
            p_min=float(values["p_min"]),
            p_max=float(values["p_max"]),
            fit_meta=meta,
        )
    except KeyError as exc:
        raise FormatError(f"{path}: missing field {exc}") from exc


# -- boxes / detections ------------------------------------------------------


def write_boxes(path: str | Path, boxes: list[tuple[str, Box3D]]) -> None:
    lines = [BOXES_MAGIC]
    for label, box in boxes:
        if "\n" in label:
            raise InvalidArgumentError("labels must not contain newlines")
        nums = " ".join(
            repr(float(v)) for v in (*box.center, *box.dims, box.yaw)
        )
        lines.append(f"{nums} {label}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_boxes(path: str | Path) -> list[tuple[str, Box3D]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != BOXES_MAGIC:
        raise FormatError(f"{path}: not a {BOXES_MAGIC!r} file")
    out = []
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split(None, 7)
        if len(parts) != 8:
            raise FormatError(f"{path}: malformed box line {line!r}")
        vals = [float(v) for v in parts[:7]]
        out.append((parts[7], Box3D(vals[0:3], vals[3:6], vals[6])))
    return out


def write_detections(path: str | Path, dets: list[Detection]) -> None:
    lines = [DETECTIONS_MAGIC]
    for det in dets:
        if "\n" in det.label:
            raise InvalidArgumentError("labels must not contain newlines")
        box = det.box
        nums = " ".join(
            repr(float(v))
            for v in (det.confidence, *box.center, *box.dims, box.yaw)
        )
        lines.append(f"{nums} {det.label}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_detections(path: str | Path) -> list[Detection]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != DETECTIONS_MAGIC:
        raise FormatError(f"{path}: not a {DETECTIONS_MAGIC!r} file")
    out = []
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split(None, 8)
        if len(parts) != 9:
            raise FormatError(f"{path}: malformed detection line {line!r}")
        vals = [float(v) for v in parts[:8]]
        out.append(
            Detection(
                label=parts[8],
                confidence=vals[0],
                box=Box3D(vals[1:4], vals[4:7], vals[7]),
            )
        )
    return out


# -- key-value config --------------------------------------------------------


def write_config(path: str | Path, config: dict[str, str]) -> None:
    lines = [CONFIG_MAGIC]
    for key in config:
        lines.append(f"{key} = {config[key]}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_config(path: str | Path) -> dict[str, str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != CONFIG_MAGIC:
        raise FormatError(f"{path}: not a {CONFIG_MAGIC!r} file")
    out: dict[str, str] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise FormatError(f"{path}: malformed line {line!r}")
        out[key] = value
    return out


# -- CSV exports -------------------------------------------------------------


def write_drop_curves(path: str | Path, curves: dict[str, DropCurve]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["ordering", "fraction", "mean_iou", "mean_confidence",
             "repeats"]
        )
        for name in sorted(curves):
            curve = curves[name]
            for i in range(len(curve.fractions)):
                writer.writerow(
                    [
                        name,
                        repr(float(curve.fractions[i])),
                        repr(float(curve.mean_iou[i])),
                        repr(float(curve.mean_confidence[i])),
                        curve.repeats,
                    ]
                )


def write_average_map_csv(
    path: str | Path, avg: AverageAttributionMap
) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"# label={avg.label}"])
        writer.writerow(
            [f"# resolution={avg.resolution[0]}x{avg.resolution[1]}"
             f"x{avg.resolution[2]} margin={avg.margin!r} "
             f"detections={avg.detections_used}"]
        )
        writer.writerow(
            ["ix", "iy", "iz", "count", "mean_score", "mean_intensity"]
        )
        occupied = np.argwhere(avg.counts > 0)
        for ix, iy, iz in occupied:
            writer.writerow(
                [
                    int(ix),
                    int(iy),
                    int(iz),
                    int(avg.counts[ix, iy, iz]),
                    repr(float(avg.means[ix, iy, iz])),
                    repr(float(avg.intensity_means[ix, iy, iz])),
                ]
            )


# -- run bundles -------------------------------------------------------------


@dataclass
class BundleData:
    path: Path
    config: dict[str, str]
    detections: list[Detection]
    maps: list[AttributionMap]
    submetric_maps: dict[str, list[AttributionMap]]
    metadata: dict[str, str]


def write_bundle(
    directory: str | Path,
    result: AnalysisResult,
    config: dict[str, str],
    density: DensityModel,
) -> Path:
    """Persist an analysis result as a self-describing directory."""
    root = Path(directory)
    (root / "maps").mkdir(parents=True, exist_ok=True)
    write_config(root / "config.txt", config)
    save_density_model(root / "density.txt", density)
    write_detections(root / "detections.txt", result.detections)
    meta = result.metadata
    write_config(
        root / "metadata.txt",
        {
            "master_seed": str(meta.master_seed),
            "n_iterations": str(meta.n_iterations),
            "edge_length": repr(meta.edge_length),
            "lam": repr(meta.lam),
            "p_min": repr(meta.p_min),
            "p_max": repr(meta.p_max),
            "engine_version": meta.engine_version,
            "warnings": "; ".join(meta.warnings),
        },
    )
    # volatile by nature: excluded from the bundle's byte-reproducibility
    write_config(
        root / "timings.txt",
        {
            "workers": str(meta.workers),
            **{k: repr(v) for k, v in sorted(meta.timings.items())},
        },
    )
    with open(root / "targets.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "label", "distance", "mean_similarity"])
        for k, det in enumerate(result.detections):
            writer.writerow(
                [
                    k,
                    det.label,
                    repr(float(meta.target_distances[k])),
                    repr(float(meta.mean_similarity[k])),
                ]
            )
    for k, amap in enumerate(result.maps):
        write_attribution(root / "maps" / f"map_{k:04d}.txt", amap)
    for name, maps in sorted(result.submetric_maps.items()):
        for k, amap in enumerate(maps):
            write_attribution(
                root / "maps" / f"map_{k:04d}.{name}.txt", amap
            )
    return root


def read_bundle(directory: str | Path) -> BundleData:
    root = Path(directory)
    if not (root / "config.txt").is_file():
        raise FormatError(f"{root}: not a run bundle (config.txt missing)")
    config = read_config(root / "config.txt")
    detections = read_detections(root / "detections.txt")
    metadata = read_config(root / "metadata.txt")
    maps = []
    submetric_maps: dict[str, list[AttributionMap]] = {}
    for k in range(len(detections)):
        maps.append(read_attribution(root / "maps" / f"map_{k:04d}.txt"))
        for extra in sorted((root / "maps").glob(f"map_{k:04d}.*.txt")):
            name = extra.name.split(".")[1]
            submetric_maps.setdefault(name, []).append(
                read_attribution(extra)
            )
    return BundleData(
        path=root,
        config=config,
        detections=detections,
        maps=maps,
        submetric_maps=submetric_maps,
        metadata=metadata,
    )
