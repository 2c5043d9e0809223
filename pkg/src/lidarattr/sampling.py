"""Per-iteration binary masks: points are grouped into the cells of a
randomly jittered voxel grid and every occupied voxel is kept or dropped
jointly, with a keep-probability that grows with the voxel's distance from
the sensor to counter the quadratic falloff of LiDAR point density.

Mask generation is pure given its random stream, so arbitrarily many
iterations can run in parallel. The density model is fitted once per
dataset and immutable afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .core import (
    InsufficientDataError,
    InvalidArgumentError,
    PointCloud,
    SamplingMask,
)

TWO_PI = 2.0 * math.pi

# 20-bit packing of signed voxel indices into one int64 key.
_KEY_BIAS = 1 << 19
_KEY_SPAN = 1 << 20


@dataclass(frozen=True)
class VoxelGridSpec:
    """Cubic voxel grid with one concrete random rigid jitter.

    The jitter is a yaw rotation about the sensor origin followed by a
    translation; translation components live in [0, edge_length) because
    anything larger is redundant modulo the grid.
    """

    edge_length: float = 0.20
    jitter_translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    jitter_yaw: float = 0.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.edge_length) and self.edge_length > 0.0):
            raise InvalidArgumentError("edge_length must be positive")
        t = tuple(float(v) for v in self.jitter_translation)
        if len(t) != 3 or any(not 0.0 <= v < self.edge_length for v in t):
            raise InvalidArgumentError(
                "jitter_translation components must lie in [0, edge_length)"
            )
        if not 0.0 <= self.jitter_yaw < TWO_PI:
            raise InvalidArgumentError("jitter_yaw must lie in [0, 2*pi)")
        object.__setattr__(self, "jitter_translation", t)
        object.__setattr__(self, "jitter_yaw", float(self.jitter_yaw))

    @classmethod
    def with_random_jitter(
        cls, edge_length: float, rng: np.random.Generator
    ) -> "VoxelGridSpec":
        """Draw a fresh jitter: per-axis translation uniform in
        [0, edge_length), yaw uniform in [0, 2*pi). Consumes exactly four
        uniforms from the stream."""
        t = rng.random(3) * edge_length
        yaw = rng.random() * TWO_PI
        return cls(edge_length, (float(t[0]), float(t[1]), float(t[2])), yaw)


@dataclass(frozen=True)
class DensityModel:
    """Keep-probability model: P(r) = clamp(lam * (a*r^2 + b*r + c),
    p_min, p_max), where 1 / (a*r^2 + b*r + c) approximates the dataset's
    mean voxel occupancy at sensor distance r."""

    a: float
    b: float
    c: float
    lam: float = 1.0
    p_min: float = 0.01
    p_max: float = 0.95
    fit_meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("a", "b", "c", "lam", "p_min", "p_max"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise InvalidArgumentError(f"{name} must be finite")
            object.__setattr__(self, name, v)
        if self.lam < 0.0:
            raise InvalidArgumentError("lam must be >= 0")
        if not 0.0 <= self.p_min <= self.p_max <= 1.0:
            raise InvalidArgumentError(
                "need 0 <= p_min <= p_max <= 1 for valid probabilities"
            )

    def with_lambda(self, lam: float) -> "DensityModel":
        return replace(self, lam=float(lam))


def keep_probability(model: DensityModel, r_v) -> float | np.ndarray:
    """Clamped keep-probability at sensor distance(s) ``r_v`` (meters)."""
    r = np.asarray(r_v, dtype=np.float64)
    p = model.lam * (model.a * r * r + model.b * r + model.c)
    p = np.clip(p, model.p_min, model.p_max)
    return float(p) if np.isscalar(r_v) else p


def calibrate_lambda(
    model: DensityModel, r_ref: float, p_ref: float
) -> float:
    """Scale factor such that the unclamped keep-probability at ``r_ref``
    equals ``p_ref``."""
    if not 0.0 < p_ref <= 1.0:
        raise InvalidArgumentError("p_ref must lie in (0, 1]")
    poly = model.a * r_ref * r_ref + model.b * r_ref + model.c
    if not poly > 0.0:
        raise InvalidArgumentError(
            f"density polynomial is non-positive at r={r_ref}"
        )
    return p_ref / poly


def _grid_frame(xyz: np.ndarray, grid: VoxelGridSpec) -> np.ndarray:
    """Map sensor-frame points into the jittered grid frame."""
    c = math.cos(grid.jitter_yaw)
    s = math.sin(grid.jitter_yaw)
    out = np.empty_like(xyz)
    out[:, 0] = c * xyz[:, 0] + s * xyz[:, 1]
    out[:, 1] = -s * xyz[:, 0] + c * xyz[:, 1]
    out[:, 2] = xyz[:, 2]
    out += np.asarray(grid.jitter_translation)
    return out


def voxel_indices(xyz: np.ndarray, grid: VoxelGridSpec) -> np.ndarray:
    """Integer voxel index of each point in the jittered grid."""
    g = _grid_frame(np.asarray(xyz, dtype=np.float64), grid)
    return np.floor(g / grid.edge_length).astype(np.int64)


def voxel_centers(indices: np.ndarray, grid: VoxelGridSpec) -> np.ndarray:
    """Sensor-frame centers of the given voxel indices, so distances to the
    sensor are physical rather than grid-frame."""
    centers = (indices.astype(np.float64) + 0.5) * grid.edge_length
    centers -= np.asarray(grid.jitter_translation)
    c = math.cos(grid.jitter_yaw)
    s = math.sin(grid.jitter_yaw)
    out = np.empty_like(centers)
    out[:, 0] = c * centers[:, 0] - s * centers[:, 1]
    out[:, 1] = s * centers[:, 0] + c * centers[:, 1]
    out[:, 2] = centers[:, 2]
    return out


def _pack_keys(indices: np.ndarray) -> np.ndarray:
    shifted = indices + _KEY_BIAS
    if shifted.min() < 0 or shifted.max() >= _KEY_SPAN:
        raise InvalidArgumentError("point coordinates exceed the grid span")
    return (shifted[:, 0] * _KEY_SPAN + shifted[:, 1]) * _KEY_SPAN + shifted[
        :, 2
    ]


def generate_mask(
    cloud: PointCloud,
    grid: VoxelGridSpec,
    model: DensityModel,
    rng: np.random.Generator,
) -> SamplingMask:
    """One Bernoulli(P(r_v)) draw per occupied voxel; all points of a voxel
    share the outcome.

    Voxels are processed in sorted key order and consume one uniform each,
    so the mask is a pure function of (cloud, grid jitter, model, stream
    state) independent of point order.
    """
    if len(cloud) == 0:
        raise InvalidArgumentError("cannot mask an empty cloud")
    idx = voxel_indices(cloud.xyz, grid)
    keys = _pack_keys(idx)
    uniq_keys, inverse = np.unique(keys, return_inverse=True)
    uniq_idx = np.empty((len(uniq_keys), 3), dtype=np.int64)
    uniq_idx[:, 2] = uniq_keys % _KEY_SPAN
    rest = uniq_keys // _KEY_SPAN
    uniq_idx[:, 1] = rest % _KEY_SPAN
    uniq_idx[:, 0] = rest // _KEY_SPAN
    uniq_idx -= _KEY_BIAS
    centers = voxel_centers(uniq_idx, grid)
    r_v = np.sqrt(np.einsum("ij,ij->i", centers, centers))
    p = keep_probability(model, r_v)
    voxel_keep = rng.random(len(uniq_keys)) < p
    return SamplingMask(voxel_keep[inverse])


def apply_mask(cloud: PointCloud, mask: SamplingMask) -> PointCloud:
    """Sub-sample a cloud, keeping original relative order. The result
    carries ``source_indices`` mapping each kept point back to the parent."""
    if len(mask) != len(cloud):
        raise InvalidArgumentError(
            f"mask length {len(mask)} != cloud length {len(cloud)}"
        )
    kept = np.flatnonzero(mask.keep)
    return PointCloud._trusted(cloud.points[kept], source_indices=kept)


def lattice_ball_size(edge_length: float, radius: float) -> int:
    """Number of voxel-center lattice offsets within ``radius`` (L2)."""
    reach = int(math.floor(radius / edge_length + 1e-9))
    limit = (radius / edge_length) ** 2 * (1.0 + 1e-9) + 1e-9
    count = 0
    for i in range(-reach, reach + 1):
        for j in range(-reach, reach + 1):
            kk = limit - i * i - j * j
            if kk >= 0.0:
                count += 2 * int(math.floor(math.sqrt(kk))) + 1
    return count


def binned_voxel_density(
    clouds: list[PointCloud],
    grid: VoxelGridSpec,
    bin_width: float = 1.0,
    neighbor_radius: float = 1.0,
    min_voxels_per_bin: int = 10,
    max_range: float | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean voxel occupancy per distance bin.

    For every occupied voxel the local occupancy is the fraction of lattice
    cells within ``neighbor_radius`` (L2 over voxel centers, the voxel
    itself excluded so the statistic stays unbiased at low occupancy) that
    are occupied. Occupancies are pooled over all clouds and averaged in
    ``bin_width``-wide distance bins; bins with fewer than
    ``min_voxels_per_bin`` occupied voxels are discarded.

    Returns (bin_centers, mean_densities, voxel_counts).
    """
    if bin_width <= 0.0:
        raise InvalidArgumentError("bin_width must be positive")
    stencil = lattice_ball_size(grid.edge_length, neighbor_radius) - 1
    if stencil < 1:
        raise InvalidArgumentError(
            "neighbor_radius too small for the grid edge"
        )
    radii: list[np.ndarray] = []
    densities: list[np.ndarray] = []
    for cloud in clouds:
        if len(cloud) == 0:
            continue
        idx = voxel_indices(cloud.xyz, grid)
        uniq = np.unique(_pack_keys(idx))
        vox = np.empty((len(uniq), 3), dtype=np.int64)
        vox[:, 2] = uniq % _KEY_SPAN
        rest = uniq // _KEY_SPAN
        vox[:, 1] = rest % _KEY_SPAN
        vox[:, 0] = rest // _KEY_SPAN
        vox -= _KEY_BIAS
        # neighbor counting in index space keeps the radius test identical
        # to the lattice stencil above
        tree = cKDTree(vox.astype(np.float64))
        r_idx = neighbor_radius / grid.edge_length * (1.0 + 1e-9) + 1e-9
        counts = tree.query_ball_point(
            vox.astype(np.float64), r_idx, return_length=True
        )
        centers = voxel_centers(vox, grid)
        radii.append(np.linalg.norm(centers, axis=1))
        densities.append((counts - 1) / stencil)
    if not radii:
        raise InsufficientDataError("no non-empty clouds to fit on")
    r_all = np.concatenate(radii)
    d_all = np.concatenate(densities)
    if max_range is None:
        max_range = float(r_all.max())
    n_bins = max(int(math.ceil(max_range / bin_width)), 1)
    which = np.floor(r_all / bin_width).astype(np.int64)
    keep = (which >= 0) & (which < n_bins)
    which, d_kept = which[keep], d_all[keep]
    counts = np.bincount(which, minlength=n_bins)
    sums = np.bincount(which, weights=d_kept, minlength=n_bins)
    ok = (counts >= min_voxels_per_bin) & (sums > 0.0)
    if not ok.any():
        raise InsufficientDataError("all distance bins are under-populated")
    centers_out = (np.flatnonzero(ok) + 0.5) * bin_width
    return centers_out, sums[ok] / counts[ok], counts[ok]


def fit_density_model(
    clouds: list[PointCloud],
    grid: VoxelGridSpec,
    bin_width: float = 1.0,
    neighbor_radius: float = 1.0,
    min_voxels_per_bin: int = 10,
    max_range: float | None = None,
    p_min: float = 0.01,
    p_max: float = 0.95,
) -> DensityModel:
    """Least-squares fit of a*r^2 + b*r + c to the reciprocal of the binned
    mean voxel occupancy. The returned model carries lam = 1; calibrate it
    with :func:`calibrate_lambda` before sampling."""
    bin_r, dens, counts = binned_voxel_density(
        clouds,
        grid,
        bin_width=bin_width,
        neighbor_radius=neighbor_radius,
        min_voxels_per_bin=min_voxels_per_bin,
        max_range=max_range,
    )
    if len(bin_r) < 3:
        raise InsufficientDataError(
            f"only {len(bin_r)} populated distance bins; need >= 3"
        )
    a, b, c = np.polyfit(bin_r, 1.0 / dens, 2)
    if not c > 0.0:
        raise InsufficientDataError(
            "degenerate density fit (non-positive constant term)"
        )
    meta = {
        "bin_width_m": repr(float(bin_width)),
        "neighbor_radius_m": repr(float(neighbor_radius)),
        "neighbor_metric": "l2-voxel-centers-self-exclusive",
        "edge_length_m": repr(float(grid.edge_length)),
        "bins_used": str(len(bin_r)),
        "voxels_used": str(int(counts.sum())),
        "clouds": str(len(clouds)),
    }
    return DensityModel(
        float(a), float(b), float(c), lam=1.0, p_min=p_min, p_max=p_max,
        fit_meta=meta,
    )
