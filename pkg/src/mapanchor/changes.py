"""Occupancy-based change detection between an aligned session and a reference.

Scans are integrated into a sparse log-odds voxel grid (hits at returns,
misses along the ray). The fused occupied cloud drops transients on its own:
a point seen once but crossed by free-space rays nine times ends up below
the occupied threshold. Positive differences are fused points far from the
reference; negative differences are reference points inside observed free
space.

Log-odds sums are stored unclamped and clamped on read, so scan integration
order cannot change the result.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import types
from numba.typed import Dict as NumbaDict

from ._kernels import integrate_rays_kernel
from .errors import EmptyCluster, EmptyGrid
from .geometry import NnIndex, PointCloud, Pose3, as_xyz
from .scansim import TriangleMesh

_KEY_OFFSET = 1048576  # 2^20; voxel indices packed 21 bits per axis


@dataclass
class ChangeParams:
    voxel_resolution: float = 0.1
    distance_threshold: float = 0.3
    cluster_eps: float = 0.3
    cluster_min_points: int = 10
    outlier_k: int = 16
    outlier_std: float = 2.0
    hit_log_odds: float = 0.85
    miss_log_odds: float = -0.4
    clamp_min: float = -2.0
    clamp_max: float = 3.5
    occupied_threshold: float = 0.0
    free_threshold: float = 0.0


class OccupancyVoxelGrid:
    """Sparse voxel grid of accumulated log-odds."""

    def __init__(
        self,
        resolution: float = 0.1,
        origin=(0.0, 0.0, 0.0),
        hit_log_odds: float = 0.85,
        miss_log_odds: float = -0.4,
        clamp: tuple[float, float] = (-2.0, 3.5),
        occupied_threshold: float = 0.0,
        free_threshold: float = 0.0,
    ):
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        self.resolution = float(resolution)
        self.origin = np.asarray(origin, dtype=float).reshape(3)
        self.hit_log_odds = hit_log_odds
        self.miss_log_odds = miss_log_odds
        self.clamp = clamp
        self.occupied_threshold = occupied_threshold
        self.free_threshold = free_threshold
        self._sums = NumbaDict.empty(types.int64, types.float64)
        self.n_integrated = 0

    def integrate_scan(self, scan, sensor_pose: Pose3):
        """Trace each return from the sensor; misses along the ray, hit at the end."""
        pts = as_xyz(scan)
        self.n_integrated += 1
        if pts.shape[0] == 0:
            return
        world = sensor_pose.apply(pts)
        integrate_rays_kernel(
            np.ascontiguousarray(sensor_pose.t - self.origin),
            np.ascontiguousarray(world - self.origin),
            self.resolution,
            self._sums,
            self.hit_log_odds,
            self.miss_log_odds,
        )

    def _keys_values(self):
        keys = np.fromiter(self._sums.keys(), dtype=np.int64, count=len(self._sums))
        vals = np.fromiter(self._sums.values(), dtype=np.float64, count=len(self._sums))
        return keys, np.clip(vals, self.clamp[0], self.clamp[1])

    def _key_of(self, points):
        idx = np.floor((as_xyz(points) - self.origin) / self.resolution).astype(np.int64)
        return (
            ((idx[:, 0] + _KEY_OFFSET) << 42)
            | ((idx[:, 1] + _KEY_OFFSET) << 21)
            | (idx[:, 2] + _KEY_OFFSET)
        )

    def _centers_of(self, keys):
        x = (keys >> 42) - _KEY_OFFSET
        y = ((keys >> 21) & 0x1FFFFF) - _KEY_OFFSET
        z = (keys & 0x1FFFFF) - _KEY_OFFSET
        idx = np.stack([x, y, z], axis=1).astype(float)
        return (idx + 0.5) * self.resolution + self.origin

    def log_odds(self, points):
        """Clamped log-odds of the voxels containing the points; NaN if unknown."""
        keys, vals = self._keys_values()
        q = self._key_of(points)
        if keys.size == 0:
            return np.full(q.shape[0], np.nan)
        order = np.argsort(keys)
        keys = keys[order]
        vals = vals[order]
        pos = np.searchsorted(keys, q)
        pos = np.clip(pos, 0, keys.size - 1)
        found = keys[pos] == q
        out = np.full(q.shape[0], np.nan)
        out[found] = vals[pos[found]]
        return out

    def fused_cloud(self) -> PointCloud:
        """Centers of occupied voxels (clamped log-odds above threshold)."""
        if self.n_integrated == 0:
            raise EmptyGrid("no scans integrated")
        keys, vals = self._keys_values()
        occ = keys[vals > self.occupied_threshold]
        return PointCloud(self._centers_of(occ))

    def free_mask_for(self, points):
        """True where a point's containing voxel is observed free."""
        lo = self.log_odds(points)
        return np.isfinite(lo) & (lo < self.free_threshold)


def integrate_scan(grid: OccupancyVoxelGrid, scan, sensor_pose: Pose3):
    grid.integrate_scan(scan, sensor_pose)


def fused_cloud(grid: OccupancyVoxelGrid) -> PointCloud:
    return grid.fused_cloud()


def detect_positive(fused, reference_index: NnIndex, threshold: float):
    """Split the fused cloud into (new geometry, unaltered) by NN distance."""
    pts = as_xyz(fused)
    d = reference_index.nearest_distances(pts)
    pd_mask = d > threshold
    return PointCloud(pts[pd_mask]), PointCloud(pts[~pd_mask])


def detect_negative(grid: OccupancyVoxelGrid, reference_cloud, threshold: float):
    """Reference points whose containing voxel was observed free.

    ``threshold`` additionally bounds the point-to-voxel-center distance; at
    the default resolution it cannot bind (half-voxel diagonal << threshold).
    """
    pts = as_xyz(reference_cloud)
    if pts.shape[0] == 0:
        return PointCloud(np.zeros((0, 3)))
    free = grid.free_mask_for(pts)
    if threshold is not None and free.any():
        keys = grid._key_of(pts[free])
        centers = grid._centers_of(keys)
        close = np.linalg.norm(pts[free] - centers, axis=1) <= threshold
        sel = np.nonzero(free)[0][close]
        free = np.zeros(len(pts), dtype=bool)
        free[sel] = True
    return PointCloud(pts[free])


# ---------------------------------------------------------------------------
# Clustering


def statistical_outlier_removal(points, k: int, std_ratio: float):
    """Drop points whose mean distance to their k neighbors is an outlier."""
    pts = as_xyz(points)
    if pts.shape[0] <= k:
        return pts
    idx = NnIndex(pts)
    d, _ = idx._tree.query(pts, k=k + 1)  # first neighbor is the point itself
    mean_d = d[:, 1:].mean(axis=1)
    mu, sigma = mean_d.mean(), mean_d.std()
    return pts[mean_d <= mu + std_ratio * sigma]


def dbscan(points, eps: float, min_points: int):
    """Plain DBSCAN; returns a label per point (-1 for noise).

    Core points have at least min_points neighbors within eps (the point
    itself counts). Clusters are grown one at a time in index order, so
    border points join the first cluster that reaches them.
    """
    pts = as_xyz(points)
    n = pts.shape[0]
    labels = np.full(n, -1, dtype=int)
    if n == 0:
        return labels
    tree = NnIndex(pts)._tree
    neighborhoods = tree.query_ball_point(pts, eps)
    is_core = np.array([len(nb) >= min_points for nb in neighborhoods])
    cluster = 0
    for seed in range(n):
        if labels[seed] != -1 or not is_core[seed]:
            continue
        labels[seed] = cluster
        frontier = [seed]
        while frontier:
            p = frontier.pop()
            for q in neighborhoods[p]:
                if labels[q] == -1:
                    labels[q] = cluster
                    if is_core[q]:
                        frontier.append(q)
        cluster += 1
    return labels


def cluster_and_filter(points, eps: float, min_points: int, outlier_k: int, outlier_std: float):
    """Outlier removal, then DBSCAN; clusters smaller than min_points are dropped."""
    pts = as_xyz(points)
    if pts.shape[0] == 0:
        return []
    kept = statistical_outlier_removal(pts, outlier_k, outlier_std)
    if kept.shape[0] == 0:
        return []
    labels = dbscan(kept, eps, min_points)
    clusters = []
    for c in range(labels.max() + 1 if labels.size else 0):
        members = kept[labels == c]
        if members.shape[0] >= min_points:
            clusters.append(PointCloud(members))
    return clusters


# ---------------------------------------------------------------------------
# Voxel meshing


_FACES = [
    # (axis, direction, corner offsets in CCW order seen from outside)
    (0, -1, [(0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)]),
    (0, +1, [(1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)]),
    (1, -1, [(0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)]),
    (1, +1, [(0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)]),
    (2, -1, [(0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)]),
    (2, +1, [(0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)]),
]

COLORS = {"blue": (0, 0, 255), "red": (255, 0, 0)}


def voxel_mesh(cluster, resolution: float, color: str = "blue"):
    """Cube mesh over the cluster's occupied voxels, interior faces culled.

    Returns (TriangleMesh, per-vertex uint8 colors).
    """
    pts = as_xyz(cluster)
    if pts.shape[0] == 0:
        raise EmptyCluster("cannot mesh an empty cluster")
    rgb = COLORS[color]
    voxels = set(map(tuple, np.floor(pts / resolution).astype(np.int64)))
    vert_ids: dict[tuple, int] = {}
    verts = []
    tris = []

    def vid(corner):
        if corner not in vert_ids:
            vert_ids[corner] = len(verts)
            verts.append(corner)
        return vert_ids[corner]

    for vx, vy, vz in sorted(voxels):
        for axis, direction, corners in _FACES:
            neighbor = [vx, vy, vz]
            neighbor[axis] += direction
            if tuple(neighbor) in voxels:
                continue  # interior face
            ids = [vid((vx + dx, vy + dy, vz + dz)) for dx, dy, dz in corners]
            tris.append([ids[0], ids[1], ids[2]])
            tris.append([ids[0], ids[2], ids[3]])

    vertices = np.asarray(verts, dtype=float) * resolution
    mesh = TriangleMesh(vertices, np.asarray(tris))
    colors = np.tile(np.asarray(rgb, dtype=np.uint8), (len(verts), 1))
    return mesh, colors


# ---------------------------------------------------------------------------
# Report


@dataclass
class ChangeReport:
    positive_clusters: list = field(default_factory=list)
    negative_clusters: list = field(default_factory=list)
    unaltered_points: PointCloud | None = None

    def summary(self):
        def describe(clusters):
            return [
                {
                    "size": len(c),
                    "centroid": [round(float(v), 6) for v in c.xyz.mean(axis=0)],
                }
                for c in clusters
            ]

        return {
            "n_positive_clusters": len(self.positive_clusters),
            "n_negative_clusters": len(self.negative_clusters),
            "positive": describe(self.positive_clusters),
            "negative": describe(self.negative_clusters),
            "n_unaltered_points": 0 if self.unaltered_points is None else len(self.unaltered_points),
        }


def detect_changes(scans_with_poses, reference_cloud, params: ChangeParams) -> ChangeReport:
    """Full step: integrate scans, fuse, split PD/UE, find NDs, cluster both."""
    grid = OccupancyVoxelGrid(
        resolution=params.voxel_resolution,
        hit_log_odds=params.hit_log_odds,
        miss_log_odds=params.miss_log_odds,
        clamp=(params.clamp_min, params.clamp_max),
        occupied_threshold=params.occupied_threshold,
        free_threshold=params.free_threshold,
    )
    for scan, pose in scans_with_poses:
        grid.integrate_scan(scan, pose)
    fused = grid.fused_cloud()
    ref_index = NnIndex(reference_cloud)
    pd_points, ue_points = detect_positive(fused, ref_index, params.distance_threshold)
    nd_points = detect_negative(grid, reference_cloud, params.distance_threshold)
    positive = cluster_and_filter(
        pd_points, params.cluster_eps, params.cluster_min_points, params.outlier_k, params.outlier_std
    )
    negative = cluster_and_filter(
        nd_points, params.cluster_eps, params.cluster_min_points, params.outlier_k, params.outlier_std
    )
    return ChangeReport(
        positive_clusters=positive, negative_clusters=negative, unaltered_points=ue_points
    )
