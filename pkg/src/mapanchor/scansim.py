"""Spinning-LiDAR simulation against a triangle mesh.

The mesh carries a Morton-ordered BVH built vectorized at load time;
traversal runs in a numba kernel so large meshes stay interactive. Scans are
produced in sensor-local coordinates with seeded Gaussian range noise.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import ply
from ._kernels import cast_rays_kernel
from .errors import EmptyMesh, ParseError
from .geometry import PointCloud, Pose3
from .ogm import ScanLocationList
from .session import Keyframe, Session

_LEAF_SIZE = 4


def _expand_bits(v):
    # spread 10 bits over 30 (classic Morton trick), vectorized over uint32
    v = (v | (v << 16)) & np.uint32(0x030000FF)
    v = (v | (v << 8)) & np.uint32(0x0300F00F)
    v = (v | (v << 4)) & np.uint32(0x030C30C3)
    v = (v | (v << 2)) & np.uint32(0x09249249)
    return v


def _morton3(x, y, z):
    return (
        _expand_bits(x).astype(np.uint64) << np.uint64(2)
        | _expand_bits(y).astype(np.uint64) << np.uint64(1)
        | _expand_bits(z).astype(np.uint64)
    )


class _Bvh:
    """Flat-array BVH: leaves over Morton-sorted triangles, paired bottom-up."""

    def __init__(self, vertices, triangles):
        tri_pts = vertices[triangles]  # (T, 3, 3)
        tmin = tri_pts.min(axis=1)
        tmax = tri_pts.max(axis=1)
        centroid = 0.5 * (tmin + tmax)
        lo = centroid.min(axis=0)
        ext = np.maximum(centroid.max(axis=0) - lo, 1e-12)
        q = np.clip(((centroid - lo) / ext) * 1023.0, 0, 1023).astype(np.uint32)
        order = np.argsort(_morton3(q[:, 0], q[:, 1], q[:, 2]), kind="stable")
        self.tri_order = order.astype(np.int64)

        n_tri = triangles.shape[0]
        n_leaves = (n_tri + _LEAF_SIZE - 1) // _LEAF_SIZE
        starts = np.arange(n_leaves) * _LEAF_SIZE
        counts = np.minimum(_LEAF_SIZE, n_tri - starts)

        # leaf bounds via reduceat over sorted triangle bounds
        smin = tmin[order]
        smax = tmax[order]
        mins = [np.minimum.reduceat(smin, starts, axis=0)]
        maxs = [np.maximum.reduceat(smax, starts, axis=0)]
        lefts = [np.full(n_leaves, -1, dtype=np.int64)]
        rights = [np.full(n_leaves, -1, dtype=np.int64)]
        node_starts = [starts.astype(np.int64)]
        node_counts = [counts.astype(np.int64)]

        level_ids = [np.arange(n_leaves, dtype=np.int64)]
        total = n_leaves
        while level_ids[-1].size > 1:
            prev = level_ids[-1]
            m = prev.size
            n_up = (m + 1) // 2
            left = prev[0::2]
            right = np.full(n_up, -1, dtype=np.int64)
            right[: m // 2] = prev[1::2]
            prev_min = mins[-1]
            prev_max = maxs[-1]
            up_min = prev_min[0::2].copy()
            up_max = prev_max[0::2].copy()
            up_min[: m // 2] = np.minimum(up_min[: m // 2], prev_min[1::2])
            up_max[: m // 2] = np.maximum(up_max[: m // 2], prev_max[1::2])
            mins.append(up_min)
            maxs.append(up_max)
            lefts.append(left)
            rights.append(right)
            node_starts.append(np.zeros(n_up, dtype=np.int64))
            node_counts.append(np.zeros(n_up, dtype=np.int64))
            level_ids.append(np.arange(total, total + n_up, dtype=np.int64))
            total += n_up

        self.node_min = np.ascontiguousarray(np.concatenate(mins))
        self.node_max = np.ascontiguousarray(np.concatenate(maxs))
        self.node_left = np.concatenate(lefts)
        self.node_right = np.concatenate(rights)
        self.node_start = np.concatenate(node_starts)
        self.node_count = np.concatenate(node_counts)
        self.root = total - 1

        sorted_tris = triangles[order]
        self.tri_v0 = np.ascontiguousarray(vertices[sorted_tris[:, 0]])
        self.tri_e1 = np.ascontiguousarray(vertices[sorted_tris[:, 1]] - self.tri_v0)
        self.tri_e2 = np.ascontiguousarray(vertices[sorted_tris[:, 2]] - self.tri_v0)
        # kernel indexes tri arrays through tri_order positions
        self.kernel_order = np.arange(n_tri, dtype=np.int64)


class TriangleMesh:
    """Triangle mesh with a lazily built BVH for ray queries."""

    def __init__(self, vertices, triangles):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.shape[0] == 0:
            raise EmptyMesh("mesh has no triangles")
        if not np.all(np.isfinite(self.vertices)):
            raise ParseError("mesh has non-finite vertices")
        if self.triangles.min() < 0 or self.triangles.max() >= self.vertices.shape[0]:
            raise ParseError("triangle index out of range")
        self._bvh = None

    def __len__(self):
        return self.triangles.shape[0]

    @property
    def bvh(self):
        if self._bvh is None:
            self._bvh = _Bvh(self.vertices, self.triangles)
        return self._bvh

    def cast_rays(self, origins, dirs, max_range=np.inf):
        """First-hit range per ray (inf when nothing is hit within max_range)."""
        origins = np.ascontiguousarray(np.asarray(origins, dtype=np.float64).reshape(-1, 3))
        dirs = np.ascontiguousarray(np.asarray(dirs, dtype=np.float64).reshape(-1, 3))
        b = self.bvh
        out = np.empty(origins.shape[0], dtype=np.float64)
        cast_rays_kernel(
            origins,
            dirs,
            float(max_range),
            b.node_min,
            b.node_max,
            b.node_left,
            b.node_right,
            b.node_start,
            b.node_count,
            b.root,
            b.kernel_order,
            b.tri_v0,
            b.tri_e1,
            b.tri_e2,
            out,
        )
        return out

    def transformed(self, pose: Pose3) -> "TriangleMesh":
        return TriangleMesh(pose.apply(self.vertices), self.triangles.copy())

    def areas(self):
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(
            np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1
        )

    def sample_points(self, spacing: float, seed: int = 0) -> PointCloud:
        """Uniform surface samples at roughly one point per spacing^2 of area."""
        areas = self.areas()
        counts = np.maximum(1, np.round(areas / spacing**2)).astype(int)
        rng = np.random.default_rng(seed)
        v = self.vertices[self.triangles]
        chunks = []
        for tri_idx in range(len(self)):
            n = counts[tri_idx]
            r1 = np.sqrt(rng.random(n))
            r2 = rng.random(n)
            a, b, c = v[tri_idx]
            pts = (
                (1 - r1)[:, None] * a
                + (r1 * (1 - r2))[:, None] * b
                + (r1 * r2)[:, None] * c
            )
            chunks.append(pts)
        return PointCloud(np.vstack(chunks))


# ---------------------------------------------------------------------------
# Mesh file I/O


def load_mesh(path) -> TriangleMesh:
    """Load an STL (binary or ascii) or PLY mesh."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".stl":
        return _load_stl(path)
    if ext == ".ply":
        data = ply.read_ply(path)
        if data.faces is None:
            raise EmptyMesh(f"{path} has no faces")
        return TriangleMesh(data.vertices, data.faces)
    raise ParseError(f"unsupported mesh format: {path}")


def _load_stl(path) -> TriangleMesh:
    with open(path, "rb") as fh:
        head = fh.read(80)
        if head[:5] == b"solid" and b"facet" in (head + fh.read(200)):
            return _load_stl_ascii(path)
        fh.seek(80)
        raw = fh.read(4)
        if len(raw) < 4:
            raise ParseError(f"truncated STL header in {path}")
        (count,) = struct.unpack("<I", raw)
        if count == 0:
            raise EmptyMesh(f"{path} contains zero triangles")
        body = fh.read(count * 50)
        if len(body) != count * 50:
            raise ParseError(f"truncated STL body in {path}")
    rec = np.frombuffer(body, dtype=np.dtype([("n", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")]))
    vertices = rec["v"].reshape(-1, 3).astype(np.float64)
    triangles = np.arange(vertices.shape[0], dtype=np.int64).reshape(-1, 3)
    return TriangleMesh(vertices, triangles)


def _load_stl_ascii(path) -> TriangleMesh:
    verts = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if parts[:1] == ["vertex"]:
                if len(parts) != 4:
                    raise ParseError("bad vertex record", line=lineno)
                verts.append([float(p) for p in parts[1:4]])
    if not verts:
        raise EmptyMesh(f"{path} contains zero triangles")
    vertices = np.asarray(verts, dtype=np.float64)
    if vertices.shape[0] % 3 != 0:
        raise ParseError(f"ascii STL vertex count not a multiple of 3 in {path}")
    triangles = np.arange(vertices.shape[0], dtype=np.int64).reshape(-1, 3)
    return TriangleMesh(vertices, triangles)


def write_stl(mesh: TriangleMesh, path):
    """Binary STL writer (fixture/tooling support)."""
    tri = mesh.vertices[mesh.triangles].astype(np.float32)
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norms = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.where(norms > 0, n / np.maximum(norms, 1e-30), 0.0).astype(np.float32)
    rec = np.zeros(
        tri.shape[0], dtype=np.dtype([("n", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])
    )
    rec["n"] = n
    rec["v"] = tri
    with open(path, "wb") as fh:
        fh.write(b"\0" * 80)
        fh.write(struct.pack("<I", tri.shape[0]))
        fh.write(rec.tobytes())


# ---------------------------------------------------------------------------
# LiDAR model and scan simulation


@dataclass
class LidarModel:
    """Spinning-LiDAR ray pattern and range-noise parameters."""

    azimuth_resolution: float = 0.1728  # degrees per step
    vertical_fov: tuple[float, float] = (-45.0, 45.0)  # degrees
    vertical_channels: int = 32
    max_range: float = 15.0
    range_noise_sigma: float = 0.03
    noise_seed: int = 0

    def __post_init__(self):
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if self.azimuth_resolution <= 0:
            raise ValueError("azimuth_resolution must be positive")
        if not self.vertical_fov[0] < self.vertical_fov[1] and self.vertical_channels > 1:
            raise ValueError("vertical_fov must satisfy min < max")

    @property
    def rays_per_revolution(self):
        return int(round(360.0 / self.azimuth_resolution))

    def ray_directions(self):
        """Unit directions in the sensor frame, azimuth-major ordering.

        Returns (dirs (N,3), ring_ids (N,)).
        """
        n_az = self.rays_per_revolution
        az = np.arange(n_az) * (2 * np.pi / n_az)
        if self.vertical_channels == 1:
            elev = np.array([np.radians(self.vertical_fov[0])])
        else:
            elev = np.radians(
                np.linspace(self.vertical_fov[0], self.vertical_fov[1], self.vertical_channels)
            )
        A, E = np.meshgrid(az, elev, indexing="ij")
        dirs = np.stack(
            [np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1
        ).reshape(-1, 3)
        rings = np.tile(np.arange(self.vertical_channels), n_az)
        return dirs, rings


def simulate_scan(mesh: TriangleMesh, sensor_pose: Pose3, model: LidarModel) -> PointCloud:
    """Cast the model's ray grid from sensor_pose; returns sensor-local points.

    Ranges are perturbed with seeded Gaussian noise; rays that miss (or hit
    beyond max_range) produce no point.
    """
    dirs_local, rings = model.ray_directions()
    R = sensor_pose.rotation()
    dirs_world = dirs_local @ R.T
    origins = np.broadcast_to(sensor_pose.t, dirs_world.shape)
    ranges = mesh.cast_rays(origins, dirs_world, model.max_range)
    hit = np.isfinite(ranges)
    r = ranges[hit]
    if model.range_noise_sigma > 0:
        rng = np.random.default_rng(model.noise_seed)
        r = r + rng.normal(0.0, model.range_noise_sigma, size=r.shape)
    pts = dirs_local[hit] * r[:, None]
    return PointCloud(pts, channel=rings[hit].astype(float))


def build_reference_session(
    mesh: TriangleMesh,
    locations: ScanLocationList,
    model: LidarModel,
    descriptor_params=None,
    odometry_covariance=None,
) -> Session:
    """One keyframe per scan location: identity heading, translation-only poses.

    Per-scan noise streams derive from model.noise_seed XOR the keyframe
    index, so simulation order cannot matter.
    """
    if len(locations) < 1:
        raise ValueError("need at least one scan location")
    keyframes = []
    for i, xyz in enumerate(locations.poses_xyz()):
        pose = Pose3.from_rt(np.eye(3), xyz)
        scan = simulate_scan(mesh, pose, replace(model, noise_seed=model.noise_seed ^ i))
        keyframes.append(Keyframe(index=i, timestamp=float(i), odom_pose=pose, scan=scan))
    session = Session.from_keyframes(
        keyframes, frame_label="reference", odometry_covariance=odometry_covariance
    )
    if descriptor_params is not None:
        from .descriptor import make_descriptor

        for kf in session.keyframes:
            kf.descriptor = make_descriptor(kf.scan, descriptor_params)
    return session
