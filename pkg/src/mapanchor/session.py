"""Session model: pose-graph + keyframe scans, with g2o/TUM I/O and APE evaluation.

A session directory on disk is a flat folder with one PLY scan per keyframe
named by its timestamp (``<t:.6f>.ply``), a ``poses.tum`` file, and an
optional ``descriptors/`` subfolder of CSV matrices.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import ply
from .errors import (
    EmptyDirectory,
    MissingScan,
    NoAssociations,
    ParseError,
    TimestampMismatch,
)
from .geometry import PointCloud, Pose3, compose, relative, umeyama_align

# Matches the poses-file timestamp precision (%.6f).
_TIME_MATCH_TOL = 5e-7


@dataclass
class Keyframe:
    index: int
    timestamp: float
    odom_pose: Pose3
    scan: PointCloud | None = None
    descriptor: "object | None" = None  # IscDescriptor once computed


@dataclass
class PoseEdge:
    """Relative-pose constraint i -> j with a 6x6 covariance.

    ``relative`` follows the between convention: pose_j == pose_i (+) relative
    at consistency. ``information`` caches the exact matrix parsed from g2o so
    a read/write cycle is byte-identical.
    """

    i: int
    j: int
    relative: Pose3
    covariance: np.ndarray
    information: np.ndarray | None = None

    def info_matrix(self):
        if self.information is not None:
            return self.information
        return np.linalg.inv(self.covariance)


DEFAULT_ODOMETRY_COVARIANCE = np.diag([1e-4] * 6)


@dataclass
class Session:
    keyframes: list[Keyframe]
    odometry_edges: list[PoseEdge] = field(default_factory=list)
    loop_edges: list[PoseEdge] = field(default_factory=list)
    frame_label: str = "session"

    def __post_init__(self):
        n = len(self.keyframes)
        for k, kf in enumerate(self.keyframes):
            if kf.index != k:
                raise ValueError(f"keyframe indices must be contiguous from 0, got {kf.index} at {k}")
        for a, b in zip(self.keyframes, self.keyframes[1:]):
            if b.timestamp < a.timestamp:
                raise ValueError("keyframe timestamps must be non-decreasing")
        for e in self.odometry_edges + self.loop_edges:
            if not (0 <= e.i < n and 0 <= e.j < n):
                raise ValueError(f"edge ({e.i},{e.j}) references a missing keyframe")
        for e in self.odometry_edges:
            expect = relative(self.keyframes[e.j].odom_pose, self.keyframes[e.i].odom_pose)
            if np.max(np.abs(expect.matrix() - e.relative.matrix())) > 1e-9:
                raise ValueError(f"odometry edge ({e.i},{e.j}) inconsistent with keyframe poses")

    def __len__(self):
        return len(self.keyframes)

    @staticmethod
    def from_keyframes(keyframes, frame_label="session", odometry_covariance=None):
        """Build a session, synthesizing odometry edges between consecutive keyframes."""
        cov = DEFAULT_ODOMETRY_COVARIANCE if odometry_covariance is None else odometry_covariance
        edges = [
            PoseEdge(
                i,
                i + 1,
                relative(keyframes[i + 1].odom_pose, keyframes[i].odom_pose),
                np.array(cov, dtype=float),
            )
            for i in range(len(keyframes) - 1)
        ]
        return Session(list(keyframes), edges, [], frame_label)

    def poses(self):
        return [kf.odom_pose for kf in self.keyframes]

    def positions(self):
        return np.array([kf.odom_pose.t for kf in self.keyframes]).reshape(-1, 3)

    def trajectory(self) -> "Trajectory":
        return Trajectory([(kf.timestamp, kf.odom_pose) for kf in self.keyframes])


@dataclass
class Trajectory:
    """Timestamped pose sequence; timestamps strictly increasing."""

    items: list[tuple[float, Pose3]]

    def __post_init__(self):
        for (ta, _), (tb, _) in zip(self.items, self.items[1:]):
            if tb <= ta:
                raise ValueError("trajectory timestamps must be strictly increasing")

    def __len__(self):
        return len(self.items)

    def timestamps(self):
        return np.array([t for t, _ in self.items])

    def positions(self):
        return np.array([p.t for _, p in self.items]).reshape(-1, 3)


# ---------------------------------------------------------------------------
# TUM trajectory files


def _format_float(v: float) -> str:
    # shortest representation that parses back to the same double
    return repr(float(v))


def write_tum(trajectory: Trajectory, path):
    with open(path, "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, pose in trajectory.items:
            vals = [*pose.t, *pose.q]
            fh.write(f"{t:.6f} " + " ".join(_format_float(v) for v in vals) + "\n")


def read_tum(path) -> Trajectory:
    items = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ParseError(f"expected 8 fields, got {len(parts)}", line=lineno)
            try:
                t, tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts)
            except ValueError as e:
                raise ParseError(f"bad float: {e}", line=lineno) from e
            items.append((t, Pose3.from_xyz_quat(tx, ty, tz, qx, qy, qz, qw)))
    return Trajectory(items)


# ---------------------------------------------------------------------------
# g2o graph files

_TRIU = np.triu_indices(6)


def _edge_line(tag, i, j, pose: Pose3, info):
    vals = [*pose.t, *pose.q]
    upper = np.asarray(info)[_TRIU]
    return (
        f"{tag} {i} {j} "
        + " ".join(_format_float(v) for v in vals)
        + " "
        + " ".join(_format_float(v) for v in upper)
    )


def write_g2o(session: Session, path):
    """VERTEX_SE3:QUAT / EDGE_SE3:QUAT records; information upper-triangular."""
    with open(path, "w") as fh:
        for kf in session.keyframes:
            p = kf.odom_pose
            vals = " ".join(_format_float(v) for v in [*p.t, *p.q])
            fh.write(f"VERTEX_SE3:QUAT {kf.index} {vals}\n")
        for e in session.odometry_edges + session.loop_edges:
            fh.write(_edge_line("EDGE_SE3:QUAT", e.i, e.j, e.relative, e.info_matrix()) + "\n")


def read_g2o(path) -> Session:
    """Read the graph part of a session (keyframes carry poses only, no scans)."""
    vertices: dict[int, Pose3] = {}
    edges = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            try:
                if tag == "VERTEX_SE3:QUAT":
                    if len(parts) != 9:
                        raise ParseError("VERTEX_SE3:QUAT needs 8 values", line=lineno)
                    vid = int(parts[1])
                    tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts[2:9])
                    vertices[vid] = Pose3.from_xyz_quat(tx, ty, tz, qx, qy, qz, qw)
                elif tag == "EDGE_SE3:QUAT":
                    if len(parts) != 31:
                        raise ParseError("EDGE_SE3:QUAT needs 30 values", line=lineno)
                    i, j = int(parts[1]), int(parts[2])
                    tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts[3:10])
                    upper = np.array([float(p) for p in parts[10:31]])
                    info = np.zeros((6, 6))
                    info[_TRIU] = upper
                    info = info + np.triu(info, 1).T
                    edges.append(
                        (i, j, Pose3.from_xyz_quat(tx, ty, tz, qx, qy, qz, qw), info)
                    )
                # unknown record types are skipped
            except ParseError:
                raise
            except (ValueError, IndexError) as e:
                raise ParseError(f"malformed g2o record: {e}", line=lineno) from e

    order = sorted(vertices)
    if order and order != list(range(len(order))):
        raise ParseError("vertex ids must be contiguous from 0")
    keyframes = [
        Keyframe(index=i, timestamp=float(i), odom_pose=vertices[i]) for i in order
    ]
    odo, loops = [], []
    for i, j, rel, info in edges:
        edge = PoseEdge(i, j, rel, np.linalg.inv(info), information=info)
        is_consistent = (
            j == i + 1
            and np.max(
                np.abs(
                    relative(keyframes[j].odom_pose, keyframes[i].odom_pose).matrix()
                    - rel.matrix()
                )
            )
            <= 1e-9
        )
        (odo if is_consistent else loops).append(edge)
    return Session(keyframes, odo, loops, frame_label="g2o")


# ---------------------------------------------------------------------------
# On-disk sessions


def save_session(session: Session, directory, binary_ply=True):
    os.makedirs(directory, exist_ok=True)
    write_tum(session.trajectory(), os.path.join(directory, "poses.tum"))
    for kf in session.keyframes:
        if kf.scan is not None:
            ply.write_cloud(
                os.path.join(directory, f"{kf.timestamp:.6f}.ply"), kf.scan, binary=binary_ply
            )
    if any(kf.descriptor is not None for kf in session.keyframes):
        ddir = os.path.join(directory, "descriptors")
        os.makedirs(ddir, exist_ok=True)
        for kf in session.keyframes:
            if kf.descriptor is not None:
                kf.descriptor.to_csv(os.path.join(ddir, f"{kf.index:06d}.csv"))


def load_keyframes(
    directory,
    min_time_gap: float = 0.0,
    odometry_covariance=None,
    frame_label: str = "query",
) -> Session:
    """Load an on-disk session: per-keyframe PLY scans + poses.tum.

    Raises TimestampMismatch when a scan's timestamp has no pose entry,
    MissingScan when a pose entry has no scan, EmptyDirectory when there are
    no scans at all. ``min_time_gap`` optionally decimates keyframes (first
    kept, then any at least this much later than the last kept one).
    """
    if not os.path.isdir(directory):
        raise EmptyDirectory(f"no such directory: {directory}")
    scan_files = sorted(f for f in os.listdir(directory) if f.endswith(".ply"))
    if not scan_files:
        raise EmptyDirectory(f"no PLY scans in {directory}")
    poses_path = os.path.join(directory, "poses.tum")
    if not os.path.isfile(poses_path):
        raise ParseError(f"poses file not found: {poses_path}")
    traj = read_tum(poses_path)

    scan_times = []
    for f in scan_files:
        try:
            scan_times.append(float(f[: -len(".ply")]))
        except ValueError as e:
            raise ParseError(f"scan filename is not a timestamp: {f}") from e

    pose_times = traj.timestamps()
    used_pose = np.zeros(len(pose_times), dtype=bool)
    matched = []
    for f, ts in zip(scan_files, scan_times):
        diffs = np.abs(pose_times - ts)
        k = int(np.argmin(diffs)) if len(diffs) else -1
        if k < 0 or diffs[k] > _TIME_MATCH_TOL or used_pose[k]:
            raise TimestampMismatch(f"scan {f} has no pose entry in poses.tum")
        used_pose[k] = True
        matched.append((pose_times[k], traj.items[k][1], f))
    if not used_pose.all():
        missing = pose_times[~used_pose]
        raise MissingScan(f"poses without scan files at t={missing[:5]}")

    matched.sort(key=lambda m: m[0])
    kept = []
    last_t = None
    for ts, pose, fname in matched:
        if last_t is not None and min_time_gap > 0 and ts - last_t < min_time_gap:
            continue
        kept.append((ts, pose, fname))
        last_t = ts

    keyframes = []
    for k, (ts, pose, fname) in enumerate(kept):
        scan = ply.read_cloud(os.path.join(directory, fname))
        keyframes.append(Keyframe(index=k, timestamp=ts, odom_pose=pose, scan=scan))
    session = Session.from_keyframes(
        keyframes, frame_label=frame_label, odometry_covariance=odometry_covariance
    )
    ddir = os.path.join(directory, "descriptors")
    if os.path.isdir(ddir):
        from .descriptor import IscDescriptor

        for kf in session.keyframes:
            p = os.path.join(ddir, f"{kf.index:06d}.csv")
            if os.path.isfile(p):
                kf.descriptor = IscDescriptor.from_csv(p)
    return session


# ---------------------------------------------------------------------------
# Trajectory evaluation


@dataclass
class ApeReport:
    """Absolute pose error summary. Translations in centimeters, rotations in degrees."""

    translational_rmse: float
    rotational_rmse: float
    trans_errors: np.ndarray
    rot_errors: np.ndarray
    n_pairs: int
    alignment: Pose3

    @property
    def trans_max(self):
        return float(self.trans_errors.max())

    @property
    def trans_mean(self):
        return float(self.trans_errors.mean())

    @property
    def trans_median(self):
        return float(np.median(self.trans_errors))

    @property
    def rot_max(self):
        return float(self.rot_errors.max())

    @property
    def rot_mean(self):
        return float(self.rot_errors.mean())

    @property
    def rot_median(self):
        return float(np.median(self.rot_errors))

    def to_dict(self):
        return {
            "n_pairs": self.n_pairs,
            "translational_rmse_cm": self.translational_rmse,
            "translational_mean_cm": self.trans_mean,
            "translational_median_cm": self.trans_median,
            "translational_max_cm": self.trans_max,
            "rotational_rmse_deg": self.rotational_rmse,
            "rotational_mean_deg": self.rot_mean,
            "rotational_median_deg": self.rot_median,
            "rotational_max_deg": self.rot_max,
        }


def associate(times_a, times_b, tolerance):
    """Greedy symmetric nearest-timestamp association; each entry used once."""
    times_a = np.asarray(times_a)
    times_b = np.asarray(times_b)
    pairs = []
    for i, ta in enumerate(times_a):
        for j, tb in enumerate(times_b):
            dt = abs(ta - tb)
            if dt <= tolerance:
                pairs.append((dt, min(i, j), max(i, j), i, j))
    pairs.sort()
    used_a = set()
    used_b = set()
    out = []
    for _, _, _, i, j in pairs:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        out.append((i, j))
    out.sort()
    return out


def evaluate_ape(
    estimate: Trajectory,
    ground_truth: Trajectory,
    align: bool = False,
    tolerance: float = 0.01,
) -> ApeReport:
    """Associate by timestamp, optionally Umeyama-align, and compute APE."""
    pairs = associate(estimate.timestamps(), ground_truth.timestamps(), tolerance)
    if len(pairs) < 2:
        raise NoAssociations(
            f"only {len(pairs)} timestamp pairs within {tolerance}s; need >= 2"
        )
    est = [estimate.items[i][1] for i, _ in pairs]
    gt = [ground_truth.items[j][1] for _, j in pairs]

    alignment = Pose3.identity()
    if align:
        src = np.array([p.t for p in est])
        tgt = np.array([p.t for p in gt])
        alignment, _ = umeyama_align(src, tgt, with_scale=False)
        est = [compose(alignment, p) for p in est]

    trans = np.empty(len(pairs))
    rot = np.empty(len(pairs))
    for k, (pe, pg) in enumerate(zip(est, gt)):
        err = relative(pe, pg)
        trans[k] = np.linalg.norm(err.t)
        rot[k] = err.rotation_angle()

    trans_cm = trans * 100.0
    rot_deg = np.degrees(rot)
    return ApeReport(
        translational_rmse=float(np.sqrt(np.mean(trans_cm**2))),
        rotational_rmse=float(np.sqrt(np.mean(rot_deg**2))),
        trans_errors=trans_cm,
        rot_errors=rot_deg,
        n_pairs=len(pairs),
        alignment=alignment,
    )
