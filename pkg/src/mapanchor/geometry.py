"""SE(3) pose algebra, point-cloud container, exact NN index, Umeyama alignment.

Conventions used throughout the package:

- Pose3 stores a unit quaternion (x, y, z, w) plus a translation; the
  quaternion is re-normalized after every composition so long chains do
  not drift off the manifold.
- Twists are 6-vectors ordered [rho, phi]: translational part first,
  rotational part last.
- relative(a, b) is the "difference" operator: inverse(b) o a, i.e. the
  transform of frame a expressed in frame b, so compose(b, relative(a, b)) == a.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import AngleNearPi, DegenerateConfiguration, EmptyIndex

_LOG_ANGLE_LIMIT = np.pi - 1e-6


def _hat(v):
    """Skew-symmetric matrix of a 3-vector."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def _quat_multiply(a, b):
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def _quat_to_matrix(q):
    x, y, z, w = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array(
        [
            [1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy)],
            [2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx)],
            [2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy)],
        ]
    )


def _matrix_to_quat(R):
    # Shepperd's method: pick the largest diagonal combination for stability.
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    q = np.array([x, y, z, w])
    return q / np.linalg.norm(q)


class Pose3:
    """Rigid transform in SE(3): unit quaternion (x, y, z, w) + translation."""

    __slots__ = ("q", "t")

    def __init__(self, q, t):
        q = np.asarray(q, dtype=float)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("quaternion must be finite and nonzero")
        self.q = q / n
        self.t = np.asarray(t, dtype=float).reshape(3).copy()

    @staticmethod
    def identity():
        return Pose3([0.0, 0.0, 0.0, 1.0], np.zeros(3))

    @staticmethod
    def from_rt(R, t):
        return Pose3(_matrix_to_quat(np.asarray(R, dtype=float)), t)

    @staticmethod
    def from_matrix(T):
        T = np.asarray(T, dtype=float)
        return Pose3.from_rt(T[:3, :3], T[:3, 3])

    @staticmethod
    def from_xyz_quat(tx, ty, tz, qx, qy, qz, qw):
        return Pose3([qx, qy, qz, qw], [tx, ty, tz])

    def rotation(self):
        """3x3 rotation matrix."""
        return _quat_to_matrix(self.q)

    def matrix(self):
        """4x4 homogeneous matrix."""
        T = np.eye(4)
        T[:3, :3] = self.rotation()
        T[:3, 3] = self.t
        return T

    def inverse(self):
        q_inv = np.array([-self.q[0], -self.q[1], -self.q[2], self.q[3]])
        R_inv = _quat_to_matrix(q_inv)
        return Pose3(q_inv, -(R_inv @ self.t))

    def compose(self, other: "Pose3") -> "Pose3":
        q = _quat_multiply(self.q, other.q)
        t = self.rotation() @ other.t + self.t
        return Pose3(q, t)  # constructor re-normalizes q

    def apply(self, points):
        """Transform an (N, 3) array (or single 3-vector) of points."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            return self.rotation() @ pts + self.t
        return pts @ self.rotation().T + self.t

    def rotation_angle(self):
        """Rotation angle in [0, pi]."""
        v = np.linalg.norm(self.q[:3])
        return 2.0 * np.arctan2(v, abs(self.q[3]))

    def __repr__(self):
        return f"Pose3(q={np.round(self.q, 6)}, t={np.round(self.t, 6)})"


def compose(a: Pose3, b: Pose3) -> Pose3:
    """Pose composition a (+) b (homogeneous matrix product)."""
    return a.compose(b)


def relative(a: Pose3, b: Pose3) -> Pose3:
    """Difference a (-) b = inverse(b) (+) a: frame a expressed in frame b."""
    return b.inverse().compose(a)


def so3_exp(phi):
    """Rotation matrix from a rotation vector."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = _hat(phi)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * (K @ K)
    return (
        np.eye(3)
        + (np.sin(theta) / theta) * K
        + ((1.0 - np.cos(theta)) / theta**2) * (K @ K)
    )


def _quat_to_rotvec(q):
    v = q[:3]
    w = q[3]
    if w < 0:  # take the short representative
        v, w = -v, -w
    n = np.linalg.norm(v)
    angle = 2.0 * np.arctan2(n, w)
    if n < 1e-12:
        return 2.0 * v  # first-order: q ~ [phi/2, 1]
    return (angle / n) * v


def so3_log(R):
    """Rotation vector from a rotation matrix."""
    return _quat_to_rotvec(_matrix_to_quat(np.asarray(R, dtype=float)))


def _so3_left_jacobian(phi):
    theta = np.linalg.norm(phi)
    K = _hat(phi)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    return (
        np.eye(3)
        + ((1.0 - np.cos(theta)) / theta**2) * K
        + ((theta - np.sin(theta)) / theta**3) * (K @ K)
    )


def _so3_left_jacobian_inv(phi):
    theta = np.linalg.norm(phi)
    K = _hat(phi)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    cot_term = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * K + cot_term * (K @ K)


def exp_se3(twist) -> Pose3:
    """SE(3) exponential of a twist [rho, phi]."""
    twist = np.asarray(twist, dtype=float).reshape(6)
    rho, phi = twist[:3], twist[3:]
    R = so3_exp(phi)
    t = _so3_left_jacobian(phi) @ rho
    return Pose3.from_rt(R, t)


def log_se3(T: Pose3):
    """SE(3) logarithm as a twist [rho, phi]; rejects rotations near pi."""
    phi = _quat_to_rotvec(T.q)
    if np.linalg.norm(phi) > _LOG_ANGLE_LIMIT:
        raise AngleNearPi(
            f"rotation angle {np.linalg.norm(phi):.6f} rad too close to pi for log"
        )
    rho = _so3_left_jacobian_inv(phi) @ T.t
    return np.concatenate([rho, phi])


def se3_adjoint(T: Pose3):
    """6x6 adjoint acting on [rho, phi] twists."""
    R = T.rotation()
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = R
    Ad[:3, 3:] = _hat(T.t) @ R
    Ad[3:, 3:] = R
    return Ad


def _se3_Q_left(rho, phi):
    # Barfoot, "State Estimation for Robotics", eq. 7.86 (left Jacobian Q block).
    theta = np.linalg.norm(phi)
    rx = _hat(rho)
    px = _hat(phi)
    px2 = px @ px
    if theta < 1e-4:
        c1 = 1.0 / 6.0 - theta**2 / 120.0
        c2 = 1.0 / 24.0 - theta**2 / 720.0
        c3 = -1.0 / 120.0 + theta**2 / 5040.0
    else:
        c1 = (theta - np.sin(theta)) / theta**3
        c2 = (1.0 - theta**2 / 2.0 - np.cos(theta)) / theta**4
        c3 = (theta - np.sin(theta) - theta**3 / 6.0) / theta**5
    m1 = px @ rx + rx @ px + px @ rx @ px
    m2 = px2 @ rx + rx @ px2 - 3.0 * (px @ rx @ px)
    m3 = px @ rx @ px2 + px2 @ rx @ px
    return 0.5 * rx + c1 * m1 - c2 * m2 - 0.5 * (c2 - 3.0 * c3) * m3


def se3_left_jacobian_inv(twist):
    twist = np.asarray(twist, dtype=float).reshape(6)
    rho, phi = twist[:3], twist[3:]
    Jinv = _so3_left_jacobian_inv(phi)
    Q = _se3_Q_left(rho, phi)
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[3:, 3:] = Jinv
    out[:3, 3:] = -Jinv @ Q @ Jinv
    return out


def se3_right_jacobian_inv(twist):
    """Inverse right Jacobian: d/d(delta) log(exp(xi) exp(delta)) at delta=0."""
    return se3_left_jacobian_inv(-np.asarray(twist, dtype=float))


def umeyama_align(source, target, with_scale: bool = False):
    """Closed-form least-squares rigid (optionally similarity) alignment.

    Returns (Pose3, scale) minimizing sum ||s*R*src_i + t - tgt_i||^2. The
    rotation is sign-corrected so det(R) = +1 even for reflection-inducing
    configurations.
    """
    src = np.asarray(source, dtype=float).reshape(-1, 3)
    tgt = np.asarray(target, dtype=float).reshape(-1, 3)
    if src.shape != tgt.shape or src.shape[0] < 3:
        raise DegenerateConfiguration(
            f"need >=3 correspondences of equal length, got {src.shape[0]}/{tgt.shape[0]}"
        )
    mu_s = src.mean(axis=0)
    mu_t = tgt.mean(axis=0)
    ds = src - mu_s
    dt = tgt - mu_t
    var_s = (ds**2).sum() / src.shape[0]
    cov = dt.T @ ds / src.shape[0]
    U, D, Vt = np.linalg.svd(cov)
    # rank < 2 means coincident or collinear points: rotation not determined
    if var_s < 1e-18 or D[1] < max(1e-12, 1e-9 * D[0]):
        raise DegenerateConfiguration("correspondences are collinear or coincident")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    scale = float(np.trace(np.diag(D) @ S) / var_s) if with_scale else 1.0
    t = mu_t - scale * (R @ mu_s)
    return Pose3.from_rt(R, t), scale


@dataclass
class PointCloud:
    """Ordered 3D points with an optional per-point scalar channel."""

    xyz: np.ndarray
    channel: np.ndarray | None = None

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("point cloud contains non-finite coordinates")
        if self.channel is not None:
            self.channel = np.asarray(self.channel, dtype=np.float64).reshape(-1)
            if self.channel.shape[0] != self.xyz.shape[0]:
                raise ValueError("channel length must match point count")

    def __len__(self):
        return self.xyz.shape[0]

    def transformed(self, pose: Pose3) -> "PointCloud":
        return PointCloud(pose.apply(self.xyz), None if self.channel is None else self.channel.copy())


def as_xyz(cloud) -> np.ndarray:
    """Accept a PointCloud or bare (N, 3) array and return the array view."""
    if isinstance(cloud, PointCloud):
        return cloud.xyz
    return np.asarray(cloud, dtype=float).reshape(-1, 3)


class NnIndex:
    """Exact Euclidean nearest-neighbor index over a fixed point set."""

    def __init__(self, points):
        pts = as_xyz(points)
        if pts.shape[0] == 0:
            raise EmptyIndex("cannot build an index over zero points")
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self):
        return self.points.shape[0]

    def knn(self, query, k: int):
        """k nearest points; returns (distances, indices), both (..., k)."""
        if k < 1:
            raise ValueError("k must be >= 1")
        k = min(k, len(self))
        d, i = self._tree.query(np.asarray(query, dtype=float), k=k)
        return np.atleast_1d(d), np.atleast_1d(i)

    def nearest_distances(self, queries):
        """Distance to the single nearest indexed point for each query."""
        d, _ = self._tree.query(np.asarray(queries, dtype=float).reshape(-1, 3), k=1)
        return d

    def radius(self, query, r: float):
        """All indices within radius r, sorted by distance (ties by index)."""
        if r <= 0:
            raise ValueError("radius must be positive")
        idx = self._tree.query_ball_point(np.asarray(query, dtype=float), r)
        idx = np.asarray(sorted(idx), dtype=int)
        if idx.size == 0:
            return idx
        d = np.linalg.norm(self.points[idx] - np.asarray(query, dtype=float), axis=-1)
        order = np.lexsort((idx, d))
        return idx[order]


def voxel_downsample(points, voxel_size: float):
    """Keep the first point (by input order) of every occupied voxel."""
    pts = as_xyz(points)
    if pts.shape[0] == 0 or voxel_size <= 0:
        return pts
    keys = np.floor(pts / voxel_size).astype(np.int64)
    packed = (keys[:, 0] + 2**20) * 2**42 + (keys[:, 1] + 2**20) * 2**21 + (keys[:, 2] + 2**20)
    _, first = np.unique(packed, return_index=True)
    return pts[np.sort(first)]


def nn_build(points) -> NnIndex:
    return NnIndex(points)


def nn_query_knn(index: NnIndex, q, k: int):
    return index.knn(q, k)


def nn_query_radius(index: NnIndex, q, r: float):
    return index.radius(q, r)
