"""Scan registration: 4-DoF plane-to-plane ICP, point-to-point ICP, fitness.

yaw_gicp optimizes translation plus rotation about the source z-axis only,
so its result can never pitch or roll; the target must already be expressed
in (or near) the source's local frame, since the rotation is about the
source origin.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateConfiguration, NoPointsInExclusionZone, TooFewPoints
from .geometry import (
    NnIndex,
    PointCloud,
    Pose3,
    as_xyz,
    compose,
    log_se3,
    umeyama_align,
)


@dataclass
class RegistrationParams:
    max_correspondence_distance: float = 0.5
    max_iterations: int = 30
    convergence_epsilon: float = 1e-6
    covariance_knn: int = 20
    plane_regularization_epsilon: float = 1e-3
    fitness_f1: float = 0.01
    fitness_f2: float = 0.03
    fitness_exclusion: float = 0.30

    def __post_init__(self):
        for name in (
            "max_correspondence_distance",
            "max_iterations",
            "convergence_epsilon",
            "covariance_knn",
            "plane_regularization_epsilon",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class RegistrationResult:
    transform: Pose3
    fitness_f1: float
    fitness_f2: float
    inlier_rmse: float
    converged: bool
    n_within_exclusion: int = 0
    iterations: int = 0
    # (cost_before, cost_after) per iteration at fixed correspondences/weights
    iteration_costs: list = field(default_factory=list)

    @property
    def outside_map(self):
        return self.n_within_exclusion == 0


class AlignmentClass(enum.Enum):
    PERFECT = "perfect"
    GOOD = "good"
    BAD = "bad"
    OUTSIDE_MAP = "outside_map"


def rot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def point_covariances(points, knn: int, plane_epsilon: float):
    """GICP-style regularized covariance per point: eigenvalues (eps, 1, 1)
    with eps on the local normal direction."""
    pts = as_xyz(points)
    if pts.shape[0] < knn:
        raise TooFewPoints(f"{pts.shape[0]} points < covariance_knn={knn}")
    idx = NnIndex(pts)
    _, nn = idx._tree.query(pts, k=knn)
    neigh = pts[nn]  # (N, k, 3)
    mu = neigh.mean(axis=1, keepdims=True)
    d = neigh - mu
    cov = np.einsum("nki,nkj->nij", d, d) / knn
    # eigh returns ascending eigenvalues; smallest is the normal direction
    _, vecs = np.linalg.eigh(cov)
    lam = np.array([plane_epsilon, 1.0, 1.0])
    return np.einsum("nij,j,nkj->nik", vecs, lam, vecs)


def _yaw_jacobian(rotated_src):
    """d(R_z(theta) s + t)/d(tx, ty, tz, theta): (N, 3, 4).

    The theta column is z x (R s); pass the rotated (NOT translated) points.
    """
    n = rotated_src.shape[0]
    J = np.zeros((n, 3, 4))
    J[:, 0, 0] = 1.0
    J[:, 1, 1] = 1.0
    J[:, 2, 2] = 1.0
    J[:, 0, 3] = -rotated_src[:, 1]
    J[:, 1, 3] = rotated_src[:, 0]
    return J


def yaw_gicp(
    source, target, initial_yaw: float, params: RegistrationParams
) -> RegistrationResult:
    """Plane-to-plane ICP over exactly (tx, ty, tz, yaw about source z)."""
    src = as_xyz(source)
    tgt = as_xyz(target)
    if src.shape[0] < params.covariance_knn or tgt.shape[0] < params.covariance_knn:
        raise TooFewPoints(
            f"need >= covariance_knn={params.covariance_knn} points in both clouds"
        )
    cov_s = point_covariances(src, params.covariance_knn, params.plane_regularization_epsilon)
    cov_t = point_covariances(tgt, params.covariance_knn, params.plane_regularization_epsilon)
    tgt_index = NnIndex(tgt)

    theta = float(initial_yaw)
    t = np.zeros(3)
    converged = False
    costs = []
    iterations = 0
    for iterations in range(1, params.max_iterations + 1):
        R = rot_z(theta)
        moved = src @ R.T + t
        d, j = tgt_index._tree.query(moved, k=1)
        mask = d <= params.max_correspondence_distance
        if mask.sum() < 4:
            break
        s_m = src[mask]
        p_m = moved[mask]
        q_m = tgt[j[mask]]
        W = np.linalg.inv(cov_t[j[mask]] + np.einsum("ij,njk,lk->nil", R, cov_s[mask], R))
        r = q_m - p_m
        J = _yaw_jacobian(s_m @ R.T)
        H = np.einsum("nai,nab,nbj->ij", J, W, J)
        g = np.einsum("nai,nab,nb->i", J, W, r)
        try:
            delta = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break

        def fixed_cost(th, tr):
            Rl = rot_z(th)
            rl = q_m - (s_m @ Rl.T + tr)
            return float(np.einsum("na,nab,nb->", rl, W, rl))

        cost_pre = fixed_cost(theta, t)
        alpha = 1.0
        cost_post = fixed_cost(theta + delta[3], t + delta[:3])
        while cost_post > cost_pre and alpha > 1e-4:
            alpha *= 0.5
            cost_post = fixed_cost(theta + alpha * delta[3], t + alpha * delta[:3])
        if cost_post > cost_pre:
            break  # no descent direction left at this linearization
        theta += alpha * delta[3]
        t += alpha * delta[:3]
        costs.append((cost_pre, cost_post))
        if alpha * np.linalg.norm(delta) < params.convergence_epsilon:
            converged = True
            break

    transform = Pose3.from_rt(rot_z(theta), t)
    f1, f2, rmse, n_excl = _fitness_of(src @ transform.rotation().T + t, tgt_index, params)
    return RegistrationResult(
        transform=transform,
        fitness_f1=f1,
        fitness_f2=f2,
        inlier_rmse=rmse,
        converged=converged,
        n_within_exclusion=n_excl,
        iterations=iterations,
        iteration_costs=costs,
    )


def p2p_icp(source, target, initial: Pose3, params: RegistrationParams) -> RegistrationResult:
    """Point-to-point ICP; closed-form rigid update per iteration, full 6-DoF."""
    src = as_xyz(source)
    tgt = as_xyz(target)
    if src.shape[0] == 0 or tgt.shape[0] == 0:
        raise TooFewPoints("both clouds must be non-empty")
    tgt_index = NnIndex(tgt)
    T = initial
    converged = False
    costs = []
    iterations = 0
    any_pairs = False
    for iterations in range(1, params.max_iterations + 1):
        moved = src @ T.rotation().T + T.t
        d, j = tgt_index._tree.query(moved, k=1)
        mask = d <= params.max_correspondence_distance
        if mask.sum() < 3:
            break
        any_pairs = True
        pairs_src = moved[mask]
        pairs_tgt = tgt[j[mask]]
        cost_pre = float(np.sum(d[mask] ** 2))
        try:
            step, _ = umeyama_align(pairs_src, pairs_tgt, with_scale=False)
        except DegenerateConfiguration:
            break
        cost_post = float(np.sum((step.apply(pairs_src) - pairs_tgt) ** 2))
        costs.append((cost_pre, cost_post))
        T = compose(step, T)
        if np.linalg.norm(log_se3(step)) < params.convergence_epsilon:
            converged = True
            break

    moved = src @ T.rotation().T + T.t
    f1, f2, rmse, n_excl = _fitness_of(moved, tgt_index, params)
    if not any_pairs:
        f1 = f2 = 0.0
    return RegistrationResult(
        transform=T,
        fitness_f1=f1,
        fitness_f2=f2,
        inlier_rmse=rmse,
        converged=converged,
        n_within_exclusion=n_excl,
        iterations=iterations,
        iteration_costs=costs,
    )


def _fitness_of(aligned_points, tgt_index: NnIndex, params: RegistrationParams):
    try:
        f1, f2, rmse = compute_fitness(
            aligned_points,
            tgt_index,
            params.fitness_f1,
            params.fitness_f2,
            params.fitness_exclusion,
        )
        d = tgt_index.nearest_distances(aligned_points)
        return f1, f2, rmse, int((d <= params.fitness_exclusion).sum())
    except NoPointsInExclusionZone:
        return 0.0, 0.0, float("inf"), 0


def compute_fitness(source_aligned, target_index: NnIndex, f1: float, f2: float, exclusion: float):
    """Fitness over source points within the exclusion radius of the target.

    Returns (fitness_f1, fitness_f2, rmse); the fractions are relative to the
    restricted point set. Raises when nothing is inside the exclusion zone.
    """
    if not f1 <= f2 <= exclusion:
        raise ValueError("thresholds must satisfy f1 <= f2 <= exclusion")
    pts = as_xyz(source_aligned)
    d = target_index.nearest_distances(pts)
    restricted = d <= exclusion
    if not restricted.any():
        raise NoPointsInExclusionZone(
            f"all {len(pts)} source points farther than {exclusion} m from target"
        )
    dr = d[restricted]
    fit1 = float((dr <= f1).mean())
    fit2 = float((dr <= f2).mean())
    rmse = float(np.sqrt(np.mean(dr**2)))
    return fit1, fit2, rmse


def inlier_fraction(source_aligned, target_index: NnIndex, threshold: float) -> float:
    """Fraction of all source points within threshold of the target (gate metric)."""
    d = target_index.nearest_distances(as_xyz(source_aligned))
    return float((d <= threshold).mean())


def classify_alignment(
    result: RegistrationResult,
    perfect_threshold: float = 0.6,
    good_threshold: float = 0.5,
) -> AlignmentClass:
    if result.outside_map:
        return AlignmentClass.OUTSIDE_MAP
    if result.fitness_f1 >= perfect_threshold:
        return AlignmentClass.PERFECT
    if result.fitness_f2 >= good_threshold:
        return AlignmentClass.GOOD
    return AlignmentClass.BAD


def group_keyframes(positions, radius: float):
    """Agglomerate consecutive keyframes within radius of the group seed.

    Returns a list of index lists; the seed is the first keyframe of each group.
    """
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    groups = []
    current = []
    seed = None
    for k, p in enumerate(positions):
        if seed is None or np.linalg.norm(p - seed) > radius:
            if current:
                groups.append(current)
            current = [k]
            seed = p
        else:
            current.append(k)
    if current:
        groups.append(current)
    return groups


def sphere_crop_targets(reference_cloud, group_centers, radius: float):
    """One cropped cloud per center: reference points within radius."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    pts = as_xyz(reference_cloud)
    index = NnIndex(pts)
    out = []
    for center in group_centers:
        c = center.t if isinstance(center, Pose3) else np.asarray(center, dtype=float)
        idx = index._tree.query_ball_point(c, radius)
        out.append(PointCloud(pts[sorted(idx)]))
    return out
