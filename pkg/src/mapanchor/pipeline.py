"""End-to-end anchoring: descriptor loops, graph solves, final refinement.

Stage 1 validates descriptor loop candidates geometrically and solves an
anchored graph; stage 2 adds proximity (KNN) loops with adaptive covariance
and solves again; stage 3 refines each pose with point-to-point ICP against
a dense reference cloud and grades it into the confidence list.

Frame bookkeeping for the encounters, with W_R/W_Q the world poses of the
matched keyframes:

- stage 1 registers the query scan (source, sensor frame) against a submap
  expressed in the matched reference keyframe's frame, so T ~ W_R^-1 W_Q and
  the encounter is c = T^-1.
- stage 2 registers submaps both expressed in the query keyframe's current
  world estimate; T corrects that estimate (W_Q_true = W_est T), giving
  c = T^-1 (+) relative(W_R, W_est).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .descriptor import IscParams, detect_isc_loops, make_descriptor
from .errors import EmptyIndex, EmptyReferenceCloud, NoEncounters
from .geometry import (
    NnIndex,
    PointCloud,
    Pose3,
    as_xyz,
    compose,
    relative,
    voxel_downsample,
)
from .posegraph import (
    AnchoredBetweenFactor,
    BetweenFactor,
    GraphProblem,
    NoiseModel,
    PriorFactor,
    SolveConfig,
    solve,
    to_world,
)
from .registration import (
    AlignmentClass,
    RegistrationParams,
    classify_alignment,
    group_keyframes,
    inlier_fraction,
    p2p_icp,
    sphere_crop_targets,
    yaw_gicp,
)
from .session import Session, Trajectory


@dataclass
class PipelineConfig:
    isc: IscParams = field(default_factory=IscParams)
    registration: RegistrationParams = field(default_factory=RegistrationParams)
    solver: SolveConfig = field(default_factory=SolveConfig)
    # noise variances (paper values; sigmas are their square roots)
    var_prior: float = 1e-102
    var_anchor: float = float(np.pi**2)
    var_odometry: float = 1e-4
    var_encounter: float = 0.5
    cauchy_k: float = 1.0
    # ISC loop validation
    submap_size: int = 3
    gate_fitness_distance: float = 0.3
    gate_fitness_threshold: float = 0.6
    # KNN loop stage
    enable_knn_loops: bool = True
    knn_k: int = 5
    knn_sigma_well: float = 0.01
    knn_sigma_acceptable: float = float(np.sqrt(0.5))
    # classification
    class_perfect_threshold: float = 0.6
    class_good_threshold: float = 0.5
    # final ICP
    sphere_radius: float = 20.0
    ref_cloud_spacing: float = 0.01
    submap_voxel: float = 0.08  # downsample registrations for speed
    seed: int = 0

    def noise(self, variance, cauchy=None):
        return NoiseModel.from_variance(variance, cauchy_k=cauchy)


@dataclass
class PipelineOutput:
    world_trajectory: Trajectory
    anchor: Pose3
    confidence: list
    values: dict
    graph: GraphProblem
    timings: dict
    stage_trajectories: dict
    encounters_stage1: list
    encounters_stage2: list


@dataclass
class Encounter:
    ref_index: int
    query_index: int
    pose: Pose3  # c = (D_R x_R) (-) (D_Q x_Q) at consistency
    grade: str  # "isc", "well", "acceptable"
    fitness: tuple


def ensure_descriptors(session: Session, params: IscParams):
    for kf in session.keyframes:
        if kf.descriptor is None:
            kf.descriptor = make_descriptor(kf.scan, params)


def _submap_in_frame(session: Session, members, base_pose: Pose3, poses=None, voxel=0.0):
    """Stack member scans expressed in base_pose's frame."""
    chunks = []
    for m in members:
        pose_m = session.keyframes[m].odom_pose if poses is None else poses[m]
        rel = relative(pose_m, base_pose)
        chunks.append(rel.apply(session.keyframes[m].scan.xyz))
    pts = np.vstack(chunks)
    if voxel > 0:
        pts = voxel_downsample(pts, voxel)
    return pts


def validate_isc_loops(candidates, query: Session, reference: Session, config: PipelineConfig):
    """Register each candidate's query scan against a local reference submap;
    keep the ones whose inlier fraction passes the gate."""
    if not candidates:
        return []
    ref_positions = reference.positions()
    out = []
    for cand in candidates:
        ri, qj = cand.ref_index, cand.query_index
        d = np.linalg.norm(ref_positions - ref_positions[ri], axis=1)
        members = np.argsort(d, kind="stable")[: config.submap_size]
        target = _submap_in_frame(
            reference, members, reference.keyframes[ri].odom_pose, voxel=config.submap_voxel
        )
        source = voxel_downsample(query.keyframes[qj].scan.xyz, config.submap_voxel)
        if (
            source.shape[0] < config.registration.covariance_knn
            or target.shape[0] < config.registration.covariance_knn
        ):
            continue
        result = yaw_gicp(source, target, cand.yaw_estimate, config.registration)
        if not result.converged:
            continue  # an unconverged fit can still score high in a corridor
        aligned = result.transform.apply(source)
        gate = inlier_fraction(aligned, NnIndex(target), config.gate_fitness_distance)
        if gate < config.gate_fitness_threshold:
            continue
        c = result.transform.inverse()
        out.append(
            Encounter(
                ref_index=ri,
                query_index=qj,
                pose=c,
                grade="isc",
                fitness=(result.fitness_f1, result.fitness_f2),
            )
        )
    return out


def detect_knn_loops(query_world, query: Session, reference: Session, k: int, config: PipelineConfig):
    """Submap-to-submap registration per query keyframe, graded by fitness.

    query_world: list of stage-1 world poses, one per query keyframe.
    """
    ref_positions = reference.positions()
    qry_positions = np.array([p.t for p in query_world])
    out = []
    for j, w_j in enumerate(query_world):
        dq = np.linalg.norm(qry_positions - qry_positions[j], axis=1)
        q_members = np.argsort(dq, kind="stable")[:k]
        dr = np.linalg.norm(ref_positions - qry_positions[j], axis=1)
        r_members = np.argsort(dr, kind="stable")[:k]

        source = _submap_in_frame(query, q_members, w_j, poses=query_world, voxel=config.submap_voxel)
        target = _submap_in_frame(
            reference, r_members, w_j, voxel=config.submap_voxel
        )
        if (
            source.shape[0] < config.registration.covariance_knn
            or target.shape[0] < config.registration.covariance_knn
        ):
            continue
        result = yaw_gicp(source, target, 0.0, config.registration)
        grade = classify_alignment(
            result, config.class_perfect_threshold, config.class_good_threshold
        )
        if grade is AlignmentClass.PERFECT:
            tag = "well"
        elif grade is AlignmentClass.GOOD:
            tag = "acceptable"
        else:
            continue
        i_star = int(r_members[0])
        c = compose(
            result.transform.inverse(),
            relative(reference.keyframes[i_star].odom_pose, w_j),
        )
        out.append(
            Encounter(
                ref_index=i_star,
                query_index=j,
                pose=c,
                grade=tag,
                fitness=(result.fitness_f1, result.fitness_f2),
            )
        )
    return out


def _build_graph(query: Session, reference: Session, encounters, config: PipelineConfig):
    """Anchored two-session graph following the batch MAP objective."""
    ref_label = reference.frame_label
    qry_label = query.frame_label
    anchor_ref = (f"anchor_{ref_label}", 0)
    anchor_qry = (f"anchor_{qry_label}", 0)
    variables = {anchor_ref: Pose3.identity(), anchor_qry: Pose3.identity()}
    for kf in reference.keyframes:
        variables[(ref_label, kf.index)] = kf.odom_pose
    for kf in query.keyframes:
        variables[(qry_label, kf.index)] = kf.odom_pose

    tight = config.noise(config.var_prior)
    problem = GraphProblem(variables)
    problem.add(PriorFactor(anchor_ref, Pose3.identity(), tight))
    problem.add(PriorFactor(anchor_qry, Pose3.identity(), config.noise(config.var_anchor)))
    for kf in reference.keyframes:
        problem.add(PriorFactor((ref_label, kf.index), kf.odom_pose, tight))
    problem.add(
        PriorFactor((qry_label, 0), query.keyframes[0].odom_pose, tight)
    )
    odo_noise = config.noise(config.var_odometry)
    for session, label in ((reference, ref_label), (query, qry_label)):
        for e in session.odometry_edges:
            problem.add(BetweenFactor((label, e.i), (label, e.j), e.relative, odo_noise))
        for e in session.loop_edges:
            sig = np.sqrt(np.clip(np.diag(e.covariance), 1e-18, None))
            problem.add(
                BetweenFactor((label, e.i), (label, e.j), e.relative, NoiseModel.diagonal(sig))
            )

    for enc in encounters:
        if enc.grade == "isc":
            noise = config.noise(config.var_encounter, cauchy=config.cauchy_k)
        elif enc.grade == "well":
            noise = NoiseModel.isotropic(config.knn_sigma_well)
        else:
            noise = NoiseModel.isotropic(config.knn_sigma_acceptable)
        problem.add(
            AnchoredBetweenFactor(
                (ref_label, enc.ref_index),
                (qry_label, enc.query_index),
                anchor_ref,
                anchor_qry,
                enc.pose,
                noise,
            )
        )
    return problem, anchor_qry


def final_icp(query_world, query: Session, reference_cloud, config: PipelineConfig):
    """Per-scan point-to-point refinement against the dense reference cloud.

    Returns (refined world poses, confidence list, registration results).
    """
    ref_pts = as_xyz(reference_cloud)
    if ref_pts.shape[0] == 0:
        raise EmptyReferenceCloud("reference cloud is empty")
    positions = np.array([p.t for p in query_world])
    groups = group_keyframes(positions, config.sphere_radius / 2.0)
    centers = [positions[g[0]] for g in groups]
    crops = sphere_crop_targets(ref_pts, centers, config.sphere_radius)

    refined = list(query_world)
    confidence = [AlignmentClass.BAD] * len(query_world)
    results = [None] * len(query_world)
    for group, crop in zip(groups, crops):
        if len(crop) == 0:
            for j in group:
                confidence[j] = AlignmentClass.OUTSIDE_MAP
            continue
        for j in group:
            scan = voxel_downsample(query.keyframes[j].scan.xyz, config.submap_voxel / 2)
            result = p2p_icp(scan, crop.xyz, query_world[j], config.registration)
            grade = classify_alignment(
                result, config.class_perfect_threshold, config.class_good_threshold
            )
            confidence[j] = grade
            results[j] = result
            if grade in (AlignmentClass.PERFECT, AlignmentClass.GOOD):
                refined[j] = result.transform
    return refined, confidence, results


def run(query: Session, reference: Session, reference_cloud, config: PipelineConfig) -> PipelineOutput:
    """Execute the full anchoring pipeline; deterministic given config."""
    timings = {}
    stage_traj = {}

    t0 = time.perf_counter()
    ensure_descriptors(reference, config.isc)
    ensure_descriptors(query, config.isc)
    candidates = detect_isc_loops(query, reference, config.isc)
    timings["isc_detection"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    encounters = validate_isc_loops(candidates, query, reference, config)
    timings["isc_validation"] = time.perf_counter() - t0
    if not encounters:
        raise NoEncounters(
            f"{len(candidates)} descriptor candidates, none survived geometric validation"
        )

    t0 = time.perf_counter()
    problem, anchor_key = _build_graph(query, reference, encounters, config)
    values, report1 = solve(problem, config.solver)
    timings["solve_stage1"] = time.perf_counter() - t0
    qry_label = query.frame_label
    world1 = [
        compose(values[anchor_key], values[(qry_label, kf.index)]) for kf in query.keyframes
    ]
    stage_traj["stage1"] = Trajectory(
        [(kf.timestamp, p) for kf, p in zip(query.keyframes, world1)]
    )

    encounters2 = []
    if config.enable_knn_loops:
        t0 = time.perf_counter()
        encounters2 = detect_knn_loops(world1, query, reference, config.knn_k, config)
        # stage-1 encounters are retained; both factor sets coexist
        problem, anchor_key = _build_graph(
            query, reference, encounters + encounters2, config
        )
        for node, pose in values.items():
            problem.variables[node] = pose
        values, report2 = solve(problem, config.solver)
        timings["solve_stage2"] = time.perf_counter() - t0
    world2 = [
        compose(values[anchor_key], values[(qry_label, kf.index)]) for kf in query.keyframes
    ]
    stage_traj["stage2"] = Trajectory(
        [(kf.timestamp, p) for kf, p in zip(query.keyframes, world2)]
    )

    t0 = time.perf_counter()
    refined, confidence, _results = final_icp(world2, query, reference_cloud, config)
    timings["final_icp"] = time.perf_counter() - t0
    final_traj = Trajectory(
        [(kf.timestamp, p) for kf, p in zip(query.keyframes, refined)]
    )
    stage_traj["final"] = final_traj

    return PipelineOutput(
        world_trajectory=final_traj,
        anchor=values[anchor_key],
        confidence=confidence,
        values=values,
        graph=problem,
        timings=timings,
        stage_trajectories=stage_traj,
        encounters_stage1=encounters,
        encounters_stage2=encounters2,
    )
