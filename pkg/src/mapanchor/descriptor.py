"""Polar occupancy descriptors for indoor place recognition.

A scan is binned top-down into num_rings radial x num_sectors azimuthal
cells over [0, max_radius); a cell is 1 iff it holds at least
min_points_per_bin points. The per-ring row means form a rotation-invariant
ring key used for fast candidate retrieval; full matrices are compared by
column-shifted cosine distance, which also yields a yaw estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionMismatch, EmptyReferenceSet
from .geometry import as_xyz


@dataclass
class IscParams:
    num_sectors: int = 60
    num_rings: int = 20
    max_radius: float = 10.0
    min_points_per_bin: int = 40
    max_shift_fraction: float = 0.1
    distance_threshold: float = 0.3
    num_candidates: int = 100

    def __post_init__(self):
        if self.num_sectors < 1 or self.num_rings < 1:
            raise ValueError("num_sectors and num_rings must be >= 1")
        if self.max_radius <= 0:
            raise ValueError("max_radius must be positive")
        if not 0 < self.max_shift_fraction <= 1:
            raise ValueError("max_shift_fraction must be in (0, 1]")

    @property
    def max_shift(self) -> int:
        return int(np.floor(self.max_shift_fraction * self.num_sectors))

    @property
    def sector_width(self) -> float:
        return 2 * np.pi / self.num_sectors


class IscDescriptor:
    """Binary polar occupancy matrix (rings x sectors) plus its ring key."""

    __slots__ = ("omega", "ring_key")

    def __init__(self, omega):
        self.omega = np.asarray(omega, dtype=np.uint8)
        if self.omega.ndim != 2:
            raise ValueError("omega must be a 2-D matrix")
        if not np.isin(self.omega, (0, 1)).all():
            raise ValueError("omega entries must be 0 or 1")
        self.ring_key = self.omega.mean(axis=1)

    @property
    def shape(self):
        return self.omega.shape

    def to_csv(self, path):
        np.savetxt(path, self.omega, fmt="%d", delimiter=",")

    @staticmethod
    def from_csv(path):
        return IscDescriptor(np.loadtxt(path, delimiter=",", dtype=np.uint8, ndmin=2))

    def to_pgm(self, path):
        """Grayscale dump: 1 -> white."""
        img = (self.omega * 255).astype(np.uint8)
        with open(path, "wb") as fh:
            fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
            fh.write(img.tobytes())


@dataclass
class LoopCandidate:
    query_index: int
    ref_index: int
    shift: int  # columns; roll(query_omega, shift) best matches ref_omega
    yaw_estimate: float  # radians = shift * sector width
    distance: float

    def __post_init__(self):
        if not 0.0 <= self.distance <= 2.0:
            raise ValueError(f"distance {self.distance} outside [0, 2]")


def make_descriptor(scan, params: IscParams) -> IscDescriptor:
    """Bin a sensor-frame scan; points at r >= max_radius are discarded."""
    pts = as_xyz(scan)
    omega = np.zeros((params.num_rings, params.num_sectors), dtype=np.int64)
    if pts.shape[0]:
        r = np.hypot(pts[:, 0], pts[:, 1])
        keep = r < params.max_radius
        r = r[keep]
        theta = np.arctan2(pts[keep, 1], pts[keep, 0])
        ring = np.floor(r * (params.num_rings / params.max_radius)).astype(np.int64)
        ring = np.minimum(ring, params.num_rings - 1)
        sector = np.floor((theta + np.pi) / params.sector_width).astype(np.int64)
        sector %= params.num_sectors
        np.add.at(omega, (ring, sector), 1)
    return IscDescriptor((omega >= params.min_points_per_bin).astype(np.uint8))


def ring_key_knn(query_key, reference_keys, n_candidates: int):
    """Indices of the n_candidates nearest reference ring keys (L2)."""
    ref = np.asarray(reference_keys, dtype=float)
    if ref.ndim != 2 or ref.shape[0] == 0:
        raise EmptyReferenceSet("no reference ring keys")
    k = min(n_candidates, ref.shape[0])
    _, idx = cKDTree(ref).query(np.asarray(query_key, dtype=float), k=k)
    return np.atleast_1d(idx)


def shifted_distance(q: IscDescriptor, r: IscDescriptor, max_shift: int):
    """Best cyclic column shift of q against r and its cosine distance.

    distance(k) = 1 - mean over valid columns of cos-similarity, where a
    column pair is valid iff both norms are positive; shifts with no valid
    column score 1. Ties prefer the smallest |shift|, then the smaller shift.
    """
    if q.shape != r.shape:
        raise DimensionMismatch(f"descriptor shapes differ: {q.shape} vs {r.shape}")
    qf = q.omega.astype(np.float64)
    rf = r.omega.astype(np.float64)
    r_norms = np.linalg.norm(rf, axis=0)
    q_norms = np.linalg.norm(qf, axis=0)
    best = (1.0, 0, 0)  # (distance, |shift|, shift)
    for k in range(-max_shift, max_shift + 1):
        qs = np.roll(qf, k, axis=1)
        qn = np.roll(q_norms, k)
        valid = (qn > 0) & (r_norms > 0)
        if valid.any():
            cos = (qs[:, valid] * rf[:, valid]).sum(axis=0) / (qn[valid] * r_norms[valid])
            dist = 1.0 - cos.mean()
        else:
            dist = 1.0
        cand = (dist, abs(k), k)
        if cand < best:
            best = cand
    return best[2], best[0]


def detect_isc_loops(query_session, reference_session, params: IscParams):
    """Per query keyframe: ring-key KNN, then shifted matching; keep the best
    candidate iff its distance passes the threshold."""
    ref_desc = [kf.descriptor for kf in reference_session.keyframes]
    qry_desc = [kf.descriptor for kf in query_session.keyframes]
    if any(d is None for d in ref_desc) or any(d is None for d in qry_desc):
        raise ValueError("both sessions must carry descriptors")
    if not ref_desc:
        raise EmptyReferenceSet("reference session has no keyframes")
    ref_keys = np.stack([d.ring_key for d in ref_desc])
    out = []
    for qi, qd in enumerate(qry_desc):
        candidates = ring_key_knn(qd.ring_key, ref_keys, params.num_candidates)
        best = None
        for ri in candidates:
            shift, dist = shifted_distance(qd, ref_desc[ri], params.max_shift)
            key = (dist, int(ri))
            if best is None or key < best[0]:
                best = (key, int(ri), shift, dist)
        if best is not None and best[3] <= params.distance_threshold:
            out.append(
                LoopCandidate(
                    query_index=qi,
                    ref_index=best[1],
                    shift=best[2],
                    yaw_estimate=best[2] * params.sector_width,
                    distance=best[3],
                )
            )
    return out
