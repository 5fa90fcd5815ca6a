"""Numba-jitted hot loops: BVH ray casting and voxel-grid ray traversal.

Kept free of package imports so the kernels stay cacheable and testable in
isolation. All geometry is float64; fastmath stays off so results are
bit-deterministic across runs and thread counts.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

_EPS = 1e-12


@njit(cache=True, inline="always")
def _ray_aabb(ox, oy, oz, ix, iy, iz, bmin, bmax, tmax):
    """Slab test; returns True if the box is hit with entry t < tmax."""
    t0 = (bmin[0] - ox) * ix
    t1 = (bmax[0] - ox) * ix
    if t0 > t1:
        t0, t1 = t1, t0
    tnear = t0
    tfar = t1
    t0 = (bmin[1] - oy) * iy
    t1 = (bmax[1] - oy) * iy
    if t0 > t1:
        t0, t1 = t1, t0
    if t0 > tnear:
        tnear = t0
    if t1 < tfar:
        tfar = t1
    t0 = (bmin[2] - oz) * iz
    t1 = (bmax[2] - oz) * iz
    if t0 > t1:
        t0, t1 = t1, t0
    if t0 > tnear:
        tnear = t0
    if t1 < tfar:
        tfar = t1
    return tfar >= tnear and tnear < tmax and tfar > 0.0


@njit(cache=True, inline="always")
def _ray_triangle(ox, oy, oz, dx, dy, dz, v0, e1, e2):
    """Moller-Trumbore; returns hit parameter t or -1."""
    px = dy * e2[2] - dz * e2[1]
    py = dz * e2[0] - dx * e2[2]
    pz = dx * e2[1] - dy * e2[0]
    det = e1[0] * px + e1[1] * py + e1[2] * pz
    if -_EPS < det < _EPS:
        return -1.0
    inv = 1.0 / det
    tx = ox - v0[0]
    ty = oy - v0[1]
    tz = oz - v0[2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < -1e-9 or u > 1.0 + 1e-9:
        return -1.0
    qx = ty * e1[2] - tz * e1[1]
    qy = tz * e1[0] - tx * e1[2]
    qz = tx * e1[1] - ty * e1[0]
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < -1e-9 or u + v > 1.0 + 1e-9:
        return -1.0
    return (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv


@njit(cache=True, parallel=True)
def cast_rays_kernel(
    origins,
    dirs,
    max_range,
    node_min,
    node_max,
    node_left,
    node_right,
    node_start,
    node_count,
    root,
    tri_order,
    tri_v0,
    tri_e1,
    tri_e2,
    out_t,
):
    n = origins.shape[0]
    for r in prange(n):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix = 1.0 / dx if dx != 0.0 else np.inf
        iy = 1.0 / dy if dy != 0.0 else np.inf
        iz = 1.0 / dz if dz != 0.0 else np.inf
        best = max_range
        hit = False
        stack = np.empty(128, dtype=np.int64)
        sp = 0
        stack[sp] = root
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if not _ray_aabb(ox, oy, oz, ix, iy, iz, node_min[node], node_max[node], best):
                continue
            cnt = node_count[node]
            if cnt > 0:
                start = node_start[node]
                for k in range(start, start + cnt):
                    tri = tri_order[k]
                    t = _ray_triangle(
                        ox, oy, oz, dx, dy, dz, tri_v0[tri], tri_e1[tri], tri_e2[tri]
                    )
                    if 1e-9 < t <= best:
                        best = t
                        hit = True
            else:
                left = node_left[node]
                right = node_right[node]
                stack[sp] = left
                sp += 1
                if right >= 0:
                    stack[sp] = right
                    sp += 1
        out_t[r] = best if hit else np.inf


@njit(cache=True)
def integrate_rays_kernel(origin, endpoints, resolution, logodds, hit_lo, miss_lo):
    """Accumulate log-odds updates along rays into a (key -> sum) typed dict.

    Keys pack voxel indices (21 bits per axis, offset by 2^20). The endpoint
    voxel receives hit_lo; every voxel strictly before it on the ray receives
    miss_lo. Updates are raw sums; clamping happens at read time so that
    integration order cannot matter.
    """
    inv_resolution = 1.0 / resolution
    ox, oy, oz = origin[0], origin[1], origin[2]
    x0 = np.int64(np.floor(ox * inv_resolution))
    y0 = np.int64(np.floor(oy * inv_resolution))
    z0 = np.int64(np.floor(oz * inv_resolution))
    for i in range(endpoints.shape[0]):
        ex, ey, ez = endpoints[i, 0], endpoints[i, 1], endpoints[i, 2]
        x1 = np.int64(np.floor(ex * inv_resolution))
        y1 = np.int64(np.floor(ey * inv_resolution))
        z1 = np.int64(np.floor(ez * inv_resolution))

        end_key = ((x1 + 1048576) << 42) | ((y1 + 1048576) << 21) | (z1 + 1048576)

        dx = ex - ox
        dy = ey - oy
        dz = ez - oz
        # 3-D DDA (Amanatides-Woo) from origin voxel toward endpoint voxel
        sx = 1 if dx > 0 else (-1 if dx < 0 else 0)
        sy = 1 if dy > 0 else (-1 if dy < 0 else 0)
        sz = 1 if dz > 0 else (-1 if dz < 0 else 0)

        tx = np.inf
        ty = np.inf
        tz = np.inf
        dtx = np.inf
        dty = np.inf
        dtz = np.inf
        if sx != 0:
            nxt = (x0 + (1 if sx > 0 else 0)) * resolution
            tx = (nxt - ox) / dx
            dtx = resolution / abs(dx)
        if sy != 0:
            nxt = (y0 + (1 if sy > 0 else 0)) * resolution
            ty = (nxt - oy) / dy
            dty = resolution / abs(dy)
        if sz != 0:
            nxt = (z0 + (1 if sz > 0 else 0)) * resolution
            tz = (nxt - oz) / dz
            dtz = resolution / abs(dz)

        cx, cy, cz = x0, y0, z0
        guard = 0
        max_steps = (abs(x1 - x0) + abs(y1 - y0) + abs(z1 - z0)) + 3
        while guard < max_steps:
            key = ((cx + 1048576) << 42) | ((cy + 1048576) << 21) | (cz + 1048576)
            if key == end_key:
                break
            logodds[key] = logodds.get(key, 0.0) + miss_lo
            if tx <= ty and tx <= tz:
                cx += sx
                tx += dtx
            elif ty <= tz:
                cy += sy
                ty += dty
            else:
                cz += sz
                tz += dtz
            guard += 1
        logodds[end_key] = logodds.get(end_key, 0.0) + hit_lo
