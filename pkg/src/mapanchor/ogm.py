"""2-D occupancy grid from a reference cloud, skeleton, and scan locations.

Grid convention follows ROS map_server: row 0 is the top of the map, the
origin is the world position of the lower-left pixel corner, and PGM output
encodes Free=254, Occupied=0, Unknown=205.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptyCloud, NoFreeSpace
from .geometry import as_xyz

UNKNOWN, FREE, OCCUPIED = 0, 1, 2

_PGM_VALUES = {FREE: 254, OCCUPIED: 0, UNKNOWN: 205}


@dataclass
class OccupancyGrid:
    width: int
    height: int
    resolution: float
    origin: np.ndarray  # world (x, y) of the lower-left pixel corner
    cells: np.ndarray  # (height, width) uint8 of UNKNOWN/FREE/OCCUPIED

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        self.origin = np.asarray(self.origin, dtype=float).reshape(2)
        assert self.cells.shape == (self.height, self.width)

    def world_to_pixel(self, xy):
        """World (x, y) -> (row, col); no bounds check."""
        x, y = float(xy[0]), float(xy[1])
        col = int(np.floor((x - self.origin[0]) / self.resolution))
        row = self.height - 1 - int(np.floor((y - self.origin[1]) / self.resolution))
        return row, col

    def pixel_to_world(self, row, col):
        """Pixel center -> world (x, y)."""
        x = self.origin[0] + (col + 0.5) * self.resolution
        y = self.origin[1] + (self.height - 1 - row + 0.5) * self.resolution
        return np.array([x, y])

    def free_mask(self):
        return self.cells == FREE


def grid_from_cloud(
    cloud,
    floor_z: float,
    resolution: float,
    free_band: float = 0.5,
    occupied_height: float = 1.0,
    occupied_band: float = 0.2,
) -> OccupancyGrid:
    """Project a cloud to a trinary grid sized to its XY bounding box.

    A cell is Free if it holds points within +-free_band of the floor,
    Occupied if it holds points within +-occupied_band of floor+occupied_height;
    Occupied wins when both apply.
    """
    pts = as_xyz(cloud)
    if pts.shape[0] == 0:
        raise EmptyCloud("cannot build a grid from an empty cloud")
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    mins = pts[:, :2].min(axis=0)
    maxs = pts[:, :2].max(axis=0)
    width = max(1, int(np.ceil((maxs[0] - mins[0]) / resolution)))
    height = max(1, int(np.ceil((maxs[1] - mins[1]) / resolution)))

    cols = np.clip(np.floor((pts[:, 0] - mins[0]) / resolution).astype(int), 0, width - 1)
    rows = height - 1 - np.clip(
        np.floor((pts[:, 1] - mins[1]) / resolution).astype(int), 0, height - 1
    )
    z = pts[:, 2]
    is_free = np.abs(z - floor_z) <= free_band
    is_occ = np.abs(z - (floor_z + occupied_height)) <= occupied_band

    cells = np.full((height, width), UNKNOWN, dtype=np.uint8)
    cells[rows[is_free], cols[is_free]] = FREE
    cells[rows[is_occ], cols[is_occ]] = OCCUPIED  # occupied wins over free
    return OccupancyGrid(width, height, resolution, mins, cells)


# ---------------------------------------------------------------------------
# Zhang-Suen thinning


def _neighbors(img):
    """The 8 neighbors P2..P9 (N, NE, E, SE, S, SW, W, NW) of every pixel."""
    p = np.pad(img, 1)
    P2 = p[:-2, 1:-1]
    P3 = p[:-2, 2:]
    P4 = p[1:-1, 2:]
    P5 = p[2:, 2:]
    P6 = p[2:, 1:-1]
    P7 = p[2:, :-2]
    P8 = p[1:-1, :-2]
    P9 = p[:-2, :-2]
    return P2, P3, P4, P5, P6, P7, P8, P9


def _thin_subiteration(img, second_pass):
    n = _neighbors(img.astype(np.uint8))
    P2, P3, P4, P5, P6, P7, P8, P9 = n
    seq = [P2, P3, P4, P5, P6, P7, P8, P9, P2]
    B = np.zeros(img.shape, dtype=np.int16)
    for s in seq[:8]:
        B += s
    A = np.zeros(img.shape, dtype=np.int16)
    for k in range(8):
        A += ((seq[k] == 0) & (seq[k + 1] == 1)).astype(np.int16)
    if not second_pass:
        c3 = P2 * P4 * P6
        c4 = P4 * P6 * P8
    else:
        c3 = P2 * P4 * P8
        c4 = P2 * P6 * P8
    remove = img & (B >= 2) & (B <= 6) & (A == 1) & (c3 == 0) & (c4 == 0)
    return img & ~remove


def skeletonize(grid: OccupancyGrid) -> np.ndarray:
    """Zhang-Suen thinning of the Free mask to a 1-pixel, 8-connected skeleton."""
    mask = grid.free_mask()
    if not mask.any():
        raise NoFreeSpace("grid has no free cells")
    img = mask.copy()
    while True:
        before = img.copy()
        img = _thin_subiteration(img, second_pass=False)
        img = _thin_subiteration(img, second_pass=True)
        if np.array_equal(img, before):
            break
    return img


# ---------------------------------------------------------------------------
# Scan-location sampling


@dataclass
class ScanLocationList:
    """Ordered 2-D world coordinates plus the fixed sensor height."""

    xy: np.ndarray  # (N, 2) meters
    sensor_z: float

    def __len__(self):
        return self.xy.shape[0]

    def poses_xyz(self):
        out = np.zeros((len(self), 3))
        out[:, :2] = self.xy
        out[:, 2] = self.sensor_z
        return out


def _nn_chain_order(points, start_xy):
    """Greedy nearest-neighbor chain from the point nearest start; ties by index."""
    pts = np.asarray(points, dtype=float)
    n = pts.shape[0]
    d0 = np.linalg.norm(pts - np.asarray(start_xy, dtype=float), axis=1)
    current = int(np.argmin(d0))  # argmin takes the lowest index on ties
    order = [current]
    remaining = set(range(n)) - {current}
    while remaining:
        rem = sorted(remaining)
        d = np.linalg.norm(pts[rem] - pts[current], axis=1)
        current = rem[int(np.argmin(d))]
        order.append(current)
        remaining.remove(current)
    return order


def sample_scan_locations(
    grid: OccupancyGrid,
    skeleton: np.ndarray,
    line_spacing: float = 1.0,
    min_spacing: float = 0.5,
    start=(0.0, 0.0),
    sensor_z: float = 0.0,
) -> ScanLocationList:
    """Intersect the skeleton with a line raster and order the survivors.

    Steps: line masks at line_spacing (phase at pixel 0), connected-component
    centroids snapped to the nearest component pixel, greedy min-spacing
    filter, nearest-neighbor chain ordering from the point nearest `start`.
    """
    if not skeleton.any():
        raise NoFreeSpace("skeleton is empty")
    step = max(1, int(round(line_spacing / grid.resolution)))
    rows = np.arange(grid.height)
    cols = np.arange(grid.width)
    line_mask = ((rows % step == 0)[:, None]) | ((cols % step == 0)[None, :])
    surviving = skeleton & line_mask
    if not surviving.any():
        # fall back to the full skeleton rather than returning nothing
        surviving = skeleton

    labels, n_comp = ndimage.label(surviving, structure=np.ones((3, 3)))
    pix_points = []
    for comp in range(1, n_comp + 1):
        rr, cc = np.nonzero(labels == comp)
        centroid = np.array([rr.mean(), cc.mean()])
        d = (rr - centroid[0]) ** 2 + (cc - centroid[1]) ** 2
        k = int(np.argmin(d))  # snap to a real skeleton pixel
        pix_points.append((rr[k], cc[k]))
    pix_points.sort()

    world = np.array([grid.pixel_to_world(r, c) for r, c in pix_points]).reshape(-1, 2)
    kept = []
    for p in world:
        if all(np.linalg.norm(p - q) >= min_spacing for q in kept):
            kept.append(p)
    kept = np.array(kept).reshape(-1, 2)

    order = _nn_chain_order(kept, start)
    return ScanLocationList(xy=kept[order], sensor_z=sensor_z)


# ---------------------------------------------------------------------------
# PGM / YAML output (ROS map_server conventions)


def write_pgm(grid: OccupancyGrid, path):
    lut = np.zeros(256, dtype=np.uint8)
    for state, value in _PGM_VALUES.items():
        lut[state] = value
    img = lut[grid.cells]
    with open(path, "wb") as fh:
        fh.write(f"P5\n{grid.width} {grid.height}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def write_map_yaml(grid: OccupancyGrid, path, image_name):
    text = (
        f"image: {image_name}\n"
        f"resolution: {grid.resolution:.6f}\n"
        f"origin: [{grid.origin[0]:.6f}, {grid.origin[1]:.6f}, 0.000000]\n"
        "negate: 0\n"
        "occupied_thresh: 0.65\n"
        "free_thresh: 0.196\n"
    )
    with open(path, "w") as fh:
        fh.write(text)


def read_pgm(path):
    """Read a P5 PGM back into a cell array (for round-trip checks)."""
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a P5 PGM")
    w, h = (int(v) for v in parts[1].split())
    img = np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)
    return img
