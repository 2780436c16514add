"""Continuous 2D world with oriented rectangular obstacles.

Coordinate system: x to the right, y upward, origin at the lower-left corner
of the map. Occupancy grids are indexed ``grid[row, col]`` with ``row`` along
y and ``col`` along x; cell ``(row, col)`` has its center at
``((col + 0.5) * res, (row + 0.5) * res)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

TWO_PI = 2.0 * math.pi
OBSTACLE_LENGTHS = (1.0, 2.0, 3.0)
OBSTACLE_WIDTH = 0.5
ROBOT_RADIUS = 0.2
R_FOV = 5.0
N_BEAMS = 360

# closed rectangles: points this close to an edge count as inside
_EDGE_EPS = 1e-9


class WorldError(ValueError):
    """Raised for invalid world queries or failed map synthesis."""


@dataclass(frozen=True)
class ObstacleRect:
    cx: float
    cy: float
    length: float
    width: float
    angle: float

    def __post_init__(self) -> None:
        if self.length <= 0 or self.width <= 0:
            raise WorldError(f"degenerate obstacle {self.length}x{self.width}")
        object.__setattr__(self, "angle", float(self.angle) % TWO_PI)

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy])

    @property
    def half_extents(self) -> np.ndarray:
        return np.array([0.5 * self.length, 0.5 * self.width])

    def axes(self) -> np.ndarray:
        """Rows are the unit vectors of the local x (length) and y (width) axes."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        return np.array([[c, s], [-s, c]])

    def to_local(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=float) - self.center) @ self.axes().T

    def corners(self) -> np.ndarray:
        hx, hy = self.half_extents
        local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
        return local @ self.axes() + self.center

    def edges(self) -> np.ndarray:
        """Four edge segments as an array of shape (4, 2, 2)."""
        c = self.corners()
        return np.stack([c, np.roll(c, -1, axis=0)], axis=1)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        loc = self.to_local(pts)
        return np.all(np.abs(loc) <= self.half_extents + _EDGE_EPS, axis=-1)

    def distance(self, pts: np.ndarray) -> np.ndarray:
        """Euclidean distance from points to the (filled) rectangle."""
        loc = self.to_local(pts)
        d = np.maximum(np.abs(loc) - self.half_extents, 0.0)
        return np.hypot(d[..., 0], d[..., 1])

    def to_dict(self) -> dict:
        return {"cx": self.cx, "cy": self.cy, "length": self.length,
                "width": self.width, "angle": self.angle}


@dataclass
class WorldMap:
    bounds: Tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    obstacles: List[ObstacleRect]
    resolution: float = 0.05
    _occupancy: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    _edges: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        xmin, ymin, xmax, ymax = self.bounds
        if xmax <= xmin or ymax <= ymin or self.resolution <= 0:
            raise WorldError("bounds and resolution must be positive")
        for ob in self.obstacles:
            c = ob.corners()
            if (c[:, 0].min() < xmin - 1e-9 or c[:, 0].max() > xmax + 1e-9
                    or c[:, 1].min() < ymin - 1e-9 or c[:, 1].max() > ymax + 1e-9):
                raise WorldError(f"obstacle {ob} leaves the map bounds")

    @property
    def shape(self) -> Tuple[int, int]:
        xmin, ymin, xmax, ymax = self.bounds
        return (math.ceil((ymax - ymin) / self.resolution - 1e-9),
                math.ceil((xmax - xmin) / self.resolution - 1e-9))

    @property
    def occupancy(self) -> np.ndarray:
        if self._occupancy is None:
            self._occupancy = rasterize(self)
        return self._occupancy

    @property
    def edge_segments(self) -> np.ndarray:
        if self._edges is None:
            if self.obstacles:
                self._edges = np.concatenate([ob.edges() for ob in self.obstacles])
            else:
                self._edges = np.zeros((0, 2, 2))
        return self._edges

    def cell_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        rows, cols = self.shape
        xmin, ymin = self.bounds[0], self.bounds[1]
        xs = xmin + (np.arange(cols) + 0.5) * self.resolution
        ys = ymin + (np.arange(rows) + 0.5) * self.resolution
        return xs, ys

    def cell_of(self, p: Sequence[float]) -> Tuple[int, int]:
        rows, cols = self.shape
        col = int(math.floor((p[0] - self.bounds[0]) / self.resolution))
        row = int(math.floor((p[1] - self.bounds[1]) / self.resolution))
        return min(max(row, 0), rows - 1), min(max(col, 0), cols - 1)

    def in_bounds(self, p: Sequence[float], margin: float = 0.0) -> bool:
        xmin, ymin, xmax, ymax = self.bounds
        return (xmin + margin <= p[0] <= xmax - margin
                and ymin + margin <= p[1] <= ymax - margin)

    def point_in_obstacle(self, p: Sequence[float]) -> bool:
        pt = np.asarray(p, dtype=float)
        return any(bool(ob.contains(pt)) for ob in self.obstacles)

    def clearance(self, pts: np.ndarray) -> np.ndarray:
        """Distance from each point to the nearest obstacle (inf on empty maps)."""
        pts = np.asarray(pts, dtype=float)
        out = np.full(pts.shape[:-1], np.inf)
        for ob in self.obstacles:
            out = np.minimum(out, ob.distance(pts))
        return out

    def to_dict(self) -> dict:
        return {"bounds": list(self.bounds), "resolution": self.resolution,
                "obstacles": [ob.to_dict() for ob in self.obstacles]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldMap":
        return cls(bounds=tuple(float(b) for b in d["bounds"]),
                   obstacles=[ObstacleRect(**ob) for ob in d["obstacles"]],
                   resolution=float(d["resolution"]))


@dataclass(frozen=True)
class MapGenConfig:
    map_size: float = 20.0
    resolution: float = 0.05
    obstacle_count: int = 40
    angle_mode: str = "simple"
    seed: int = 0
    max_attempts: int = 1000

    def __post_init__(self) -> None:
        if self.obstacle_count < 0:
            raise WorldError("obstacle_count must be >= 0")
        if self.angle_mode not in ("simple", "complex"):
            raise WorldError(f"unknown angle_mode {self.angle_mode!r}")
        if self.map_size <= 0 or self.resolution <= 0:
            raise WorldError("map_size and resolution must be positive")


@dataclass
class RobotPose:
    id: int
    position: np.ndarray
    goal: np.ndarray


def generate_map(cfg: MapGenConfig, rng: Optional[np.random.Generator] = None) -> WorldMap:
    """Place ``cfg.obstacle_count`` rectangles uniformly inside the map.

    Simple maps draw the orientation as ``pi/2 * Binomial(2, 0.5)``, complex
    maps draw it uniformly from ``[0, 2pi)``. Obstacles may overlap.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    size = cfg.map_size
    obstacles: List[ObstacleRect] = []
    for _ in range(cfg.obstacle_count):
        for _attempt in range(cfg.max_attempts):
            length = float(rng.choice(OBSTACLE_LENGTHS))
            if cfg.angle_mode == "simple":
                angle = 0.5 * math.pi * int(rng.binomial(2, 0.5))
            else:
                angle = float(rng.uniform(0.0, TWO_PI))
            cx, cy = rng.uniform(0.0, size, size=2)
            ob = ObstacleRect(float(cx), float(cy), length, OBSTACLE_WIDTH, angle)
            c = ob.corners()
            if c.min() >= 0.0 and c.max() <= size:
                obstacles.append(ob)
                break
        else:
            raise WorldError(
                f"could not place obstacle {len(obstacles) + 1} after {cfg.max_attempts} attempts")
    return WorldMap((0.0, 0.0, size, size), obstacles, cfg.resolution)


def rasterize(world: WorldMap, inflation: float = 0.0) -> np.ndarray:
    """Boolean occupancy grid; a cell is occupied iff its center is inside an obstacle.

    With ``inflation > 0`` a cell is occupied iff its center lies within
    ``inflation`` of an obstacle or of the map boundary.
    """
    rows, cols = world.shape
    grid = np.zeros((rows, cols), dtype=bool)
    xs, ys = world.cell_centers()
    res = world.resolution
    xmin, ymin = world.bounds[0], world.bounds[1]
    for ob in world.obstacles:
        c = ob.corners()
        lo = np.floor((c.min(axis=0) - inflation - np.array([xmin, ymin])) / res).astype(int) - 1
        hi = np.ceil((c.max(axis=0) + inflation - np.array([xmin, ymin])) / res).astype(int) + 1
        c0, r0 = max(lo[0], 0), max(lo[1], 0)
        c1, r1 = min(hi[0], cols), min(hi[1], rows)
        if c0 >= c1 or r0 >= r1:
            continue
        gx, gy = np.meshgrid(xs[c0:c1], ys[r0:r1])
        pts = np.stack([gx, gy], axis=-1)
        if inflation > 0:
            hit = ob.distance(pts) <= inflation + _EDGE_EPS
        else:
            hit = ob.contains(pts)
        grid[r0:r1, c0:c1] |= hit
    if inflation > 0:
        xmax, ymax = world.bounds[2], world.bounds[3]
        grid[:, (xs - xmin < inflation) | (xmax - xs < inflation)] = True
        grid[(ys - ymin < inflation) | (ymax - ys < inflation), :] = True
    return grid


def raycast_scan(world: WorldMap, origin: Sequence[float], r_fov: float = R_FOV,
                 n_beams: int = N_BEAMS) -> np.ndarray:
    """Ranges of ``n_beams`` beams, beam k at azimuth ``k * 360 / n_beams`` degrees.

    Each range is the distance to the nearest obstacle edge along the beam,
    clamped to ``r_fov``. Robots and map bounds are transparent.
    """
    o = np.asarray(origin, dtype=float)
    if world.point_in_obstacle(o):
        raise WorldError(f"scan origin {tuple(o)} is inside an obstacle")
    ranges = np.full(n_beams, float(r_fov))
    segs = world.edge_segments
    if len(segs) == 0:
        return ranges
    az = np.deg2rad(np.arange(n_beams) * (360.0 / n_beams))
    d = np.stack([np.cos(az), np.sin(az)], axis=1)  # (B, 2)
    a = segs[:, 0, :] - o  # (S, 2)
    e = segs[:, 1, :] - segs[:, 0, :]  # (S, 2)
    # solve o + t d = a0 + u e  ->  t d - u e = a
    denom = d[:, None, 0] * (-e[None, :, 1]) - d[:, None, 1] * (-e[None, :, 0])
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (a[None, :, 0] * (-e[None, :, 1]) - a[None, :, 1] * (-e[None, :, 0])) / denom
        u = (d[:, None, 0] * a[None, :, 1] - d[:, None, 1] * a[None, :, 0]) / denom
    ok = (np.abs(denom) > 1e-12) & (t >= 0.0) & (u >= -1e-12) & (u <= 1.0 + 1e-12)
    t = np.where(ok, t, np.inf)
    return np.minimum(ranges, t.min(axis=1))


def _segment_box_distance(p0: np.ndarray, p1: np.ndarray, half: np.ndarray) -> float:
    """Distance between a segment and an axis-aligned box centered at the origin."""
    # Liang-Barsky clip: zero distance if the segment enters the box
    d = p1 - p0
    t0, t1 = 0.0, 1.0
    inside = True
    for k in range(2):
        for p, q in ((-d[k], p0[k] + half[k]), (d[k], half[k] - p0[k])):
            if abs(p) < 1e-15:
                if q < 0:
                    inside = False
            else:
                t = q / p
                if p < 0:
                    t0 = max(t0, t)
                else:
                    t1 = min(t1, t)
    if inside and t0 <= t1:
        return 0.0

    def pt_box(p: np.ndarray) -> float:
        q = np.maximum(np.abs(p) - half, 0.0)
        return math.hypot(q[0], q[1])

    best = min(pt_box(p0), pt_box(p1))
    seg_len2 = float(d @ d)
    hx, hy = half
    for c in ((hx, hy), (-hx, hy), (-hx, -hy), (hx, -hy)):
        c = np.asarray(c)
        s = 0.0 if seg_len2 == 0 else min(max(float((c - p0) @ d) / seg_len2, 0.0), 1.0)
        q = p0 + s * d - c
        best = min(best, math.hypot(q[0], q[1]))
    return best


def segment_clearance(world: WorldMap, p0: Sequence[float], p1: Sequence[float]) -> float:
    """Smallest distance between segment p0-p1 and any obstacle."""
    a, b = np.asarray(p0, dtype=float), np.asarray(p1, dtype=float)
    best = math.inf
    for ob in world.obstacles:
        best = min(best, _segment_box_distance(ob.to_local(a), ob.to_local(b), ob.half_extents))
        if best == 0.0:
            break
    return best


def segment_collides(world: WorldMap, p0: Sequence[float], p1: Sequence[float],
                     radius: float = ROBOT_RADIUS) -> bool:
    """True iff the capsule swept by a disc of ``radius`` along p0-p1 touches an
    obstacle or leaves the map bounds."""
    if not (world.in_bounds(p0, radius) and world.in_bounds(p1, radius)):
        return True
    return segment_clearance(world, p0, p1) <= radius


def sample_free_position(world: WorldMap, radius: float, rng: np.random.Generator,
                         max_attempts: int = 10000) -> np.ndarray:
    xmin, ymin, xmax, ymax = world.bounds
    for _ in range(max_attempts):
        p = np.array([rng.uniform(xmin + radius, xmax - radius),
                      rng.uniform(ymin + radius, ymax - radius)])
        if not segment_collides(world, p, p, radius):
            return p
    raise WorldError(f"no free position with clearance {radius} after {max_attempts} attempts")
