"""A* expert, one-step-lookahead action labels and expert dataset generation."""
from __future__ import annotations

import hashlib
import heapq
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .percept import R_COM, build_comm_graph, relative_geometry
from .world import (ROBOT_RADIUS, R_FOV, MapGenConfig, WorldError, WorldMap, generate_map,
                    raycast_scan, rasterize, sample_free_position, segment_collides)

SQRT2 = math.sqrt(2.0)
STOP = 8
N_ACTIONS = 9
DIRECTIONS = np.array([[math.cos(k * math.pi / 4), math.sin(k * math.pi / 4)] for k in range(8)])
DATASET_TYPES = ("simple-grid", "simple-random", "complex-grid", "complex-random")
_NEIGHBORS = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0),
              (-1, -1, 1), (-1, 1, 1), (1, -1, 1), (1, 1, 1)]


class NoLabelError(RuntimeError):
    """Every direction is blocked; the sample has no expert label."""


@dataclass(frozen=True)
class ExpertConfig:
    l_step: float = 0.5
    goal_tolerance: float = 0.5
    inflation: float = ROBOT_RADIUS
    goal_mode: str = "distance"  # or "fov_visible"
    r_fov: float = R_FOV
    r_com: float = R_COM
    max_steps: Optional[int] = None

    def __post_init__(self) -> None:
        if self.l_step <= 0 or self.goal_tolerance <= 0:
            raise ValueError("l_step and goal_tolerance must be positive")
        if self.goal_mode not in ("distance", "fov_visible"):
            raise ValueError(f"unknown goal_mode {self.goal_mode!r}")

    def step_budget(self, world: WorldMap) -> int:
        if self.max_steps is not None:
            return self.max_steps
        xmin, ymin, xmax, ymax = world.bounds
        return 4 * math.ceil(math.hypot(xmax - xmin, ymax - ymin) / self.l_step)

    def reached(self, pos: Sequence[float], goal: Sequence[float]) -> bool:
        d = math.hypot(goal[0] - pos[0], goal[1] - pos[1])
        tol = self.r_fov if self.goal_mode == "fov_visible" else self.goal_tolerance
        return d <= tol


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------

def astar_grid(grid: np.ndarray, start: Tuple[int, int], goal: Tuple[int, int]) -> Optional[Tuple[int, int]]:
    """8-connected A* with the octile heuristic on a boolean grid (True = blocked).

    Returns the optimal move counts ``(straight, diagonal)`` or None. Costs are
    compared as ``straight + sqrt(2) * diagonal`` but kept as integers so the
    reported length is independent of summation order.
    """
    rows, cols = grid.shape
    if grid[start] or grid[goal]:
        return None
    gr, gc = goal

    def h(r: int, c: int) -> float:
        dr, dc = abs(r - gr), abs(c - gc)
        return (SQRT2 - 1.0) * min(dr, dc) + max(dr, dc)

    best: Dict[Tuple[int, int], Tuple[int, int]] = {start: (0, 0)}
    heap = [(h(*start), 0.0, start)]
    closed = set()
    while heap:
        _, g, node = heapq.heappop(heap)
        if node in closed:
            continue
        if node == goal:
            return best[node]
        closed.add(node)
        r, c = node
        a, b = best[node]
        for dr, dc, diag in _NEIGHBORS:
            nr, nc = r + dr, c + dc
            if not (0 <= nr < rows and 0 <= nc < cols) or grid[nr, nc]:
                continue
            nxt = (nr, nc)
            if nxt in closed:
                continue
            cand = (a + 1 - diag, b + diag)
            cg = cand[0] + SQRT2 * cand[1]
            old = best.get(nxt)
            if old is None or cg < old[0] + SQRT2 * old[1] - 1e-12:
                best[nxt] = cand
                heapq.heappush(heap, (cg + h(nr, nc), cg, nxt))
    return None


def astar_path_length(world: WorldMap, start: Sequence[float], goal: Sequence[float],
                      inflation: float = ROBOT_RADIUS, grid: Optional[np.ndarray] = None) -> float:
    """Shortest 8-connected grid path length in meters; ``inf`` when unreachable."""
    if grid is None:
        grid = rasterize(world, inflation)
    counts = astar_grid(grid, world.cell_of(start), world.cell_of(goal))
    if counts is None:
        return math.inf
    return world.resolution * (counts[0] + SQRT2 * counts[1])


def _grid_graph(grid: np.ndarray) -> coo_matrix:
    rows, cols = grid.shape
    free = ~grid
    idx = np.arange(rows * cols).reshape(rows, cols)
    src, dst, w = [], [], []
    for dr, dc, diag in _NEIGHBORS:
        r0, r1 = max(0, -dr), rows - max(0, dr)
        c0, c1 = max(0, -dc), cols - max(0, dc)
        ok = free[r0:r1, c0:c1] & free[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
        src.append(idx[r0:r1, c0:c1][ok])
        dst.append(idx[r0 + dr:r1 + dr, c0 + dc:c1 + dc][ok])
        w.append(np.full(int(ok.sum()), SQRT2 if diag else 1.0))
    n = rows * cols
    return coo_matrix((np.concatenate(w), (np.concatenate(src), np.concatenate(dst))), shape=(n, n))


class DistanceField:
    """Grid path length to one goal from every cell, via a single goal-rooted
    Dijkstra. Grid moves are symmetric, so a lookup equals the A* length."""

    def __init__(self, world: WorldMap, goal: Sequence[float], inflation: float = ROBOT_RADIUS,
                 grid: Optional[np.ndarray] = None, graph: Optional[coo_matrix] = None):
        self.world = world
        self.grid = rasterize(world, inflation) if grid is None else grid
        self.goal = np.asarray(goal, dtype=float)
        rows, cols = self.grid.shape
        gcell = world.cell_of(goal)
        if self.grid[gcell]:
            self.cells = np.full((rows, cols), np.inf)
        else:
            g = _grid_graph(self.grid).tocsr() if graph is None else graph
            dist = dijkstra(g, directed=False, indices=gcell[0] * cols + gcell[1])
            self.cells = dist.reshape(rows, cols) * world.resolution
            self.cells[self.grid] = np.inf

    def length_from(self, p: Sequence[float]) -> float:
        return float(self.cells[self.world.cell_of(p)])


class ExpertPlanner:
    """Caches the inflated grid and its graph for one map."""

    def __init__(self, world: WorldMap, cfg: ExpertConfig = ExpertConfig()):
        self.world = world
        self.cfg = cfg
        self.grid = rasterize(world, cfg.inflation)
        self._graph = _grid_graph(self.grid).tocsr()
        self._fields: Dict[Tuple[float, float], DistanceField] = {}

    def field(self, goal: Sequence[float]) -> DistanceField:
        key = (float(goal[0]), float(goal[1]))
        if key not in self._fields:
            self._fields[key] = DistanceField(self.world, goal, self.cfg.inflation,
                                              self.grid, self._graph)
        return self._fields[key]

    def path_length(self, start: Sequence[float], goal: Sequence[float]) -> float:
        return self.field(goal).length_from(start)

    def action_lengths(self, pos: Sequence[float], goal: Sequence[float]) -> np.ndarray:
        return estimate_action_lengths(self.world, pos, goal, self.cfg, self.field(goal))

    def label(self, pos: Sequence[float], goal: Sequence[float]) -> int:
        return expert_label(self.world, pos, goal, self.cfg, self.field(goal))


def estimate_action_lengths(world: WorldMap, pos: Sequence[float], goal: Sequence[float],
                            cfg: ExpertConfig = ExpertConfig(),
                            dist: Optional[DistanceField] = None) -> np.ndarray:
    """One step of ``l_step`` in each of the eight directions plus the grid path
    length from the landing point; ``inf`` where the step collides or the
    landing point cannot reach the goal."""
    if dist is None:
        dist = DistanceField(world, goal, cfg.inflation)
    p = np.asarray(pos, dtype=float)
    out = np.full(8, np.inf)
    for i, d in enumerate(DIRECTIONS):
        q = p + cfg.l_step * d
        if segment_collides(world, p, q, cfg.inflation):
            continue
        out[i] = cfg.l_step + dist.length_from(q)
    return out


def _angle_gap(a: float, b: float) -> float:
    g = abs(a - b) % (2 * math.pi)
    return min(g, 2 * math.pi - g)


def choose_direction(lengths: np.ndarray, bearing: float, tol: float = 1e-9) -> int:
    """Argmin over ``lengths``; ties go to the direction closest to ``bearing``,
    then to the smallest index."""
    best = float(np.min(lengths))
    if not math.isfinite(best):
        raise NoLabelError("all directions blocked")
    tied = [i for i in range(len(lengths)) if lengths[i] <= best + tol]
    return min(tied, key=lambda i: (round(_angle_gap(i * math.pi / 4, bearing), 9), i))


def expert_label(world: WorldMap, pos: Sequence[float], goal: Sequence[float],
                 cfg: ExpertConfig = ExpertConfig(), dist: Optional[DistanceField] = None) -> int:
    if cfg.reached(pos, goal):
        return STOP
    lengths = estimate_action_lengths(world, pos, goal, cfg, dist)
    bearing = math.atan2(goal[1] - pos[1], goal[0] - pos[0])
    return choose_direction(lengths, bearing)


# ---------------------------------------------------------------------------
# episodes and datasets
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    map_id: int
    robot_id: int
    timestep: int
    scan: List[float]
    neighbors: List[Tuple[int, float, float]]
    neighbors_in_fov: List[Tuple[float, float]]
    goal_rel: Tuple[float, float]
    label: int

    def to_json(self) -> str:
        d = asdict(self)
        d["scan"] = [round(float(x), 4) for x in self.scan]
        return json.dumps(d, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "Sample":
        return cls(map_id=d["map_id"], robot_id=d["robot_id"], timestep=d["timestep"],
                   scan=d["scan"], neighbors=[tuple(n) for n in d["neighbors"]],
                   neighbors_in_fov=[tuple(n) for n in d["neighbors_in_fov"]],
                   goal_rel=tuple(d["goal_rel"]), label=d["label"])


@dataclass
class Episode:
    samples: List[Sample]
    truncated: bool
    paths: Dict[int, List[np.ndarray]] = field(default_factory=dict)
    stuck: List[int] = field(default_factory=list)


def observe(world: WorldMap, ids: Sequence[int], positions: Sequence[np.ndarray],
            goals: Sequence[np.ndarray], r_com: float = R_COM, r_fov: float = R_FOV):
    """Per-robot (scan, comm neighbors, in-FOV neighbors, goal geometry).

    Expert robots pass through each other, so coincident pairs are possible
    here; they are left unconnected.
    """
    graph = build_comm_graph(ids, positions, r_com, skip_coincident=True)
    nbrs: Dict[int, List[Tuple[int, float, float]]] = {i: [] for i in ids}
    for e in graph.edges:
        nbrs[e.src].append((e.dst, e.r, e.theta))
    out = []
    for k, rid in enumerate(ids):
        scan = raycast_scan(world, positions[k], r_fov)
        gdx = goals[k] - positions[k]
        if gdx[0] == 0.0 and gdx[1] == 0.0:
            goal_rel = (0.0, 0.0)
        else:
            goal_rel = relative_geometry(positions[k], goals[k])
        in_fov = [(r, th) for _, r, th in nbrs[rid] if r <= r_fov]
        out.append((scan, nbrs[rid], in_fov, goal_rel))
    return graph, out


def generate_episode_samples(world: WorldMap, ids: Sequence[int], starts: Sequence[np.ndarray],
                             goals: Sequence[np.ndarray], cfg: ExpertConfig = ExpertConfig(),
                             map_id: int = 0, planner: Optional[ExpertPlanner] = None) -> Episode:
    """Step every robot synchronously along its expert labels, recording one
    sample per robot per timestep. Robots ignore each other."""
    planner = planner or ExpertPlanner(world, cfg)
    pos = [np.asarray(s, dtype=float).copy() for s in starts]
    goals = [np.asarray(g, dtype=float) for g in goals]
    stopped = [False] * len(ids)
    stuck: List[int] = []
    paths = {rid: [p.copy()] for rid, p in zip(ids, pos)}
    samples: List[Sample] = []
    budget = cfg.step_budget(world)
    t = 0
    while True:
        _, obs = observe(world, ids, pos, goals, cfg.r_com, cfg.r_fov)
        labels = []
        for k, rid in enumerate(ids):
            if stopped[k]:
                labels.append(STOP)
                continue
            try:
                labels.append(planner.label(pos[k], goals[k]))
            except NoLabelError:
                stopped[k] = True
                stuck.append(rid)
                labels.append(None)
        for k, rid in enumerate(ids):
            if labels[k] is None:
                continue
            scan, nbrs, in_fov, goal_rel = obs[k]
            samples.append(Sample(map_id, rid, t, [float(x) for x in scan],
                                  [(int(j), float(r), float(th)) for j, r, th in nbrs],
                                  [(float(r), float(th)) for r, th in in_fov],
                                  (float(goal_rel[0]), float(goal_rel[1])), int(labels[k])))
        for k in range(len(ids)):
            if labels[k] == STOP:
                stopped[k] = True
        if all(stopped):
            return Episode(samples, False, paths, stuck)
        if t >= budget:
            return Episode(samples, True, paths, stuck)
        for k, rid in enumerate(ids):
            if labels[k] is not None and labels[k] != STOP:
                pos[k] = pos[k] + cfg.l_step * DIRECTIONS[labels[k]]
                paths[rid].append(pos[k].copy())
        t += 1


@dataclass(frozen=True)
class DatasetConfig:
    map_size: float = 20.0
    resolution: float = 0.05
    obstacle_count: int = 40
    robots: int = 15
    grid_spacing: float = 3.0
    min_separation: float = 1.0
    expert: ExpertConfig = ExpertConfig()


def map_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _grid_starts(world: WorldMap, n: int, spacing: float, radius: float,
                 rng: np.random.Generator, attempts: int = 200) -> List[np.ndarray]:
    xmin, ymin, xmax, ymax = world.bounds
    for _ in range(attempts):
        off = rng.uniform(0.0, spacing, size=2)
        xs = np.arange(xmin + radius + off[0], xmax - radius, spacing)
        ys = np.arange(ymin + radius + off[1], ymax - radius, spacing)
        lattice = [np.array([x, y]) for y in ys for x in xs]
        free = [p for p in lattice if not segment_collides(world, p, p, radius)]
        if len(free) < n:
            continue
        anchor = free[int(rng.integers(len(free)))]
        free.sort(key=lambda p: (round(float(np.linalg.norm(p - anchor)), 9), p[1], p[0]))
        return free[:n]
    raise WorldError(f"could not place {n} robots on a {spacing} m lattice")


def _place_starts(world: WorldMap, n: int, layout: str, cfg: DatasetConfig,
                  rng: np.random.Generator, attempts: int) -> List[np.ndarray]:
    radius = cfg.expert.inflation
    if layout == "grid":
        return _grid_starts(world, n, cfg.grid_spacing, radius, rng)
    starts: List[np.ndarray] = []
    for _ in range(attempts * n):
        p = sample_free_position(world, radius, rng)
        if all(np.linalg.norm(p - q) >= cfg.min_separation for q in starts):
            starts.append(p)
            if len(starts) == n:
                return starts
    raise WorldError("could not place random starts")


def place_robots(world: WorldMap, n: int, layout: str, cfg: DatasetConfig,
                 rng: np.random.Generator, planner: ExpertPlanner,
                 attempts: int = 100, placements: int = 20) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Starts (lattice or random) and reachable, mutually separated goals.

    A start sealed in a small pocket may admit no goal; the whole placement
    is then redrawn.
    """
    radius = cfg.expert.inflation
    for _ in range(placements):
        starts = _place_starts(world, n, layout, cfg, rng, attempts)
        goals: List[np.ndarray] = []
        for s in starts:
            # the grid graph is undirected, so a field rooted at the start
            # gives every candidate goal's path length at once
            field = planner.field(s)
            for _ in range(attempts):
                g = sample_free_position(world, radius, rng)
                if any(np.linalg.norm(g - q) < cfg.min_separation for q in goals):
                    continue
                if math.isfinite(field.length_from(g)):
                    goals.append(g)
                    break
            else:
                break
        if len(goals) == n:
            return starts, goals
    raise WorldError("could not sample reachable goals for every robot")


def split_counts(n: int, ratio: Tuple[int, ...] = (3, 1, 1)) -> Tuple[int, ...]:
    """Largest-remainder apportionment of ``n`` items (train, val, test order)."""
    total = sum(ratio)
    ideal = [n * r / total for r in ratio]
    base = [int(math.floor(x)) for x in ideal]
    rem = sorted(range(len(ratio)), key=lambda k: (-(ideal[k] - base[k]), k))
    for k in rem[: n - sum(base)]:
        base[k] += 1
    return tuple(base)


def generate_map_episode(dataset_type: str, map_index: int, cfg: DatasetConfig, seed: int):
    if dataset_type not in DATASET_TYPES:
        raise ValueError(f"unknown dataset type {dataset_type!r}; expected one of {DATASET_TYPES}")
    angle_mode, layout = dataset_type.split("-")
    rng = map_rng(seed, map_index)
    world = generate_map(MapGenConfig(cfg.map_size, cfg.resolution, cfg.obstacle_count,
                                      angle_mode, seed), rng)
    planner = ExpertPlanner(world, cfg.expert)
    starts, goals = place_robots(world, cfg.robots, layout, cfg, rng, planner)
    ids = list(range(cfg.robots))
    episode = generate_episode_samples(world, ids, starts, goals, cfg.expert, map_index, planner)
    return world, starts, goals, episode


def _sha256(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def generate_dataset(dataset_type: str, n_maps: int, cfg: DatasetConfig, seed: int,
                     out_dir: str) -> dict:
    """Write maps, per-map NDJSON samples and ``manifest.json`` to ``out_dir``.

    Maps (never individual samples) are assigned to train/val/test 3:1:1.
    """
    if dataset_type not in DATASET_TYPES:
        raise ValueError(f"unknown dataset type {dataset_type!r}; expected one of {DATASET_TYPES}")
    if n_maps < 1:
        raise ValueError("n_maps must be >= 1")
    os.makedirs(os.path.join(out_dir, "maps"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "samples"), exist_ok=True)
    maps = []
    for m in range(n_maps):
        world, starts, goals, ep = generate_map_episode(dataset_type, m, cfg, seed)
        map_file = f"maps/map_{m:04d}.json"
        sample_file = f"samples/map_{m:04d}.ndjson"
        record = world.to_dict()
        record["starts"] = [list(map(float, s)) for s in starts]
        record["goals"] = [list(map(float, g)) for g in goals]
        with open(os.path.join(out_dir, map_file), "w") as fh:
            json.dump(record, fh, sort_keys=True)
        with open(os.path.join(out_dir, sample_file), "w") as fh:
            for s in ep.samples:
                fh.write(s.to_json() + "\n")
        hist = np.bincount([s.label for s in ep.samples], minlength=N_ACTIONS)
        maps.append({"map_id": m, "map_file": map_file, "sample_file": sample_file,
                     "samples": len(ep.samples), "truncated": ep.truncated,
                     "stuck_robots": ep.stuck, "label_histogram": hist.tolist(),
                     "sha256": _sha256(os.path.join(out_dir, sample_file))})
    n_train, n_val, n_test = split_counts(n_maps)
    order = np.random.default_rng([seed, 2**31 - 1]).permutation(n_maps).tolist()
    split_of = {}
    for k, m in enumerate(order):
        split_of[m] = "train" if k < n_train else ("val" if k < n_train + n_val else "test")
    for rec in maps:
        rec["split"] = split_of[rec["map_id"]]
    manifest = {
        "format": "geomrpp-dataset", "version": 1,
        "dataset_type": dataset_type, "seed": seed, "n_maps": n_maps,
        "config": {**{k: v for k, v in asdict(cfg).items() if k != "expert"},
                   "expert": asdict(cfg.expert)},
        "maps": maps,
        "split_maps": {s: sorted(m for m, v in split_of.items() if v == s)
                       for s in ("train", "val", "test")},
        "split_samples": {s: sum(r["samples"] for r in maps if r["split"] == s)
                          for s in ("train", "val", "test")},
        "label_histogram": np.sum([r["label_histogram"] for r in maps], axis=0).tolist(),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_samples(out_dir: str, manifest: Optional[dict] = None,
                 split: Optional[str] = None) -> List[Sample]:
    if manifest is None:
        with open(os.path.join(out_dir, "manifest.json")) as fh:
            manifest = json.load(fh)
    samples = []
    for rec in manifest["maps"]:
        if split is not None and rec["split"] != split:
            continue
        with open(os.path.join(out_dir, rec["sample_file"])) as fh:
            samples.extend(Sample.from_dict(json.loads(line)) for line in fh if line.strip())
    return samples
