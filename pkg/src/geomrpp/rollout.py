"""Closed-loop multi-robot execution with per-robot message passing and the
static / priority / loop safety filters."""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable, Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import no_grad
from .expert import (DIRECTIONS, STOP, ExpertConfig, ExpertPlanner, estimate_action_lengths,
                     observe)
from .geognn import GeoGNN
from .percept import R_COM, CommGraph, PerceptConfig, build_channel_map
from .world import R_FOV, ROBOT_RADIUS, WorldMap, segment_collides

STEP_VECTORS = np.vstack([DIRECTIONS, np.zeros((1, 2))])


@dataclass(frozen=True)
class RolloutConfig:
    l_step: float = 0.5
    max_steps: Optional[int] = None  # None: 4 * ceil(map diagonal / l_step)
    loop_window: int = 8
    loop_repeat_threshold: int = 2
    goal_tolerance: float = 0.5
    robot_radius: float = ROBOT_RADIUS
    r_com: float = R_COM
    r_fov: float = R_FOV

    def __post_init__(self) -> None:
        if self.max_steps is not None and self.max_steps <= 0:
            raise ValueError("max_steps must be positive")
        if self.loop_window < 2:
            raise ValueError("loop_window must be >= 2")
        if self.l_step <= 0 or self.goal_tolerance <= 0:
            raise ValueError("l_step and goal_tolerance must be positive")

    def step_budget(self, world: WorldMap) -> int:
        if self.max_steps is not None:
            return self.max_steps
        xmin, ymin, xmax, ymax = world.bounds
        return 4 * math.ceil(math.hypot(xmax - xmin, ymax - ymin) / self.l_step)


@dataclass
class RobotRuntime:
    id: int
    pos: np.ndarray
    goal: np.ndarray
    start: np.ndarray
    history: Deque[Tuple[int, int]]
    reached: bool = False
    path_length: float = 0.0
    reached_step: Optional[int] = None
    inbox: List[Tuple[int, int, np.ndarray]] = field(default_factory=list)
    announced: Optional[np.ndarray] = None

    @classmethod
    def create(cls, rid: int, start, goal, cfg: RolloutConfig) -> "RobotRuntime":
        start = np.asarray(start, dtype=float).copy()
        r = cls(rid, start.copy(), np.asarray(goal, dtype=float), start, deque(maxlen=cfg.loop_window))
        r.history.append(r.cell_of(start, cfg))
        return r

    def cell_of(self, p: np.ndarray, cfg: RolloutConfig) -> Tuple[int, int]:
        """Loop-check cell of side l_step, anchored so the start is a cell
        center (axis moves then always land on another cell center)."""
        k = np.rint((np.asarray(p) - self.start) / cfg.l_step).astype(int)
        return int(k[0]), int(k[1])


@dataclass
class EpisodeResult:
    robot_id: int
    path_length: float
    reached: bool
    expert_length: float
    steps: int

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# decisions
# ---------------------------------------------------------------------------

def channel_maps(world: WorldMap, robots: Sequence[RobotRuntime], percept: PerceptConfig,
                 cfg: RolloutConfig) -> Tuple[CommGraph, np.ndarray, list]:
    ids = [r.id for r in robots]
    graph, obs = observe(world, ids, [r.pos for r in robots], [r.goal for r in robots],
                         cfg.r_com, cfg.r_fov)
    maps = np.stack([build_channel_map(scan, in_fov, goal_rel, percept)
                     for scan, _, in_fov, goal_rel in obs])
    return graph, maps, obs


def exchange_and_decide(robots: Sequence[RobotRuntime], graph: CommGraph, maps: np.ndarray,
                        model: GeoGNN) -> np.ndarray:
    """Synchronous per-robot protocol; returns logits (N, actions) in robot order.

    Round 0 encodes each robot's own map and broadcasts it; round l updates
    each robot from the layer l-1 features in its inbox; the mapper runs on
    the final feature. Edge geometry is what the receiver measures.
    """
    was = model.training
    model.eval()
    index = {r.id: k for k, r in enumerate(robots)}
    geom: Dict[int, List[Tuple[int, float, float]]] = {r.id: [] for r in robots}
    for e in graph.edges:
        geom[e.src].append((e.dst, e.r, e.theta))
    with no_grad():
        feats = [model.encode(maps[k:k + 1].astype(np.float64)) for k in range(len(robots))]
        for layer_idx, layer in enumerate(model.layers):
            for r in robots:
                r.inbox = []
            for k, r in enumerate(robots):
                for dst, _, _ in geom[r.id]:
                    robots[index[dst]].inbox.append((r.id, layer_idx, feats[k].data[0]))
            new = []
            for k, r in enumerate(robots):
                got = {src: f for src, l, f in r.inbox if l == layer_idx}
                nbrs = sorted(geom[r.id])
                new.append(layer.node_update(feats[k], [got[j] for j, _, _ in nbrs],
                                             [g[1] for g in nbrs], [g[2] for g in nbrs]))
            feats = new
        logits = np.vstack([model.mapper(f).data for f in feats])
    model.train(was)
    return logits


Policy = Callable[[WorldMap, Sequence[RobotRuntime]], np.ndarray]


class ModelPolicy:
    def __init__(self, model: GeoGNN, cfg: RolloutConfig, percept: Optional[PerceptConfig] = None):
        self.model = model
        self.cfg = cfg
        self.percept = percept or PerceptConfig(d=model.cfg.d, r_fov=cfg.r_fov)

    def __call__(self, world: WorldMap, robots: Sequence[RobotRuntime]) -> np.ndarray:
        graph, maps, _ = channel_maps(world, robots, self.percept, self.cfg)
        return exchange_and_decide(robots, graph, maps, self.model)


class ExpertPolicy:
    """Scores ``-l_hat`` for the eight moves; stop scores highest once the
    goal is within tolerance and lowest otherwise."""

    def __init__(self, world: WorldMap, cfg: RolloutConfig, inflation: float = ROBOT_RADIUS):
        self.ecfg = ExpertConfig(l_step=cfg.l_step, goal_tolerance=cfg.goal_tolerance,
                                 inflation=inflation, r_fov=cfg.r_fov, r_com=cfg.r_com)
        self.planner = ExpertPlanner(world, self.ecfg)

    def __call__(self, world: WorldMap, robots: Sequence[RobotRuntime]) -> np.ndarray:
        out = np.full((len(robots), 9), -np.inf)
        for k, r in enumerate(robots):
            if self.ecfg.reached(r.pos, r.goal):
                out[k, STOP] = 0.0
                continue
            lengths = estimate_action_lengths(world, r.pos, r.goal, self.ecfg,
                                              self.planner.field(r.goal))
            out[k, :8] = -lengths
            best = self.planner.label(r.pos, r.goal) if np.isfinite(lengths).any() else STOP
            out[k, best] = np.inf  # tie-broken expert label goes first
        return out


def candidate_order(scores: np.ndarray) -> List[int]:
    """All nine actions by descending score, so the proposed (argmax) action
    comes first; equal scores keep index order."""
    return [int(a) for a in np.argsort(-np.asarray(scores, dtype=float), kind="stable")]


@dataclass
class FilterDecision:
    action: int
    rejected: List[Tuple[int, str]]

    def to_dict(self) -> dict:
        return {"action": self.action, "rejected": [list(x) for x in self.rejected]}


def safety_filter(robot: RobotRuntime, scores: np.ndarray, world: WorldMap,
                  higher: Sequence[Tuple[np.ndarray, Optional[np.ndarray]]],
                  cfg: RolloutConfig) -> FilterDecision:
    """First candidate passing the static, priority and loop checks.

    ``higher`` holds (current position, announced next position) of every
    higher-priority robot in communication range.
    """
    rejected: List[Tuple[int, str]] = []
    min_gap = 2.0 * cfg.robot_radius
    for a in candidate_order(scores):
        end = robot.pos + cfg.l_step * STEP_VECTORS[a]
        if a != STOP and segment_collides(world, robot.pos, end, cfg.robot_radius):
            rejected.append((a, "static"))
            continue
        if any(np.linalg.norm(end - cur) <= min_gap
               or (nxt is not None and np.linalg.norm(end - nxt) <= min_gap) for cur, nxt in higher):
            rejected.append((a, "priority"))
            continue
        if a != STOP and list(robot.history).count(robot.cell_of(end, cfg)) >= cfg.loop_repeat_threshold:
            rejected.append((a, "loop"))
            continue
        return FilterDecision(a, rejected)
    return FilterDecision(STOP, rejected)


def resolve_conflicts(positions: np.ndarray, actions: List[int],
                      cfg: RolloutConfig) -> Tuple[List[int], List[int]]:
    """Turn moves into stops until no two end positions are within 2 rho.

    A lower-priority robot whose only option was the fallback stop can be
    left where a higher-priority robot chose to go; the mover then yields.
    Stops at the current positions are mutually safe, so this terminates.
    Returns the final actions and the indices whose move was revoked.
    """
    actions = list(actions)
    revoked = []
    gap = 2.0 * cfg.robot_radius
    while True:
        ends = positions + cfg.l_step * STEP_VECTORS[actions]
        clash = None
        for i in range(len(actions)):
            for j in range(i + 1, len(actions)):
                if np.linalg.norm(ends[i] - ends[j]) <= gap:
                    clash = (i, j)
                    break
            if clash:
                break
        if clash is None:
            return actions, revoked
        i, j = clash
        mover = i if actions[i] != STOP else j
        if actions[mover] == STOP:
            raise RuntimeError("robots started a step within 2 rho of each other")
        actions[mover] = STOP
        revoked.append(mover)


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

def run_episode(world: WorldMap, starts: Sequence, goals: Sequence, policy: Policy,
                cfg: RolloutConfig = RolloutConfig(), ids: Optional[Sequence[int]] = None,
                planner: Optional[ExpertPlanner] = None,
                trace: Optional[List[dict]] = None) -> List[EpisodeResult]:
    """Run until every robot is within tolerance of its goal or the step
    budget is spent. Lower id means higher priority."""
    n = len(starts)
    ids = list(range(n)) if ids is None else list(ids)
    planner = planner or ExpertPlanner(world, ExpertConfig(l_step=cfg.l_step, inflation=cfg.robot_radius))
    expert_len = [planner.path_length(s, g) for s, g in zip(starts, goals)]
    if not all(math.isfinite(x) for x in expert_len):
        raise ValueError("every goal must be reachable from its start")
    robots = sorted((RobotRuntime.create(i, s, g, cfg) for i, s, g in zip(ids, starts, goals)),
                    key=lambda r: r.id)
    pos0 = np.array([r.pos for r in robots])
    for a in range(n):
        for b in range(a + 1, n):
            if np.linalg.norm(pos0[a] - pos0[b]) <= 2 * cfg.robot_radius:
                raise ValueError("start positions must be more than 2 rho apart")
    for r in robots:
        if np.linalg.norm(r.pos - r.goal) <= cfg.goal_tolerance:
            r.reached, r.reached_step = True, 0
    budget = cfg.step_budget(world)
    t = 0
    while t < budget and not all(r.reached for r in robots):
        scores = policy(world, robots)
        positions = np.array([r.pos for r in robots])
        in_range = np.linalg.norm(positions[:, None] - positions[None], axis=-1) < cfg.r_com
        decisions: List[FilterDecision] = []
        for k, r in enumerate(robots):
            higher = [(robots[j].pos, robots[j].announced) for j in range(k) if in_range[k, j]]
            if r.reached:
                dec = FilterDecision(STOP, [])
            else:
                dec = safety_filter(r, scores[k], world, higher, cfg)
            r.announced = r.pos + cfg.l_step * STEP_VECTORS[dec.action]
            decisions.append(dec)
        chosen = [d.action for d in decisions]
        final, revoked = resolve_conflicts(positions, chosen, cfg)
        if trace is not None:
            trace.append({
                "t": t,
                "positions": positions.tolist(),
                "proposed": [int(np.argmax(s)) for s in scores],
                "filtered": chosen,
                "final": final,
                "revoked": revoked,
                "rejected": [[list(x) for x in d.rejected] for d in decisions],
            })
        for k, r in enumerate(robots):
            r.announced = None
            if final[k] != STOP:
                r.pos = r.pos + cfg.l_step * STEP_VECTORS[final[k]]
                r.path_length += cfg.l_step
                r.history.append(r.cell_of(r.pos, cfg))
        t += 1
        for r in robots:
            if not r.reached and np.linalg.norm(r.pos - r.goal) <= cfg.goal_tolerance:
                r.reached, r.reached_step = True, t
    if trace is not None:
        trace.append({"t": t, "positions": [r.pos.tolist() for r in robots], "final": None})
    by_id = {r.id: r for r in robots}
    return [EpisodeResult(i, by_id[i].path_length, by_id[i].reached, expert_len[k],
                          by_id[i].reached_step if by_id[i].reached else t)
            for k, i in enumerate(ids)]


def metrics(results: Sequence[EpisodeResult]) -> Tuple[float, float]:
    """(flowtime increase in percent over reached robots, success rate)."""
    if not results:
        raise ValueError("no results")
    ft = [(r.path_length - r.expert_length) / r.expert_length
          for r in results if r.reached and r.expert_length > 0]
    sr = sum(r.reached for r in results) / len(results)
    return (100.0 * float(np.mean(ft)) if ft else float("nan")), float(sr)


# ---------------------------------------------------------------------------
# audit and output
# ---------------------------------------------------------------------------

def segment_hits_obstacle(world: WorldMap, p0, p1, radius: float, spacing: float = 0.005) -> bool:
    """Dense sampling along the segment; exact distance only for the narrow
    band where sampling is inconclusive."""
    p0, p1 = np.asarray(p0, dtype=float), np.asarray(p1, dtype=float)
    if not (world.in_bounds(p0, radius) and world.in_bounds(p1, radius)):
        return True
    n = max(2, int(math.ceil(np.linalg.norm(p1 - p0) / spacing)) + 1)
    pts = p0 + np.linspace(0.0, 1.0, n)[:, None] * (p1 - p0)
    sampled = float(world.clearance(pts).min())
    if sampled <= radius:
        return True
    if sampled - spacing > radius:
        return False
    return segment_collides(world, p0, p1, radius)


def audit_trace(world: WorldMap, trace: Sequence[dict], cfg: RolloutConfig) -> Tuple[int, int]:
    """(static collisions, priority violations) over every executed step.

    A priority violation is a lower-priority robot ending within 2 rho of a
    higher-priority robot's start or end position in the same step, or any
    two robots ending within 2 rho.
    """
    collisions = violations = 0
    gap = 2.0 * cfg.robot_radius
    for k, step in enumerate(trace):
        if step.get("final") is None:
            continue
        cur = np.asarray(step["positions"])
        end = np.asarray(trace[k + 1]["positions"])
        for i in range(len(cur)):
            if not np.allclose(cur[i], end[i]) and segment_hits_obstacle(world, cur[i], end[i],
                                                                         cfg.robot_radius):
                collisions += 1
        for j in range(len(cur)):
            for i in range(j):
                if np.linalg.norm(end[j] - end[i]) <= gap:
                    violations += 1
                elif not np.allclose(cur[j], end[j]) and np.linalg.norm(end[j] - cur[i]) <= gap:
                    violations += 1
    return collisions, violations


def write_trace(path: str, trace: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def plot_episode(world: WorldMap, trace: Sequence[dict], goals: Sequence, path: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Polygon

    fig, ax = plt.subplots(figsize=(6, 6))
    for ob in world.obstacles:
        ax.add_patch(Polygon(ob.corners(), closed=True, color="0.4"))
    pos = np.array([rec["positions"] for rec in trace]).reshape(len(trace), -1, 2)
    for k in range(pos.shape[1] if len(trace) else 0):
        line, = ax.plot(pos[:, k, 0], pos[:, k, 1], lw=1.2)
        ax.plot(pos[0, k, 0], pos[0, k, 1], "o", color=line.get_color(), ms=4)
        ax.plot(goals[k][0], goals[k][1], "*", color=line.get_color(), ms=9)
    xmin, ymin, xmax, ymax = world.bounds
    ax.set_xlim(xmin, xmax)
    ax.set_ylim(ymin, ymax)
    ax.set_aspect("equal")
    fig.savefig(path, dpi=100)
    plt.close(fig)
