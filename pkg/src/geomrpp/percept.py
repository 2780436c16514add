"""Per-robot observation maps and the communication graph."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .world import R_FOV, TWO_PI

R_COM = 5.0


@dataclass(frozen=True)
class PerceptConfig:
    d: int = 100
    r_fov: float = R_FOV
    goal_arc_deg: float = 3.0

    @property
    def cell_size(self) -> float:
        return 2.0 * self.r_fov / self.d


@dataclass(frozen=True)
class EdgeGeom:
    src: int
    dst: int
    r: float
    theta: float  # bearing of dst seen from src


@dataclass
class CommGraph:
    nodes: List[int]
    edges: List[EdgeGeom] = field(default_factory=list)

    def neighbors(self, node: int) -> List[int]:
        return [e.dst for e in self.edges if e.src == node]

    def adjacency(self) -> Dict[int, List[int]]:
        adj: Dict[int, List[int]] = {n: [] for n in self.nodes}
        for e in self.edges:
            adj[e.src].append(e.dst)
        return adj

    def edge_arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(src_index, dst_index, r, theta) with indices into ``self.nodes``."""
        pos = {n: k for k, n in enumerate(self.nodes)}
        src = np.array([pos[e.src] for e in self.edges], dtype=np.int64)
        dst = np.array([pos[e.dst] for e in self.edges], dtype=np.int64)
        r = np.array([e.r for e in self.edges], dtype=float)
        th = np.array([e.theta for e in self.edges], dtype=float)
        return src, dst, r, th


def relative_geometry(p_i: Sequence[float], p_j: Sequence[float]) -> Tuple[float, float]:
    """Distance and bearing in [0, 2pi) of point j as seen from point i."""
    dx = float(p_j[0]) - float(p_i[0])
    dy = float(p_j[1]) - float(p_i[1])
    if dx == 0.0 and dy == 0.0:
        raise ValueError("coincident positions have no bearing")
    return math.hypot(dx, dy), math.atan2(dy, dx) % TWO_PI


def build_comm_graph(ids: Sequence[int], positions: Sequence[Sequence[float]],
                     r_com: float = R_COM, skip_coincident: bool = False) -> CommGraph:
    """Edges in both directions between every pair closer than ``r_com``.

    Coincident robots have no bearing; they raise unless ``skip_coincident``,
    in which case that pair simply gets no edge.
    """
    if len(ids) == 0:
        raise ValueError("empty robot set")
    if len(set(ids)) != len(ids):
        raise ValueError("robot ids must be unique")
    edges = []
    order = sorted(range(len(ids)), key=lambda k: ids[k])
    for a_k, a in enumerate(order):
        for b in order[a_k + 1:]:
            if skip_coincident and np.array_equal(np.asarray(positions[a], dtype=float),
                                                  np.asarray(positions[b], dtype=float)):
                continue
            r, th = relative_geometry(positions[a], positions[b])
            if r < r_com:
                edges.append(EdgeGeom(ids[a], ids[b], r, th))
                edges.append(EdgeGeom(ids[b], ids[a], r, (th + math.pi) % TWO_PI))
    return CommGraph(nodes=sorted(ids), edges=edges)


def _cell_index(x: np.ndarray, cfg: PerceptConfig) -> np.ndarray:
    idx = np.floor((x + cfg.r_fov) / cfg.cell_size + 1e-9).astype(np.int64)
    return np.clip(idx, 0, cfg.d - 1)


def _mark(grid: np.ndarray, dx: np.ndarray, dy: np.ndarray, cfg: PerceptConfig) -> None:
    grid[_cell_index(np.asarray(dy), cfg), _cell_index(np.asarray(dx), cfg)] = 1


def build_channel_map(scan: np.ndarray, neighbors_in_fov: Iterable[Tuple[float, float]],
                      goal_rel: Tuple[float, float],
                      cfg: Optional[PerceptConfig] = None) -> np.ndarray:
    """Three binary d x d channels (local map, neighbors, goal), robot at center.

    Row index runs along +y and column index along +x in the shared frame.
    """
    cfg = cfg or PerceptConfig()
    out = np.zeros((3, cfg.d, cfg.d), dtype=np.uint8)
    scan = np.asarray(scan, dtype=float)
    az = np.deg2rad(np.arange(len(scan)) * (360.0 / len(scan)))
    _mark(out[0], scan * np.cos(az), scan * np.sin(az), cfg)

    for r, th in neighbors_in_fov:
        if r <= cfg.r_fov:
            _mark(out[1], np.array([r * math.cos(th)]), np.array([r * math.sin(th)]), cfg)

    g_r, g_th = goal_rel
    if g_r <= cfg.r_fov:
        _mark(out[2], np.array([g_r * math.cos(g_th)]), np.array([g_r * math.sin(g_th)]), cfg)
    else:
        arc = np.deg2rad(np.linspace(-cfg.goal_arc_deg, cfg.goal_arc_deg, 25)) + g_th
        _mark(out[2], cfg.r_fov * np.cos(arc), cfg.r_fov * np.sin(arc), cfg)
    return out
