"""Imitation training on expert datasets: ego-graph batching, Adam, accuracy."""
from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Adam, ReduceLROnPlateau, Tensor, no_grad, ops, save_checkpoint
from .expert import Sample, load_samples
from .geognn import GeoGNN, GraphBatch
from .percept import PerceptConfig, build_channel_map

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 16
    iterations_per_epoch: int = 1000
    epochs: int = 100
    seed: int = 0
    scheduler_factor: float = 0.5
    scheduler_patience: int = 5
    scheduler_threshold: float = 1e-4
    supervision: str = "center"  # or "full": every labeled node in the ego-graph
    restarts: int = 1

    def __post_init__(self) -> None:
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        if self.batch_size < 1 or self.iterations_per_epoch < 1 or self.epochs < 0:
            raise ValueError("batch_size and iterations_per_epoch must be positive, epochs >= 0")
        if self.supervision not in ("center", "full"):
            raise ValueError(f"unknown supervision {self.supervision!r}")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


@dataclass
class TrainReport:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_accuracy: List[float] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_accuracy: float = float("nan")
    checkpoint: Optional[str] = None
    restart: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


class NonFiniteLoss(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

class SampleSet:
    """One split held in memory: uint8 channel maps, labels and the
    per-timestep neighbor structure needed to cut ego-graphs."""

    def __init__(self, samples: Sequence[Sample], percept: PerceptConfig):
        self.samples = list(samples)
        self.percept = percept
        n = len(self.samples)
        self.maps = np.zeros((n, 3, percept.d, percept.d), dtype=np.uint8)
        for k, s in enumerate(self.samples):
            self.maps[k] = build_channel_map(np.asarray(s.scan), s.neighbors_in_fov, s.goal_rel, percept)
        self.labels = np.array([s.label for s in self.samples], dtype=np.int64)
        self.row = {(s.map_id, s.timestep, s.robot_id): k for k, s in enumerate(self.samples)}
        groups: Dict[Tuple[int, int], List[int]] = {}
        for k, s in enumerate(self.samples):
            groups.setdefault((s.map_id, s.timestep), []).append(k)
        self.groups = [sorted(v, key=lambda k: self.samples[k].robot_id)
                       for _, v in sorted(groups.items())]

    def __len__(self) -> int:
        return len(self.samples)

    @classmethod
    def load(cls, dataset_dir: str, split: str, percept: PerceptConfig,
             manifest: Optional[dict] = None) -> "SampleSet":
        return cls(load_samples(dataset_dir, manifest, split), percept)

    def _links(self, k: int) -> List[Tuple[int, float, float]]:
        s = self.samples[k]
        out = []
        for j, r, th in s.neighbors:
            other = self.row.get((s.map_id, s.timestep, j))
            if other is not None:
                out.append((other, r, th))
        return out

    def ego_graph(self, center: int, hops: int) -> Tuple[List[int], GraphBatch]:
        """Rows within ``hops`` of ``center`` (center first) and the edges
        among them. Robots with no sample at that timestep are skipped."""
        seen = {center: 0}
        order = [center]
        queue = deque([center])
        while queue:
            k = queue.popleft()
            if seen[k] == hops:
                continue
            for j, _, _ in self._links(k):
                if j not in seen:
                    seen[j] = seen[k] + 1
                    order.append(j)
                    queue.append(j)
        return order, self._induced(order)

    def _induced(self, rows: List[int]) -> GraphBatch:
        local = {k: i for i, k in enumerate(rows)}
        recv, nbr, rs, ths = [], [], [], []
        for k in rows:
            for j, r, th in self._links(k):
                if j in local:
                    recv.append(local[k])
                    nbr.append(local[j])
                    rs.append(r)
                    ths.append(th)
        return GraphBatch(len(rows), np.array(recv, dtype=np.int64), np.array(nbr, dtype=np.int64),
                          np.array(rs, dtype=float), np.array(ths, dtype=float))

    def group_graph(self, rows: List[int]) -> GraphBatch:
        return self._induced(rows)


@dataclass
class Batch:
    rows: np.ndarray      # sample rows, one per node
    graph: GraphBatch     # disjoint union of ego-graphs
    centers: np.ndarray   # node index of each ego-graph center
    labels: np.ndarray    # label per node


def union(parts: Sequence[Tuple[List[int], GraphBatch]], labels: np.ndarray) -> Batch:
    rows, recv, nbr, rs, ths, centers = [], [], [], [], [], []
    off = 0
    for nodes, g in parts:
        centers.append(off)
        rows.extend(nodes)
        recv.append(g.recv + off)
        nbr.append(g.nbr + off)
        rs.append(g.r)
        ths.append(g.theta)
        off += len(nodes)
    graph = GraphBatch(off, np.concatenate(recv).astype(np.int64), np.concatenate(nbr).astype(np.int64),
                       np.concatenate(rs), np.concatenate(ths))
    rows_a = np.array(rows, dtype=np.int64)
    return Batch(rows_a, graph, np.array(centers, dtype=np.int64), labels[rows_a])


def make_batches(split: SampleSet, batch_size: int, hops: int, seed: int,
                 epochs: Optional[int] = None) -> Iterator[Batch]:
    """Endless (or ``epochs``-long) stream of ego-graph batches.

    Each pass over the split uses a fresh permutation drawn from one seeded
    generator, so the sequence is a pure function of ``seed``.
    """
    if len(split) == 0:
        raise ValueError("cannot batch an empty split")
    rng = np.random.default_rng(seed)
    done = 0
    while epochs is None or done < epochs:
        perm = rng.permutation(len(split))
        for a in range(0, len(perm), batch_size):
            chunk = perm[a:a + batch_size]
            yield union([split.ego_graph(int(k), hops) for k in chunk], split.labels)
        done += 1


def _stream(split: SampleSet, batch_size: int, hops: int, seed: int) -> Iterator[Batch]:
    """Fixed-size batches drawn from a seeded permutation cycle."""
    rng = np.random.default_rng(seed)
    buf: List[int] = []
    while True:
        while len(buf) < batch_size:
            buf.extend(int(k) for k in rng.permutation(len(split)))
        chunk, buf = buf[:batch_size], buf[batch_size:]
        yield union([split.ego_graph(k, hops) for k in chunk], split.labels)


def _maps(split: SampleSet, rows: np.ndarray) -> Tensor:
    return Tensor(split.maps[rows].astype(np.float64))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict_split(model: GeoGNN, split: SampleSet, groups_per_batch: int = 16) -> np.ndarray:
    """Eval-mode logits for every sample, each timestep forwarded over its
    whole communication graph (as at deployment)."""
    if len(split) == 0:
        raise ValueError("empty split")
    was = model.training
    model.eval()
    out = np.zeros((len(split), model.cfg.action_count))
    with no_grad():
        for a in range(0, len(split.groups), groups_per_batch):
            parts = []
            for rows in split.groups[a:a + groups_per_batch]:
                parts.append((rows, split.group_graph(rows)))
            b = union(parts, split.labels)
            logits, _ = model.forward(_maps(split, b.rows), b.graph)
            out[b.rows] = logits.data
    model.train(was)
    return out


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty split")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def accuracy(model: GeoGNN, split: SampleSet) -> float:
    return accuracy_from_logits(predict_split(model, split), split.labels)


def mean_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(ops.softmax_cross_entropy(Tensor(logits), labels).data)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _batch_loss(model: GeoGNN, split: SampleSet, b: Batch, supervision: str) -> Tensor:
    logits, _ = model.forward(_maps(split, b.rows), b.graph)
    if supervision == "center":
        return ops.softmax_cross_entropy(ops.gather_rows(logits, b.centers), b.labels[b.centers])
    return ops.softmax_cross_entropy(logits, b.labels)


def _snapshot(model: GeoGNN):
    return ({n: p.data.copy() for n, p in model.named_parameters()},
            {n: None if v is None else v.copy() for n, v in model.named_buffers()})


def _restore(model: GeoGNN, snap) -> None:
    params, buffers = snap
    model.load_state_dict(params)
    for n, v in buffers.items():
        model.set_buffer(n, None if v is None else v.copy())


def train_once(model: GeoGNN, train_set: SampleSet, val_set: SampleSet, cfg: TrainConfig,
               checkpoint_path: Optional[str] = None, header: Optional[dict] = None,
               seed: Optional[int] = None) -> TrainReport:
    seed = cfg.seed if seed is None else seed
    names = [n for n, _ in model.named_parameters()]
    for p in model.parameters():
        p.m, p.v, p.step = np.zeros_like(p.data), np.zeros_like(p.data), 0
    opt = Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, names=names)
    sched = ReduceLROnPlateau(opt, cfg.scheduler_factor, cfg.scheduler_patience, cfg.scheduler_threshold)
    report = TrainReport(checkpoint=checkpoint_path)
    best = _snapshot(model)
    best_acc = -math.inf
    batches = _stream(train_set, cfg.batch_size, model.cfg.n_layers, seed)
    model.train()
    for epoch in range(cfg.epochs):
        total = 0.0
        for it in range(cfg.iterations_per_epoch):
            b = next(batches)
            opt.zero_grad()
            loss = _batch_loss(model, train_set, b, cfg.supervision)
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise NonFiniteLoss(f"non-finite loss {lv} at epoch {epoch} iteration {it} "
                                    f"(lr={opt.lr:g}, batch rows {b.rows[:8].tolist()}...)")
            loss.backward()
            opt.step()
            total += lv
        logits = predict_split(model, val_set)
        v_loss = mean_loss(logits, val_set.labels)
        v_acc = accuracy_from_logits(logits, val_set.labels)
        report.train_loss.append(total / cfg.iterations_per_epoch)
        report.val_loss.append(v_loss)
        report.val_accuracy.append(v_acc)
        report.lr.append(opt.lr)
        log.info("epoch %d train %.4f val %.4f acc %.4f lr %g", epoch, report.train_loss[-1],
                 v_loss, v_acc, opt.lr)
        if v_acc > best_acc:
            best_acc, report.best_epoch = v_acc, epoch
            best = _snapshot(model)
        sched.step(v_loss)
    _restore(model, best)
    if report.best_epoch >= 0:
        report.best_val_accuracy = best_acc
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, header)
    return report


def train(model: GeoGNN, train_set: SampleSet, val_set: SampleSet, cfg: TrainConfig,
          checkpoint_path: Optional[str] = None, header: Optional[dict] = None) -> TrainReport:
    """Train ``cfg.restarts`` times from the same initialization with
    different batch orders; keep the run with the best validation accuracy."""
    if len(train_set) == 0 or (cfg.epochs > 0 and len(val_set) == 0):
        raise ValueError("training needs non-empty train and val splits")
    init = _snapshot(model)
    best_report, best_state = None, None
    for k in range(cfg.restarts):
        _restore(model, init)
        rep = train_once(model, train_set, val_set, cfg, None, header, seed=cfg.seed + k)
        rep.restart = k
        score = rep.best_val_accuracy if rep.best_epoch >= 0 else -math.inf
        if best_report is None or score > (best_report.best_val_accuracy
                                           if best_report.best_epoch >= 0 else -math.inf):
            best_report, best_state = rep, _snapshot(model)
    _restore(model, best_state)
    best_report.checkpoint = checkpoint_path
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, header)
    return best_report
