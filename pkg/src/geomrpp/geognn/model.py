"""Mini-VGG encoder, geometric interaction layers and the action mapper."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..autodiff import BatchNorm2d, Conv2d, Linear, Module, Tensor, no_grad
from ..autodiff import ops
from ..percept import CommGraph
from .basis import BasisConfig, bbf, rbf, sbf

POSITION_ENCODINGS = ("none", "rbf", "bbf-sbf")
MODEL_KINDS = ("cnn", "geognn")


@dataclass(frozen=True)
class ModelConfig:
    model: str = "geognn"
    feature_dim: int = 128
    hops: int = 2
    position_encoding: str = "bbf-sbf"
    basis: BasisConfig = BasisConfig()
    encoder_widths: Tuple[int, int, int] = (32, 64, 128)
    d: int = 100
    action_count: int = 9
    seed: int = 0

    def __post_init__(self) -> None:
        if self.model not in MODEL_KINDS:
            raise ValueError(f"unknown model {self.model!r}")
        if self.position_encoding not in POSITION_ENCODINGS:
            raise ValueError(f"unknown position encoding {self.position_encoding!r}")
        if self.model == "geognn" and self.hops < 1:
            raise ValueError("geognn needs hops >= 1")
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")
        if self.d // 8 < 1:
            raise ValueError(f"d={self.d} is too small for three 2x poolings")

    @property
    def n_layers(self) -> int:
        return 0 if self.model == "cnn" else self.hops

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["basis"] = BasisConfig(**d["basis"])
        d["encoder_widths"] = tuple(d["encoder_widths"])
        return cls(**d)


@dataclass
class GraphBatch:
    """Message-passing edges for a set of nodes.

    Node ``recv[e]`` receives from node ``nbr[e]``; ``r[e]``/``theta[e]`` give
    the sender's distance and bearing as seen from the receiver.
    """
    n_nodes: int
    recv: np.ndarray
    nbr: np.ndarray
    r: np.ndarray
    theta: np.ndarray

    @classmethod
    def from_comm_graph(cls, graph: CommGraph) -> "GraphBatch":
        src, dst, r, th = graph.edge_arrays()
        return cls(len(graph.nodes), src, dst, r, th)

    @classmethod
    def empty(cls, n: int) -> "GraphBatch":
        z = np.zeros(0, dtype=np.int64)
        return cls(n, z, z, np.zeros(0), np.zeros(0))


class Encoder(Module):
    """Three blocks of Conv-BN-ReLU-MaxPool then Conv-BN-ReLU, flatten, Linear."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.convs: List[Conv2d] = []
        self.norms: List[BatchNorm2d] = []
        c_in, size = 3, cfg.d
        for w in cfg.encoder_widths:
            self.convs += [Conv2d(c_in, w, rng), Conv2d(w, w, rng)]
            self.norms += [BatchNorm2d(w), BatchNorm2d(w)]
            c_in, size = w, size // 2
        self.fc = Linear(c_in * size * size, cfg.feature_dim, rng, init="glorot")

    def forward(self, x: Tensor) -> Tensor:
        for k in range(0, len(self.convs), 2):
            x = ops.relu(self.norms[k](self.convs[k](x)))
            x = ops.maxpool2d(x, 2)
            x = ops.relu(self.norms[k + 1](self.convs[k + 1](x)))
        return self.fc(x.flatten())


class LinSSP(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.lin = Linear(n_in, n_out, rng, init="glorot")

    def forward(self, x: Tensor) -> Tensor:
        return ops.ssp(self.lin(x))


class DimeConv(Module):
    """Neighbor message: LinSSP, Hadamard gates from the encoded geometry, LinSSP."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        f = cfg.feature_dim
        self.mode = cfg.position_encoding
        self.basis = cfg.basis
        self.pre = LinSSP(f, f, rng)
        self.post = LinSSP(f, f, rng)
        if self.mode == "bbf-sbf":
            self.dense_bbf = Linear(cfg.basis.n_bbf, f, rng, bias=False, init="glorot")
            self.dense_sbf = Linear(cfg.basis.n_sbf, f, rng, bias=False, init="glorot")
        elif self.mode == "rbf":
            self.dense_rbf = Linear(cfg.basis.n_rbf, f, rng, bias=False, init="glorot")

    def encode_edges(self, r: np.ndarray, theta: np.ndarray) -> Tuple[np.ndarray, ...]:
        if self.mode == "bbf-sbf":
            return bbf(r, self.basis), sbf(r, theta, self.basis)
        if self.mode == "rbf":
            return (rbf(r, self.basis),)
        return ()

    def messages(self, pre_nbr: Tensor, geometry: Tuple[np.ndarray, ...]) -> Tensor:
        """``pre_nbr`` holds ``pre(f_j)`` gathered per edge."""
        m = pre_nbr
        if self.mode == "bbf-sbf":
            m = m * self.dense_bbf(Tensor(geometry[0]))
            m = m * self.dense_sbf(Tensor(geometry[1]))
        elif self.mode == "rbf":
            m = m * self.dense_rbf(Tensor(geometry[0]))
        return self.post(m)

    def forward(self, f_nbr: Tensor, r: np.ndarray, theta: np.ndarray) -> Tensor:
        return self.messages(self.pre(f_nbr), self.encode_edges(r, theta))


class InteractionLayer(Module):
    """``v = LinSSP(f_i) + sum_j DimeConv(f_j, r_ij, theta_ij)``; ``f_i + LinSSP(v)``."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        f = cfg.feature_dim
        self.self_path = LinSSP(f, f, rng)
        self.conv = DimeConv(cfg, rng)
        self.update = LinSSP(f, f, rng)

    def forward(self, f: Tensor, graph: GraphBatch,
                geometry: Optional[Tuple[np.ndarray, ...]] = None) -> Tensor:
        if geometry is None:
            geometry = self.conv.encode_edges(graph.r, graph.theta)
        v = self.self_path(f)
        if len(graph.recv):
            pre = ops.gather_rows(self.conv.pre(f), graph.nbr)
            msgs = self.conv.messages(pre, geometry)
            v = v + ops.segment_sum(msgs, graph.recv, graph.n_nodes)
        return f + self.update(v)

    def node_update(self, f_self: Tensor, nbr_feats: Sequence[np.ndarray],
                    r: Sequence[float], theta: Sequence[float]) -> Tensor:
        """One robot's update from its own feature and its inbox."""
        k = len(nbr_feats)
        stacked = f_self if k == 0 else ops.concat_rows([f_self, Tensor(np.stack(nbr_feats))])
        graph = GraphBatch(k + 1, np.zeros(k, dtype=np.int64), np.arange(1, k + 1),
                           np.asarray(r, dtype=float), np.asarray(theta, dtype=float))
        return ops.gather_rows(self.forward(stacked, graph), np.array([0]))


OUT_INIT_SCALE = 0.1


class ActionMapper(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.hidden = Linear(cfg.feature_dim, cfg.feature_dim, rng, init="he")
        self.out = Linear(cfg.feature_dim, cfg.action_count, rng, init="glorot")
        # small output weights: an untrained model starts near the uniform
        # prediction, so its first loss is close to log(action_count)
        self.out.weight.data *= OUT_INIT_SCALE

    def forward(self, f: Tensor) -> Tensor:
        return self.out(ops.relu(self.hidden(f)))


class GeoGNN(Module):
    """Encoder + ``hops`` interaction layers + action mapper (``hops = 0`` for
    the CNN-only baseline)."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.encoder = Encoder(cfg, rng)
        self.layers = [InteractionLayer(cfg, rng) for _ in range(cfg.n_layers)]
        self.mapper = ActionMapper(cfg, rng)
        self.init_running_stats()

    def init_running_stats(self) -> None:
        for m in self.modules():
            if isinstance(m, BatchNorm2d):
                m.reset_running_stats()

    def encode(self, maps) -> Tensor:
        x = maps if isinstance(maps, Tensor) else Tensor(np.asarray(maps, dtype=np.float64))
        if x.ndim != 4 or x.shape[1:] != (3, self.cfg.d, self.cfg.d):
            raise ValueError(f"expected maps of shape (N, 3, {self.cfg.d}, {self.cfg.d}), got {x.shape}")
        return self.encoder(x)

    def forward(self, maps, graph: Optional[GraphBatch] = None) -> Tuple[Tensor, List[Tensor]]:
        """Logits (N, actions) and the per-layer features ``[f0, ..., fh]``."""
        f = self.encode(maps)
        n = f.shape[0]
        if graph is None:
            graph = GraphBatch.empty(n)
        if graph.n_nodes != n:
            raise ValueError(f"graph has {graph.n_nodes} nodes but {n} channel maps were given")
        feats = [f]
        if self.layers:
            geometry = self.layers[0].conv.encode_edges(graph.r, graph.theta) if len(graph.recv) else ()
            for layer in self.layers:
                f = layer(f, graph, geometry)
                feats.append(f)
        return self.mapper(f), feats

    def predict(self, maps, graph: Optional[GraphBatch] = None) -> np.ndarray:
        was = self.training
        self.eval()
        with no_grad():
            logits, _ = self.forward(maps, graph)
        self.train(was)
        return logits.data


def forward_centralized(model: GeoGNN, graph: CommGraph, channel_maps: np.ndarray):
    """Forward pass over a whole communication graph, nodes in ``graph.nodes`` order."""
    return model.forward(channel_maps, GraphBatch.from_comm_graph(graph))


def action_of(logits: np.ndarray) -> int:
    """Argmax of the logits (equal to the argmax of their softmax); lowest index on ties."""
    return int(np.argmax(np.asarray(logits)))
