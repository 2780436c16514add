"""Finite-difference gradient checks for every operator and model variant.

Central differences cannot resolve a gradient coordinate much smaller than
``ulp(f) / eps``, and they are meaningless when the perturbation crosses a
ReLU or max-pool kink. Instances are therefore drawn until they are
FD-resolvable (kink margin and smallest nonzero gradient above fixed floors);
the number of redraws is reported with each result.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable, Dict, Iterator, List, Sequence, Tuple

import numpy as np

from .autodiff import Parameter, Tensor, fd_conditioning, grad_check, ops
from .geognn import BasisConfig, GeoGNN, GraphBatch, ModelConfig
from .percept import build_comm_graph

EPS = 1e-6
TOLERANCE = 1e-4
MIN_KINK_MARGIN = 1e-4
MIN_RELATIVE_GRAD = 1e-7
MAX_REDRAWS = 50

Case = Tuple[Callable[[], Tensor], List[Tensor]]


@dataclass
class CheckResult:
    name: str
    trial: int
    error: float
    redraws: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _projected(out: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    """Scalar ``sum(out * R)`` with a fixed random R of matching shape."""
    probe = out()
    r = Tensor(rng.normal(size=probe.shape))
    return lambda: (out() * r).sum()


def _p(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Parameter:
    return Parameter(rng.normal(scale=scale, size=shape))


def op_cases(rng: np.random.Generator) -> Dict[str, Case]:
    cases: Dict[str, Case] = {}

    a, b = _p(rng, 3, 4), _p(rng, 4)
    cases["add_broadcast"] = (_projected(lambda: a + b, rng), [a, b])
    a2, b2 = _p(rng, 3, 4), _p(rng, 3, 1)
    cases["mul_broadcast"] = (_projected(lambda: a2 * b2 - a2, rng), [a2, b2])
    m1, m2 = _p(rng, 3, 5), _p(rng, 5, 2)
    cases["matmul"] = (_projected(lambda: m1 @ m2, rng), [m1, m2])
    s = _p(rng, 2, 3, 4)
    q = Tensor(rng.normal(size=(4, 2)))
    cases["sum_mean_reshape"] = (lambda: (s * s).mean() + (s.reshape(6, 4) @ q).sum(), [s])

    x = _p(rng, 4, 6)
    cases["relu"] = (_projected(lambda: ops.relu(x), rng), [x])
    cases["ssp"] = (_projected(lambda: ops.ssp(x), rng), [x])
    w, bias = _p(rng, 3, 6), _p(rng, 3)
    cases["linear"] = (_projected(lambda: ops.linear(x, w, bias), rng), [x, w, bias])

    for stride, pad in ((1, 1), (1, 0), (2, 1)):
        xi, k, kb = _p(rng, 2, 3, 7, 6), _p(rng, 4, 3, 3, 3), _p(rng, 4)
        cases[f"conv2d_s{stride}_p{pad}"] = (
            _projected(lambda xi=xi, k=k, kb=kb, st=stride, pd=pad: ops.conv2d(xi, k, kb, st, pd), rng),
            [xi, k, kb])

    xm = _p(rng, 2, 3, 5, 6)
    cases["maxpool2d"] = (_projected(lambda: ops.maxpool2d(xm, 2), rng), [xm])

    xb, g, be = _p(rng, 3, 2, 4, 4), Parameter(rng.uniform(0.5, 1.5, 2)), _p(rng, 2)
    cases["batchnorm2d_train"] = (
        _projected(lambda: ops.batchnorm2d(xb, g, be, True, None, None)[0], rng), [xb, g, be])
    rm, rv = rng.normal(size=2), rng.uniform(0.5, 2.0, 2)
    cases["batchnorm2d_eval"] = (
        _projected(lambda: ops.batchnorm2d(xb, g, be, False, rm, rv)[0], rng), [xb, g, be])

    lg = _p(rng, 5, 9)
    labels = rng.integers(0, 9, size=5)
    cases["softmax_cross_entropy"] = (lambda: ops.softmax_cross_entropy(lg, labels), [lg])

    src = _p(rng, 4, 3)
    idx = np.array([2, 0, 2, 3, 1])
    cases["gather_rows"] = (_projected(lambda: ops.gather_rows(src, idx), rng), [src])
    seg = _p(rng, 6, 3)
    buckets = np.array([0, 2, 2, 1, 0, 2])
    cases["segment_sum"] = (_projected(lambda: ops.segment_sum(seg, buckets, 4), rng), [seg])
    c1, c2 = _p(rng, 2, 3), _p(rng, 3, 3)
    cases["concat_rows"] = (_projected(lambda: ops.concat_rows([c1, c2]), rng), [c1, c2])
    return cases


MODEL_VARIANTS: Tuple[Tuple[str, str, int, str], ...] = (
    ("cnn", "cnn", 0, "bbf-sbf"),
    ("geognn_h1_bbf-sbf", "geognn", 1, "bbf-sbf"),
    ("geognn_h2_bbf-sbf", "geognn", 2, "bbf-sbf"),
    ("geognn_h3_bbf-sbf", "geognn", 3, "bbf-sbf"),
    ("geognn_h2_rbf", "geognn", 2, "rbf"),
    ("geognn_h2_none", "geognn", 2, "none"),
)

SMALL_BASIS = BasisConfig(n_bbf=3, n_sbf_radial=2, l_sbf_max=2, n_rbf=3)


def model_case(kind: str, hops: int, pos_enc: str, seed: int, n_robots: int = 3) -> Case:
    """Cross-entropy of a tiny model over a random connected robot graph."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(model=kind, feature_dim=4, hops=max(hops, 1), position_encoding=pos_enc,
                      basis=SMALL_BASIS, encoder_widths=(2, 2, 2), d=16, seed=seed)
    model = GeoGNN(cfg)
    model.train()
    pos = rng.uniform(0.0, 3.0, size=(n_robots, 2))
    graph = GraphBatch.from_comm_graph(build_comm_graph(list(range(n_robots)), pos, 5.0))
    maps = Tensor(rng.normal(size=(n_robots, 3, cfg.d, cfg.d)))
    labels = rng.integers(0, cfg.action_count, size=n_robots)

    def f() -> Tensor:
        logits, _ = model.forward(maps, graph)
        return ops.softmax_cross_entropy(logits, labels)

    return f, model.parameters()


def resolvable(f: Callable[[], Tensor], inputs: Sequence[Tensor]) -> bool:
    margin, weakest = fd_conditioning(f, inputs)
    return margin >= MIN_KINK_MARGIN and weakest >= MIN_RELATIVE_GRAD


def _checked(name: str, trial: int, draw: Callable[[int], Case]) -> CheckResult:
    t0 = time.perf_counter()
    for redraw in range(MAX_REDRAWS):
        f, inputs = draw(redraw)
        if resolvable(f, inputs):
            break
    err = grad_check(f, inputs, eps=EPS)
    return CheckResult(name, trial, err, redraw, time.perf_counter() - t0)


def run_op_checks(trials: int = 20, seed: int = 0) -> Iterator[CheckResult]:
    names = list(op_cases(np.random.default_rng(seed)))
    for trial in range(trials):
        for name in names:
            yield _checked(name, trial,
                           lambda k, n=name: op_cases(np.random.default_rng([seed, trial, k]))[n])


def run_model_checks(trials: int = 20, seed: int = 0,
                     variants: Sequence[Tuple[str, str, int, str]] = MODEL_VARIANTS) -> Iterator[CheckResult]:
    for name, kind, hops, pe in variants:
        for trial in range(trials):
            yield _checked(name, trial,
                           lambda k, kd=kind, h=hops, p=pe: model_case(kd, h, p, seed * 100003 + trial * 101 + k))


def summarize(results: Sequence[CheckResult]) -> dict:
    by: Dict[str, List[CheckResult]] = {}
    for r in results:
        by.setdefault(r.name, []).append(r)
    return {
        "tolerance": TOLERANCE,
        "eps": EPS,
        "passed": all(r.passed for r in results),
        "checks": {n: {"trials": len(v), "max_error": max(r.error for r in v),
                       "redraws": sum(r.redraws for r in v), "passed": all(r.passed for r in v)}
                   for n, v in by.items()},
        "results": [asdict(r) for r in results],
    }
