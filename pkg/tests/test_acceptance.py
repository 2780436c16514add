"""Acceptance suite: the ten end-to-end criteria at their stated tolerances.

Each test prints one ``ACCEPTANCE <n> PASS|FAIL`` line (visible without -s)
and then asserts. Criteria 7 and 8 share one desk-scale training run of the
three models; expect the whole file to take about an hour on one core.
"""
import hashlib
import json
import math
import os
import shutil
import subprocess
import sys
import time

import numpy as np
import pytest
from conftest import box_world
from oracles import C, SQ2, dijkstra_oracle, mp_bbf, mp_sbf_radial, mp_y0

from geomrpp.expert import (DatasetConfig, ExpertConfig, ExpertPlanner, astar_path_length,
                            generate_dataset, generate_episode_samples, map_rng, place_robots)
from geomrpp.geognn import BasisConfig, GeoGNN, GraphBatch, ModelConfig, bbf, sbf
from geomrpp.geognn.model import forward_centralized
from geomrpp.gradsuite import MODEL_VARIANTS, TOLERANCE, run_model_checks, run_op_checks, summarize
from geomrpp.percept import PerceptConfig
from geomrpp.rollout import (ModelPolicy, RobotRuntime, RolloutConfig, audit_trace, channel_maps,
                             exchange_and_decide, run_episode)
from geomrpp.train import SampleSet, TrainConfig, accuracy, train
from geomrpp.world import MapGenConfig, generate_map

DESK_MAP = MapGenConfig(map_size=10.0, resolution=0.05, obstacle_count=10, angle_mode="simple")
DESK_DATA = DatasetConfig(map_size=10.0, obstacle_count=10, robots=9, grid_spacing=3.0)


def verdict(capsys, n, title, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {n:2d} {'PASS' if ok else 'FAIL'}: {title} | {detail}", flush=True)
    assert ok, detail


def desk_world(seed, index):
    rng = map_rng(seed, index)
    return generate_map(MapGenConfig(**{**DESK_MAP.__dict__, "seed": seed}), rng), rng


# -- 1 ------------------------------------------------------------------------

def test_01_gradient_checks(capsys):
    t0 = time.perf_counter()
    results = list(run_op_checks(trials=20, seed=0)) + list(run_model_checks(trials=20, seed=0))
    elapsed = time.perf_counter() - t0
    s = summarize(results)
    names = set(s["checks"])
    covered = {v[0] for v in MODEL_VARIANTS} <= names
    # every variant the criterion lists: cnn, hops 1-3, all three encodings
    assert {("cnn", 0), ("geognn", 1), ("geognn", 2), ("geognn", 3)} <= {(k, h) for _, k, h, _ in MODEL_VARIANTS}
    assert {pe for _, k, _, pe in MODEL_VARIANTS if k == "geognn"} == {"none", "rbf", "bbf-sbf"}
    worst = max(r.error for r in results)
    trials_ok = all(c["trials"] == 20 for c in s["checks"].values())
    ok = s["passed"] and worst < TOLERANCE == 1e-4 and covered and trials_ok and elapsed < 300
    verdict(capsys, 1, "gradient checks", ok,
            f"{len(names)} checks x 20 trials, max rel err {worst:.2e}, {elapsed:.0f} s")


# -- 2 ------------------------------------------------------------------------

def test_02_basis_oracles(capsys):
    cfg = BasisConfig()
    rs = np.linspace(5.0 / 50, 5.0, 50)               # (0, 5]
    ths = np.arange(20) * 2 * math.pi / 20             # [0, 2 pi)
    R, T = np.meshgrid(rs, ths, indexing="ij")
    got_b = bbf(R.ravel(), cfg).reshape(50, 20, -1)
    got_s = sbf(R.ravel(), T.ravel(), cfg).reshape(50, 20, -1)
    err = 0.0
    for n in range(1, cfg.n_bbf + 1):
        want = np.array([float(mp_bbf(r, n)) for r in rs])
        err = max(err, float(np.max(np.abs(got_b[:, :, n - 1] - want[:, None]))))
    for l in range(cfg.l_sbf_max + 1):
        ang = np.array([float(mp_y0(l, t)) for t in ths])
        for n in range(1, cfg.n_sbf_radial + 1):
            rad = np.array([float(mp_sbf_radial(r, l, n)) for r in rs])
            col = l * cfg.n_sbf_radial + (n - 1)
            err = max(err, float(np.max(np.abs(got_s[:, :, col] - rad[:, None] * ang[None, :]))))
    at_cutoff = float(np.max(np.abs(bbf(np.array([C]), cfg))))
    verdict(capsys, 2, "basis oracles", err < 1e-9 and at_cutoff < 1e-12,
            f"max abs err {err:.1e} over 50x20 grid, |bbf(c)| = {at_cutoff:.1e}")


# -- 3 ------------------------------------------------------------------------

def test_03_planner_oracle(capsys):
    world = box_world(2.5, resolution=0.05)            # 50 x 50 cells
    assert world.shape == (50, 50)
    t0 = time.perf_counter()
    mismatches = reachable = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        grid = rng.random((50, 50)) < 0.3
        free = np.argwhere(~grid)
        for _ in range(4):
            (r0, c0), (r1, c1) = free[rng.choice(len(free), 2, replace=False)]
            start = ((c0 + 0.5) * 0.05, (r0 + 0.5) * 0.05)
            goal = ((c1 + 0.5) * 0.05, (r1 + 0.5) * 0.05)
            got = astar_path_length(world, start, goal, grid=grid)
            ref = dijkstra_oracle(grid, (int(r0), int(c0)), (int(r1), int(c1)))
            want = math.inf if ref is None else 0.05 * (ref[0] + SQ2 * ref[1])
            mismatches += got != want
            reachable += ref is not None
    elapsed = time.perf_counter() - t0
    verdict(capsys, 3, "A* equals Dijkstra", mismatches == 0 and elapsed < 30,
            f"200 queries on 50 grids ({reachable} reachable), {mismatches} mismatches, {elapsed:.1f} s")


# -- 4 ------------------------------------------------------------------------

def test_04_label_soundness(capsys):
    cfg = ExpertConfig()
    dcfg = DatasetConfig(map_size=10.0, obstacle_count=10, robots=1)
    good = 0
    worst = 0.0
    for k in range(100):
        world, rng = desk_world(4, k)
        planner = ExpertPlanner(world, cfg)
        (start,), (goal,) = place_robots(world, 1, "random", dcfg, rng, planner)
        ep = generate_episode_samples(world, [0], [start], [goal], cfg, planner=planner)
        path = np.array(ep.paths[0])
        length = float(np.sum(np.linalg.norm(np.diff(path, axis=0), axis=1)))
        ref = astar_path_length(world, start, goal, cfg.inflation)
        reached = not ep.truncated and np.linalg.norm(path[-1] - goal) <= cfg.goal_tolerance
        bound_ok = length <= 1.10 * ref + cfg.l_step
        good += bool(reached and bound_ok)
        worst = max(worst, (length - cfg.l_step) / ref if ref > 0 else 0.0)
    verdict(capsys, 4, "expert label soundness", good >= 99,
            f"{good}/100 reached within 1.10 x A* + l_step (worst (l - l_step)/A* = {worst:.3f})")


# -- 5 ------------------------------------------------------------------------

def test_05_decentralized_equivalence(capsys):
    percept = PerceptConfig(d=32)
    dcfg = DatasetConfig(map_size=10.0, obstacle_count=10, robots=6)
    variants = [(h, pe) for h in (1, 2, 3) for pe in ("bbf-sbf", "rbf", "none")]
    worst, edges = 0.0, 0
    for k in range(50):
        hops, pe = variants[k % len(variants)]
        model = GeoGNN(ModelConfig(feature_dim=16, hops=hops, position_encoding=pe, d=32,
                                   encoder_widths=(4, 8, 8), seed=k))
        world, rng = desk_world(5, k)
        starts, goals = place_robots(world, 6, "random", dcfg, rng, ExpertPlanner(world))
        robots = [RobotRuntime.create(i, s, g, RolloutConfig()) for i, (s, g) in enumerate(zip(starts, goals))]
        graph, maps, _ = channel_maps(world, robots, percept, RolloutConfig())
        edges += len(graph.edges)
        dec = exchange_and_decide(robots, graph, maps, model)
        cen = forward_centralized(model.eval(), graph, maps.astype(float))[0].data
        worst = max(worst, float(np.max(np.abs(dec - cen))))
    verdict(capsys, 5, "decentralized equals centralized", worst < 1e-9 and edges > 0,
            f"50 configurations x 6 robots, {edges} directed edges, max abs logit diff {worst:.1e}")


# -- 6 ------------------------------------------------------------------------

def test_06_safety_invariants(capsys):
    cfg = RolloutConfig()
    dcfg = DatasetConfig(map_size=10.0, obstacle_count=10, robots=6)
    model = GeoGNN(ModelConfig(feature_dim=16, hops=2, d=32, encoder_widths=(4, 8, 8), seed=6))
    policy = ModelPolicy(model, cfg, PerceptConfig(d=32))
    collisions = violations = steps = moves = 0
    for k in range(100):
        world, rng = desk_world(6, k)
        planner = ExpertPlanner(world)
        starts, goals = place_robots(world, 6, "random", dcfg, rng, planner)
        trace = []
        run_episode(world, starts, goals, policy, cfg, planner=planner, trace=trace)
        c, v = audit_trace(world, trace, cfg)
        collisions, violations = collisions + c, violations + v
        steps += len(trace) - 1
        moves += sum(a != 8 for rec in trace if rec["final"] is not None for a in rec["final"])
    verdict(capsys, 6, "safety invariants", collisions == 0 and violations == 0,
            f"100 random-weight rollouts, {steps} steps, {moves} robot moves, "
            f"{collisions} collisions, {violations} priority violations")


# -- 7 and 8 --------------------------------------------------------------------

DESK_TRAIN = TrainConfig(epochs=20, iterations_per_epoch=200, seed=0)
DESK_PERCEPT = PerceptConfig(d=32)


def desk_model(kind, pe="bbf-sbf"):
    return GeoGNN(ModelConfig(model=kind, feature_dim=64, hops=2, position_encoding=pe, d=32,
                              encoder_widths=(8, 16, 32), seed=0))


@pytest.fixture(scope="module")
def desk_protocol(tmp_path_factory):
    """40-map simple-grid dataset; CNN, GeoGNN bbf-sbf and GeoGNN none
    trained identically. Returns test accuracies, models and timings."""
    t0 = time.perf_counter()
    out = str(tmp_path_factory.mktemp("desk40"))
    manifest = generate_dataset("simple-grid", 40, DESK_DATA, 0, out)
    splits = {s: SampleSet.load(out, s, DESK_PERCEPT, manifest) for s in ("train", "val", "test")}
    res = {"samples": {s: len(v) for s, v in splits.items()}, "acc": {}, "models": {}}
    for name, kind, pe in (("cnn", "cnn", "bbf-sbf"), ("geognn", "geognn", "bbf-sbf"),
                           ("none", "geognn", "none")):
        m = desk_model(kind, pe)
        train(m, splits["train"], splits["val"], DESK_TRAIN)
        res["acc"][name] = accuracy(m, splits["test"])
        res["models"][name] = m
    res["test"] = splits["test"]
    res["elapsed"] = time.perf_counter() - t0
    return res


def test_07_geognn_beats_cnn(capsys, desk_protocol):
    p = desk_protocol
    total = sum(p["samples"].values())
    gap = p["acc"]["geognn"] - p["acc"]["cnn"]
    ok = gap >= 0.02 and total >= 5000 and p["elapsed"] < 7200
    verdict(capsys, 7, "GeoGNN 2-hop beats CNN by >= 2 pp", ok,
            f"test acc GeoGNN {p['acc']['geognn']:.4f} vs CNN {p['acc']['cnn']:.4f} "
            f"(gap {100 * gap:+.2f} pp), {total} samples, protocol {p['elapsed'] / 60:.0f} min")


def _perturbed_logits(model, split, rows, dr=0.0, dth=0.0):
    graph = split.group_graph(rows)
    g = GraphBatch(graph.n_nodes, graph.recv, graph.nbr, np.clip(graph.r + dr, 1e-3, 4.999),
                   graph.theta + dth)
    return model.predict(split.maps[rows].astype(float), g)


def test_08_encoding_ablation(capsys, desk_protocol):
    p = desk_protocol
    test = p["test"]
    rows = max(test.groups, key=len)
    assert len(test.group_graph(rows).recv) > 0
    none = p["models"]["none"]
    base = _perturbed_logits(none, test, rows)
    none_blind = (np.array_equal(base, _perturbed_logits(none, test, rows, dr=0.7))
                  and np.array_equal(base, _perturbed_logits(none, test, rows, dth=1.3)))
    rbf_model = desk_model("geognn", "rbf")
    base = _perturbed_logits(rbf_model, test, rows)
    rbf_ok = (np.array_equal(base, _perturbed_logits(rbf_model, test, rows, dth=1.3))
              and not np.array_equal(base, _perturbed_logits(rbf_model, test, rows, dr=0.7)))
    geo = p["models"]["geognn"]
    base = _perturbed_logits(geo, test, rows)
    sees_both = (not np.array_equal(base, _perturbed_logits(geo, test, rows, dr=0.7))
                 and not np.array_equal(base, _perturbed_logits(geo, test, rows, dth=1.3)))
    ordered = p["acc"]["geognn"] >= p["acc"]["none"]
    verdict(capsys, 8, "bbf-sbf >= none, geometry blindness exact",
            ordered and none_blind and rbf_ok and sees_both,
            f"test acc bbf-sbf {p['acc']['geognn']:.4f} vs none {p['acc']['none']:.4f}; "
            f"none blind {none_blind}, rbf blind to theta only {rbf_ok}, bbf-sbf sees r and theta {sees_both}")


# -- 9 ------------------------------------------------------------------------

def test_09_expert_rollout(capsys, tmp_path):
    out = str(tmp_path / "expert")
    r = subprocess.run([sys.executable, "-m", "geomrpp.cli", "rollout", "--profile", "desk",
                        "--policy", "expert", "--maps", "20", "--robots", "1", "--seed", "9",
                        "--out", out], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    m = json.load(open(os.path.join(out, "metrics.json")))
    ok = m["ft_percent"] <= 5.0 and m["sr"] >= 0.98 and m["collisions"] == 0
    verdict(capsys, 9, "expert-policy rollout", ok,
            f"20 single-robot desk maps, FT {m['ft_percent']:.2f} %, SR {m['sr']:.2f}")


# -- 10 -----------------------------------------------------------------------

def _snapshot(path):
    out = {}
    for root, _, files in os.walk(path):
        for f in sorted(files):
            full = os.path.join(root, f)
            out[os.path.relpath(full, path)] = hashlib.sha256(open(full, "rb").read()).hexdigest()
    return out


def _twice(args, out):
    """Run the CLI twice into the same directory; return both byte snapshots."""
    snaps = []
    for _ in range(2):
        shutil.rmtree(out, ignore_errors=True)
        r = subprocess.run([sys.executable, "-m", "geomrpp.cli", *args, "--out", out],
                           capture_output=True, text=True)
        assert r.returncode == 0, r.stderr
        snaps.append(_snapshot(out))
    return snaps


def test_10_determinism(capsys, tmp_path):
    ds, tr, ro = (str(tmp_path / n) for n in ("ds", "train", "rollout"))
    a = _twice(["gen-dataset", "--profile", "desk", "--type", "simple-grid", "--maps", "5",
                "--seed", "3"], ds)
    shutil.copytree(ds, str(tmp_path / "ds_keep"))
    ds = str(tmp_path / "ds_keep")
    b = _twice(["train", "--profile", "desk", "--dataset", ds, "--model", "geognn", "--hops", "2",
                "--epochs", "2", "--iters", "20", "--seed", "3", "--threads", "1"], tr)
    shutil.copytree(tr, str(tmp_path / "train_keep"))
    ck = os.path.join(str(tmp_path / "train_keep"), "checkpoint.json")
    c = _twice(["rollout", "--profile", "desk", "--checkpoint", ck, "--maps", "3", "--robots", "6",
                "--seed", "3", "--threads", "1"], ro)
    same = {"gen-dataset": a[0] == a[1], "train": b[0] == b[1], "rollout": c[0] == c[1]}
    files = len(a[0]) + len(b[0]) + len(c[0])
    verdict(capsys, 10, "byte-identical reruns", all(same.values()),
            f"{files} files compared, " + ", ".join(f"{k} {'same' if v else 'DIFFERENT'}"
                                                    for k, v in same.items()))
