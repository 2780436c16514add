"""Command-line entry point: map and dataset generation, training,
evaluation, rollouts, gradient checks and report assembly.

Configuration is a JSON tree with sections ``world``, ``percept``, ``expert``,
``dataset``, ``model``, ``train`` and ``rollout``. Values resolve as
built-in defaults < ``--profile`` < ``--config FILE`` < command-line flags.
``GEOMRPP_OUT`` sets the default output root and ``GEOMRPP_THREADS`` the
default thread count.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .autodiff import load_into, read_checkpoint
from .expert import (DATASET_TYPES, DatasetConfig, ExpertConfig, ExpertPlanner, generate_dataset,
                     map_rng, place_robots)
from .geognn import BasisConfig, GeoGNN, ModelConfig
from .percept import PerceptConfig
from .rollout import (ExpertPolicy, ModelPolicy, RolloutConfig, audit_trace, metrics, plot_episode,
                      run_episode, write_trace)
from .train import SampleSet, TrainConfig, accuracy, train
from .world import MapGenConfig, WorldError, generate_map

log = logging.getLogger("geomrpp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def default_config() -> Dict[str, Any]:
    model = ModelConfig().to_dict()
    del model["d"]  # taken from the percept section
    return {
        "world": {"map_size": 20.0, "resolution": 0.05, "obstacle_count": 40, "angle_mode": "simple"},
        "percept": asdict(PerceptConfig()),
        "expert": asdict(ExpertConfig()),
        "dataset": {"robots": 15, "grid_spacing": 3.0, "min_separation": 1.0},
        "model": model,
        "train": asdict(TrainConfig()),
        "rollout": asdict(RolloutConfig()),
    }


PROFILES: Dict[str, Dict[str, Any]] = {
    "full": {},
    # single-core scale used by the acceptance suite
    "desk": {
        "world": {"map_size": 10.0, "obstacle_count": 10},
        "dataset": {"robots": 9},
        "percept": {"d": 32},
        "model": {"feature_dim": 64, "encoder_widths": [8, 16, 32]},
        "train": {"epochs": 20, "iterations_per_epoch": 200},
    },
}


def merge(base: Dict[str, Any], over: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(args: argparse.Namespace, flags: Dict[str, Dict[str, Any]]) -> Dict[str, Any]:
    cfg = default_config()
    file_cfg: Dict[str, Any] = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            file_cfg = json.load(fh)
    profile = args.profile or file_cfg.pop("profile", None) or "full"
    if profile not in PROFILES:
        raise UsageError(f"unknown profile {profile!r}")
    cfg = merge(cfg, PROFILES[profile])
    cfg = merge(cfg, {k: v for k, v in file_cfg.items() if k != "profile"})
    unknown = set(cfg) - set(default_config())
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    cfg = merge(cfg, {sec: {k: v for k, v in vals.items() if v is not None}
                      for sec, vals in flags.items()})
    cfg["profile"] = profile
    return cfg


def world_config(cfg: Dict[str, Any], seed: int) -> MapGenConfig:
    w = cfg["world"]
    return MapGenConfig(w["map_size"], w["resolution"], w["obstacle_count"], w["angle_mode"], seed)


def dataset_config(cfg: Dict[str, Any]) -> DatasetConfig:
    w, d = cfg["world"], cfg["dataset"]
    return DatasetConfig(map_size=w["map_size"], resolution=w["resolution"],
                         obstacle_count=w["obstacle_count"], robots=d["robots"],
                         grid_spacing=d["grid_spacing"], min_separation=d["min_separation"],
                         expert=ExpertConfig(**cfg["expert"]))


def model_config(cfg: Dict[str, Any]) -> ModelConfig:
    m = dict(cfg["model"])
    m["d"] = cfg["percept"]["d"]
    m["basis"] = BasisConfig(**m["basis"]) if isinstance(m["basis"], dict) else m["basis"]
    m["encoder_widths"] = tuple(m["encoder_widths"])
    return ModelConfig(**m)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _tree_hashes(paths: Sequence[str]) -> Dict[str, str]:
    out = {}
    for p in paths:
        if os.path.isdir(p):
            for root, _, files in os.walk(p):
                for f in sorted(files):
                    full = os.path.join(root, f)
                    if os.path.basename(full) != "run.json":
                        out[full] = _sha256(full)
        elif os.path.exists(p):
            out[p] = _sha256(p)
    return dict(sorted(out.items()))


def write_run_record(out_dir: str, command: str, argv: Sequence[str], cfg: Dict[str, Any],
                     inputs: Sequence[str], outputs: Sequence[str]) -> str:
    record = {
        "command": command,
        "argv": list(argv),
        "config": cfg,
        "versions": {"geomrpp": __version__, "numpy": np.__version__},
        "inputs": _tree_hashes(inputs),
        "outputs": _tree_hashes(outputs),
    }
    path = os.path.join(out_dir, "run.json")
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
    return path


def _dump(path: str, obj: Any) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def _out_dir(args: argparse.Namespace, name: str) -> str:
    out = args.out or os.path.join(os.environ.get("GEOMRPP_OUT", "runs"), name)
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_map(args: argparse.Namespace) -> int:
    cfg = resolve_config(args, {"world": {"angle_mode": args.angle_mode}})
    world = generate_map(world_config(cfg, args.seed), np.random.default_rng(args.seed))
    out = args.out or os.path.join(os.environ.get("GEOMRPP_OUT", "runs"), "map.json")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    with open(out, "w") as fh:
        fh.write(world.to_json())
    if args.plot:
        plot_episode(world, [], [], args.plot)
    print(json.dumps({"map": out, "obstacles": len(world.obstacles)}))
    return EXIT_OK


def cmd_gen_dataset(args: argparse.Namespace) -> int:
    cfg = resolve_config(args, {"dataset": {"robots": args.robots}})
    out = _out_dir(args, "dataset")
    manifest = generate_dataset(args.type, args.maps, dataset_config(cfg), args.seed, out)
    path = os.path.join(out, "manifest.json")
    write_run_record(out, "gen-dataset", args.argv, {**cfg, "seed": args.seed, "type": args.type},
                     [], [out])
    print(json.dumps({"manifest": path, "split_samples": manifest["split_samples"],
                      "label_histogram": manifest["label_histogram"]}, sort_keys=True))
    return EXIT_OK


def _load_manifest(dataset: str) -> dict:
    path = os.path.join(dataset, "manifest.json")
    if not os.path.exists(path):
        raise DataError(f"no dataset manifest at {path}")
    with open(path) as fh:
        return json.load(fh)


def _model_flags(args: argparse.Namespace) -> Dict[str, Any]:
    return {"model": getattr(args, "model", None), "hops": getattr(args, "hops", None),
            "position_encoding": getattr(args, "pos_enc", None),
            "feature_dim": getattr(args, "feature_dim", None)}


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args, {
        "model": {**_model_flags(args), "seed": args.seed},
        "train": {"epochs": args.epochs, "iterations_per_epoch": args.iters, "seed": args.seed,
                  "batch_size": args.batch_size, "lr": args.lr, "restarts": args.restarts},
    })
    manifest = _load_manifest(args.dataset)
    out = _out_dir(args, "train")
    mcfg = model_config(cfg)
    tcfg = TrainConfig(**cfg["train"])
    percept = PerceptConfig(**cfg["percept"])
    train_set = SampleSet.load(args.dataset, "train", percept, manifest)
    val_set = SampleSet.load(args.dataset, "val", percept, manifest)
    if len(train_set) == 0:
        raise DataError("dataset has an empty train split")
    model = GeoGNN(mcfg)
    ck_path = os.path.join(out, "checkpoint.json")
    header = {"model": mcfg.to_dict(), "percept": asdict(percept), "train": asdict(tcfg),
              "dataset": {"type": manifest["dataset_type"], "seed": manifest["seed"],
                          "manifest_sha256": _sha256(os.path.join(args.dataset, "manifest.json"))}}
    report = train(model, train_set, val_set, tcfg, ck_path, header)
    rep = asdict(report)
    rep["checkpoint"] = ck_path
    _dump(os.path.join(out, "report.json"), rep)
    write_run_record(out, "train", args.argv, cfg, [os.path.join(args.dataset, "manifest.json")],
                     [ck_path, os.path.join(out, "report.json")])
    print(json.dumps({"checkpoint": ck_path, "best_epoch": report.best_epoch,
                      "best_val_accuracy": report.best_val_accuracy}))
    return EXIT_OK


def load_model(path: str, expect: Optional[Dict[str, Any]] = None) -> GeoGNN:
    if not os.path.exists(path):
        raise DataError(f"no checkpoint at {path}")
    ck = read_checkpoint(path)
    mcfg = ModelConfig.from_dict(ck["header"]["model"])
    for key, want in (expect or {}).items():
        if want is not None and getattr(mcfg, key) != want:
            raise DataError(f"checkpoint has {key}={getattr(mcfg, key)!r} but {want!r} was requested")
    model = GeoGNN(mcfg)
    try:
        load_into(model, ck)
    except (KeyError, ValueError) as exc:
        raise DataError(f"checkpoint does not match its own model header: {exc}") from exc
    return model


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_model(args.checkpoint, _model_flags(args))
    manifest = _load_manifest(args.dataset)
    percept = PerceptConfig(**read_checkpoint(args.checkpoint)["header"].get(
        "percept", {"d": model.cfg.d}))
    if percept.d != model.cfg.d:
        raise DataError("checkpoint percept and model disagree on d")
    result = {"checkpoint": args.checkpoint, "dataset": args.dataset, "accuracy": {}, "samples": {}}
    for split in args.splits:
        s = SampleSet.load(args.dataset, split, percept, manifest)
        if len(s) == 0:
            continue
        result["accuracy"][split] = accuracy(model, s)
        result["samples"][split] = len(s)
    out = args.out or os.path.join(os.path.dirname(args.checkpoint), "eval.json")
    _dump(out, result)
    print(json.dumps(result["accuracy"], sort_keys=True))
    return EXIT_OK


def rollout_maps(cfg: Dict[str, Any], n_maps: int, robots: int, seed: int, layout: str):
    """Fresh (world, starts, goals, planner) tuples, one per map index."""
    dcfg = dataset_config(cfg)
    dcfg = DatasetConfig(**{**asdict(dcfg), "robots": robots, "expert": dcfg.expert})
    for m in range(n_maps):
        rng = map_rng(seed, m)
        world = generate_map(world_config(cfg, seed), rng)
        planner = ExpertPlanner(world, dcfg.expert)
        starts, goals = place_robots(world, robots, layout, dcfg, rng, planner)
        yield m, world, starts, goals, planner


def cmd_rollout(args: argparse.Namespace) -> int:
    cfg = resolve_config(args, {})
    rcfg = RolloutConfig(**cfg["rollout"])
    model = None
    if args.policy == "model":
        if not args.checkpoint:
            raise UsageError("--checkpoint is required unless --policy expert")
        model = load_model(args.checkpoint)
    out = _out_dir(args, "rollout")
    os.makedirs(os.path.join(out, "traces"), exist_ok=True)
    per_map, all_results = [], []
    collisions = violations = 0
    for m, world, starts, goals, planner in rollout_maps(cfg, args.maps, args.robots, args.seed,
                                                         args.layout):
        policy = ExpertPolicy(world, rcfg, cfg["expert"]["inflation"]) if model is None \
            else ModelPolicy(model, rcfg, PerceptConfig(**{**cfg["percept"], "d": model.cfg.d}))
        trace: List[dict] = []
        results = run_episode(world, starts, goals, policy, rcfg, planner=planner, trace=trace)
        c, v = audit_trace(world, trace, rcfg)
        collisions, violations = collisions + c, violations + v
        write_trace(os.path.join(out, "traces", f"episode_{m:04d}.ndjson"), trace)
        if args.plot:
            plot_episode(world, trace, goals, os.path.join(out, "traces", f"episode_{m:04d}.png"))
        ft, sr = metrics(results)
        per_map.append({"map": m, "ft_percent": None if math.isnan(ft) else ft, "sr": sr,
                        "collisions": c, "priority_violations": v,
                        "robots": [r.to_dict() for r in results]})
        all_results.extend(results)
    ft, sr = metrics(all_results)
    summary = {"policy": args.policy, "checkpoint": args.checkpoint, "maps": args.maps,
               "robots": args.robots, "seed": args.seed, "layout": args.layout,
               "ft_percent": None if math.isnan(ft) else ft, "sr": sr,
               "collisions": collisions, "priority_violations": violations, "per_map": per_map}
    _dump(os.path.join(out, "metrics.json"), summary)
    write_run_record(out, "rollout", args.argv, {**cfg, "seed": args.seed},
                     [args.checkpoint] if args.checkpoint else [],
                     [os.path.join(out, "metrics.json"), os.path.join(out, "traces")])
    print(json.dumps({k: summary[k] for k in ("ft_percent", "sr", "collisions", "priority_violations")}))
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    from .gradsuite import run_model_checks, run_op_checks, summarize

    results = []
    if not args.models_only:
        results += list(run_op_checks(args.trials, args.seed))
    if not args.ops_only:
        results += list(run_model_checks(args.trials, args.seed))
    summary = summarize(results)
    if args.out:
        _dump(args.out, summary)
    for name, c in summary["checks"].items():
        print(f"{'PASS' if c['passed'] else 'FAIL'} {name}: max rel err {c['max_error']:.2e} "
              f"over {c['trials']} trials ({c['redraws']} redraws)")
    return EXIT_OK if summary["passed"] else EXIT_NUMERIC


def cmd_report(args: argparse.Namespace) -> int:
    rows = []
    for path in args.inputs:
        files = [path] if os.path.isfile(path) else [
            os.path.join(path, f) for f in ("report.json", "eval.json", "metrics.json")
            if os.path.exists(os.path.join(path, f))]
        if not files:
            raise DataError(f"nothing to report in {path}")
        for f in files:
            with open(f) as fh:
                d = json.load(fh)
            row = {"source": f}
            if "accuracy" in d:
                row.update({f"acc_{k}": v for k, v in d["accuracy"].items()})
            if "val_accuracy" in d:
                row.update({"best_val_accuracy": d.get("best_val_accuracy"),
                            "epochs": len(d["val_accuracy"])})
            if "sr" in d:
                row.update({"ft_percent": d["ft_percent"], "sr": d["sr"],
                            "collisions": d["collisions"],
                            "priority_violations": d["priority_violations"]})
            rows.append(row)
    out = {"rows": rows}
    if args.out:
        _dump(args.out, out)
    keys = sorted({k for r in rows for k in r if k != "source"})
    print("| source | " + " | ".join(keys) + " |")
    print("|---" * (len(keys) + 1) + "|")
    for r in rows:
        cells = [r.get(k) for k in keys]
        print(f"| {r['source']} | " + " | ".join("" if c is None else
                                               (f"{c:.4f}" if isinstance(c, float) else str(c))
                                               for c in cells) + " |")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def positive_int(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (sections world, percept, expert, "
                                         "dataset, model, train, rollout)")
    common.add_argument("--profile", choices=sorted(PROFILES), help="named default set")
    common.add_argument("--threads", type=positive_int,
                        default=int(os.environ.get("GEOMRPP_THREADS", "1")),
                        help="BLAS threads (1 = deterministic)")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="geomrpp", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-map", parents=[common], help="generate one random map")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--angle-mode", choices=["simple", "complex"])
    s.add_argument("--plot", help="optional PNG of the map")
    s.set_defaults(func=cmd_gen_map)

    s = sub.add_parser("gen-dataset", parents=[common], help="generate an expert dataset")
    s.add_argument("--type", required=True, choices=DATASET_TYPES)
    s.add_argument("--maps", type=positive_int, required=True)
    s.add_argument("--robots", type=positive_int)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gen_dataset)

    def model_args(s: argparse.ArgumentParser) -> None:
        s.add_argument("--model", choices=["cnn", "geognn"])
        s.add_argument("--hops", type=int, choices=[1, 2, 3])
        s.add_argument("--pos-enc", choices=["none", "rbf", "bbf-sbf"])
        s.add_argument("--feature-dim", type=positive_int)

    s = sub.add_parser("train", parents=[common], help="imitation training")
    s.add_argument("--dataset", required=True)
    model_args(s)
    s.add_argument("--epochs", type=nonneg_int)
    s.add_argument("--iters", type=positive_int)
    s.add_argument("--batch-size", type=positive_int)
    s.add_argument("--lr", type=float)
    s.add_argument("--restarts", type=positive_int)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="accuracy of a checkpoint per split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--splits", nargs="+", default=["train", "val", "test"],
                   choices=["train", "val", "test"])
    model_args(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("rollout", parents=[common], help="closed-loop episodes on fresh maps")
    s.add_argument("--checkpoint")
    s.add_argument("--policy", choices=["model", "expert"], default="model")
    s.add_argument("--maps", type=positive_int, required=True)
    s.add_argument("--robots", type=positive_int, default=6)
    s.add_argument("--layout", choices=["random", "grid"], default="random")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--plot", action="store_true", help="write a trajectory PNG per episode")
    s.set_defaults(func=cmd_rollout)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--trials", type=positive_int, default=20)
    s.add_argument("--seed", type=int, default=0)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--ops-only", action="store_true")
    g.add_argument("--models-only", action="store_true")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("report", parents=[common], help="tabulate run outputs")
    s.add_argument("inputs", nargs="+", help="run directories or JSON files")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    args.argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"geomrpp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"geomrpp: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, WorldError, FileNotFoundError, ValueError, KeyError,
            json.JSONDecodeError) as exc:
        print(f"geomrpp: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
