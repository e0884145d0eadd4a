"""Command-line interface: gen-demand, train, eval, cross-eval, replay."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import demand as demand_mod
from .baselines import canonical_phase_set
from .env import ObservationLayout
from .harness import (
    FixedTimeTLController,
    RSController,
    cross_evaluate,
    episode_log,
    export_report,
    load_agent,
    records_to_csv,
    replay_episode,
    run_episode,
    aggregate,
)
from .learner import TrainConfig, train_cvtsc
from .microsim import DriverParams
from .topology import Topology, load_topology, preset


def _topology(arg: str) -> Topology:
    if os.path.exists(arg):
        return load_topology(arg)
    return preset(arg)


def _band(text: str) -> tuple[float, float]:
    lo, hi = text.split(":")
    return (float(lo), float(hi))


def _fail(message: str) -> "NoReturn":  # noqa: F821
    print(f"error: {message}", file=sys.stderr)
    raise SystemExit(2)


def cmd_gen_demand(args) -> int:
    topo = _topology(args.topology)
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.episodes):
        rng = np.random.default_rng(np.random.SeedSequence((args.seed, i)))
        if args.band:
            profile = demand_mod.sample_eval_profile(
                rng, topo.routes, _band(args.band), args.duration
            )
        else:
            profile = demand_mod.sample_training_profile(
                rng, topo.routes, duration=args.duration
            )
        schedule = demand_mod.assign_classes(
            demand_mod.realize_spawns(profile, rng), args.cav_rate, rng
        )
        path = os.path.join(args.out, f"demand_{i:03d}.json")
        demand_mod.save_demand(
            path,
            profile,
            schedule,
            meta={
                "topology": topo.name,
                "seed": args.seed,
                "index": i,
                "cav_rate": args.cav_rate,
            },
        )
        print(path)
    return 0


def cmd_train(args) -> int:
    topo = _topology(args.topology)
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg = TrainConfig.from_json(json.load(fh))
    else:
        cfg = TrainConfig()
    if args.iterations is not None:
        cfg = TrainConfig.from_json({**cfg.to_json(), "iterations": args.iterations})
    os.makedirs(args.out, exist_ok=True)
    layout = ObservationLayout(topo)
    with open(os.path.join(args.out, "observation_schema.json"), "w", encoding="utf-8") as fh:
        json.dump(layout.schema(), fh, indent=2)
    with open(os.path.join(args.out, "train_config.json"), "w", encoding="utf-8") as fh:
        json.dump({**cfg.to_json(), "config_hash": cfg.config_hash()}, fh, indent=2)
    bands = demand_mod.EVAL_BANDS if args.eval_bands else None
    train_cvtsc(
        cfg,
        topo,
        checkpoint_dir=args.out,
        evaluate_bands=bands,
        log=print,
    )
    print(f"checkpoints written under {args.out}")
    return 0


def _controller(spec: str, topo: Topology):
    if spec == "rs":
        return RSController()
    if spec == "fixed-tl":
        ps = canonical_phase_set(topo)
        return FixedTimeTLController(ps, [30] * ps.n_phases)
    if os.path.isdir(spec):
        return load_agent(spec, topo, name=os.path.basename(spec.rstrip("/")))
    _fail(f"unknown controller {spec!r} (use rs, fixed-tl, or a checkpoint dir)")


def cmd_eval(args) -> int:
    topo = _topology(args.topology)
    controller = _controller(args.controller, topo)
    rows = []
    for path in args.demand:
        _, schedule, meta = demand_mod.load_demand(path)
        result = run_episode(
            controller,
            topo,
            schedule,
            duration=args.duration,
            record_trace=args.trace is not None,
        )
        stats = aggregate(result.records)
        stats["demand_file"] = os.path.basename(path)
        rows.append(stats)
        if args.records:
            records_to_csv(result.records, args.records)
        if args.trace:
            with open(args.trace, "w", encoding="utf-8") as fh:
                fh.write("\n".join(result.trace) + "\n")
        if args.episode_log:
            with open(args.episode_log, "w", encoding="utf-8") as fh:
                json.dump(
                    episode_log(topo.name, schedule, result, controller.kind), fh
                )
    report = {"schema": "crossyield.eval.v1", "cells": rows}
    export_report(report, args.format, args.out)
    print(args.out)
    return 0


def cmd_cross_eval(args) -> int:
    topo = _topology(args.topology)
    agents = {}
    for spec in args.agents.split(","):
        name = os.path.basename(spec.rstrip("/")) if os.path.isdir(spec) else spec
        agents[name] = _controller(spec, topo)
    rates = [float(r) for r in args.rates.split(",")]
    if args.bands == "all":
        bands = list(demand_mod.EVAL_BANDS)
    else:
        bands = [_band(b) for b in args.bands.split(",")]
    report = cross_evaluate(
        agents,
        topo,
        rates,
        bands,
        episodes_per_cell=args.episodes,
        duration=args.duration,
        seed=args.seed,
        with_groups=args.groups,
    )
    export_report(report, args.format, args.out)
    print(args.out)
    return 0


def cmd_replay(args) -> int:
    with open(args.episode, "r", encoding="utf-8") as fh:
        log = json.load(fh)
    result = replay_episode(log)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("\n".join(result.trace) + "\n")
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossyield",
        description="Mixed-traffic intersection simulator, controller training and evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-demand", help="sample demand profiles and spawn schedules")
    p.add_argument("--topology", default="three_way")
    p.add_argument("--band", default=None, help="total-flow band low:high (v/h)")
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--duration", type=float, default=1200.0)
    p.add_argument("--cav-rate", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="demand")
    p.set_defaults(func=cmd_gen_demand)

    p = sub.add_parser("train", help="train the virtual-red-light controller")
    p.add_argument("--topology", default="three_way")
    p.add_argument("--config", default=None, help="TrainConfig JSON file")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--eval-bands", action="store_true", help="evaluate on the five bands")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run one controller over saved demand")
    p.add_argument("--topology", default="three_way")
    p.add_argument("--controller", required=True, help="rs, fixed-tl, or checkpoint dir")
    p.add_argument("--demand", nargs="+", required=True)
    p.add_argument("--duration", type=float, default=1200.0)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", required=True)
    p.add_argument("--records", default=None, help="also write per-vehicle records CSV")
    p.add_argument("--trace", default=None, help="also write the per-second trace")
    p.add_argument("--episode-log", default=None, help="write a replayable episode log")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cross-eval", help="matrix over agents, CAV rates and bands")
    p.add_argument("--topology", default="three_way")
    p.add_argument("--agents", required=True, help="comma list: rs, fixed-tl, checkpoint dirs")
    p.add_argument("--rates", default="0.5")
    p.add_argument("--bands", default="all", help="'all' or comma list of low:high")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--duration", type=float, default=1200.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--groups", action="store_true", help="include vehicle-group splits")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cross_eval)

    p = sub.add_parser("replay", help="re-run a logged episode, emit its trace")
    p.add_argument("--episode", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        _fail(str(exc))


if __name__ == "__main__":
    raise SystemExit(main())
