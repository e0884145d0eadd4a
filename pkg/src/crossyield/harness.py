"""Evaluation harness: episode runner, metrics, cross-evaluation, exports.

Every episode is deterministic per (controller, schedule): the result lists
one record per spawned vehicle, with unreleased vehicles accounted at the
episode end. Cross-evaluation reuses the same (time, route) schedules across
CAV rates via class relabeling, so comparisons run on identical traffic.
"""

from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import demand as demand_mod
from .baselines import FixedTimeSignal, PhaseSet, TrafficLightEnv, canonical_phase_set
from .env import IntersectionEnv, ObservationLayout
from .microsim import DriverParams, World
from .nets import PolicyParams, load_checkpoint, policy_forward
from .topology import Topology, preset


@dataclass(frozen=True)
class VehicleRecord:
    """Outcome of one scheduled vehicle in one episode."""

    vid: Optional[int]  # None when the vehicle never left the pending queue
    route: str
    is_cav: bool
    scheduled: float
    release_time: Optional[int]
    tau: float
    released: bool


@dataclass
class EpisodeResult:
    records: list
    actions: list  # decision log (restriction actions or phase indices)
    trace: list  # per-second JSON lines when tracing was requested
    duration: int
    controller: str


# -- controllers ----------------------------------------------------------------


class RSController:
    """Static road-sign priorities: no virtual red lights, ever."""

    kind = "rs"
    name = "RS"

    def act(self, observation) -> int:
        return 0


class ConstantController:
    """Pins the restriction action to one fixed index (runs the env path)."""

    kind = "policy"

    def __init__(self, action: int, name: Optional[str] = None):
        self.action = action
        self.name = name or f"const{action}"

    def act(self, observation) -> int:
        return self.action


class PolicyController:
    """Greedy trained virtual-red-light policy."""

    kind = "policy"

    def __init__(self, params: PolicyParams, topology: Topology, name: str = "cvtsc"):
        self.params = params
        self.topology = topology
        self.name = name

    def act(self, observation) -> int:
        return int(np.argmax(policy_forward(self.params, observation)))


class FixedTimeTLController:
    """Cyclic fixed-time traffic light."""

    kind = "fixed_tl"

    def __init__(self, phase_set: PhaseSet, greens: Sequence[int], name: str = "TL-fixed"):
        self.signal = FixedTimeSignal(phase_set, greens)
        self.name = name


class TLPolicyController:
    """Greedy trained phase-selection traffic light."""

    kind = "tl_policy"

    def __init__(self, params: PolicyParams, phase_set: PhaseSet, name: str = "TL-rl"):
        self.params = params
        self.phase_set = phase_set
        self.name = name

    def act(self, observation) -> int:
        return int(np.argmax(policy_forward(self.params, observation)))


def load_agent(checkpoint_dir, topology: Topology, name: Optional[str] = None) -> PolicyController:
    params, manifest = load_checkpoint(checkpoint_dir)
    return PolicyController(params, topology, name=name or str(checkpoint_dir))


# -- episode runner ---------------------------------------------------------------


def _records_from_world(world: World, events, duration: int) -> list:
    records = []
    for e in events:
        records.append(
            VehicleRecord(
                vid=e.vid,
                route=e.route,
                is_cav=e.is_cav,
                scheduled=e.scheduled,
                release_time=e.release_time,
                tau=e.tau,
                released=True,
            )
        )
    for veh in world.vehicles.values():
        records.append(
            VehicleRecord(
                vid=veh.vid,
                route=veh.route,
                is_cav=veh.is_cav,
                scheduled=veh.scheduled,
                release_time=None,
                tau=duration - veh.scheduled,
                released=False,
            )
        )
    for leg_queue in world._pending.values():
        for (t, route, cav) in leg_queue:
            if t < duration:
                records.append(
                    VehicleRecord(
                        vid=None,
                        route=route,
                        is_cav=cav,
                        scheduled=t,
                        release_time=None,
                        tau=duration - t,
                        released=False,
                    )
                )
    records.sort(key=lambda r: (r.scheduled, r.route))
    return records


def run_episode(
    controller,
    topology: Topology,
    schedule,
    *,
    duration: float = 1200.0,
    gamma: float = 0.98,
    eta_a: float = 0.0027,
    eta_b: float = 0.946,
    params: DriverParams = DriverParams(),
    layout: Optional[ObservationLayout] = None,
    record_trace: bool = False,
) -> EpisodeResult:
    """Run one controller over one spawn schedule; one record per vehicle."""
    duration = int(duration)
    actions: list[int] = []
    if controller.kind == "rs":
        world = World(topology, schedule, params=params, record_trace=record_trace)
        while world.clock < duration:
            world.advance_second()
    elif controller.kind == "fixed_tl":
        world = World(topology, schedule, params=params, record_trace=record_trace)
        while world.clock < duration:
            world.advance_second(controller.signal.signal_at(world.clock))
    elif controller.kind == "policy":
        env = IntersectionEnv(
            topology,
            schedule,
            duration=duration,
            gamma=gamma,
            eta_a=eta_a,
            eta_b=eta_b,
            params=params,
            layout=layout,
            record_trace=record_trace,
        )
        state = env.reset()
        obs = state.observation
        while not env.done:
            a = controller.act(obs)
            actions.append(a)
            step = env.step(a)
            obs = step.observation
        world = env.world
    elif controller.kind == "tl_policy":
        env = TrafficLightEnv(
            topology,
            schedule,
            controller.phase_set,
            duration=duration,
            gamma=gamma,
            eta_a=eta_a,
            eta_b=eta_b,
            params=params,
            layout=layout,
            record_trace=record_trace,
        )
        state = env.reset()
        obs = state.observation
        while not env.done:
            a = controller.act(obs)
            actions.append(a)
            step = env.step(a)
            obs = step.observation
        world = env.world
    else:
        raise ValueError(f"unknown controller kind {controller.kind!r}")

    records = _records_from_world(world, world.release_log, duration)
    return EpisodeResult(
        records=records,
        actions=actions,
        trace=world.trace,
        duration=duration,
        controller=getattr(controller, "name", controller.kind),
    )


# -- metrics ------------------------------------------------------------------------


def throughput_pct(records: Sequence[VehicleRecord]) -> float:
    """Released share of all spawned vehicles; 100 by convention when empty."""
    if not records:
        return 100.0
    return 100.0 * sum(r.released for r in records) / len(records)


def aggregate(records: Sequence[VehicleRecord]) -> dict:
    """Travel-time statistics over all vehicles and over released ones."""
    taus = [r.tau for r in records]
    rel = [r.tau for r in records if r.released]
    out = {
        "n_vehicles": len(records),
        "n_released": len(rel),
        "throughput_pct": throughput_pct(records),
        "mean_tau": float(np.mean(taus)) if taus else 0.0,
        "std_tau": float(np.std(taus)) if taus else 0.0,
    }
    if rel:
        q1, med, q3 = np.percentile(rel, [25, 50, 75])
        out.update(
            released_median_tau=float(med),
            released_q1_tau=float(q1),
            released_q3_tau=float(q3),
            released_mean_tau=float(np.mean(rel)),
        )
    else:
        out.update(
            released_median_tau=0.0,
            released_q1_tau=0.0,
            released_q3_tau=0.0,
            released_mean_tau=0.0,
        )
    return out


def main_legs(topology: Topology) -> frozenset:
    """Legs whose departures include a protected (rank >= 2) movement."""
    return frozenset(
        topology.origin_leg(r)
        for r in topology.routes
        if topology.priority_rank[r] >= 2
    )


def group_of(record: VehicleRecord, topology: Topology) -> str:
    """Partition: main-road CAV / main-road HV / side-road all."""
    if topology.origin_leg(record.route) in main_legs(topology):
        return "main_cav" if record.is_cav else "main_hv"
    return "side_all"


def group_aggregate(records: Sequence[VehicleRecord], topology: Topology) -> dict:
    groups: dict[str, list] = {"main_cav": [], "main_hv": [], "side_all": []}
    for r in records:
        groups[group_of(r, topology)].append(r)
    return {name: aggregate(rs) for name, rs in groups.items()}


# -- cross evaluation ---------------------------------------------------------------


def make_eval_schedules(
    topology: Topology,
    band: tuple,
    episodes: int,
    duration: float,
    seed: int,
) -> list:
    """Unlabeled base schedules for one band (shared across agents and rates)."""
    out = []
    for i in range(episodes):
        rng = np.random.default_rng(np.random.SeedSequence((seed, int(band[0]), i)))
        profile = demand_mod.sample_eval_profile(rng, topology.routes, band, duration)
        out.append(demand_mod.realize_spawns(profile, rng))
    return out


def labeled(schedule, cav_rate: float, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence((seed, int(cav_rate * 1000))))
    return demand_mod.assign_classes(schedule, cav_rate, rng)


def cross_evaluate(
    agents: Mapping[str, object],
    topology: Topology,
    cav_rates: Sequence[float],
    bands: Sequence[tuple],
    *,
    episodes_per_cell: int = 10,
    duration: float = 1200.0,
    seed: int = 0,
    params: DriverParams = DriverParams(),
    with_groups: bool = False,
) -> dict:
    """Evaluation matrix over (agent, CAV rate, demand band) cells.

    Returns a report dict with one row per cell; per-cell statistics pool
    the vehicle records of all its episodes.
    """
    if not agents or not cav_rates or not bands:
        raise ValueError("need at least one agent, rate and band")
    layout = ObservationLayout(topology, params)
    cells = []
    for band in bands:
        base = make_eval_schedules(topology, band, episodes_per_cell, duration, seed)
        for rate in cav_rates:
            schedules = [
                labeled(s, rate, seed + 31 * i) for i, s in enumerate(base)
            ]
            for name, controller in agents.items():
                pooled: list[VehicleRecord] = []
                for sched in schedules:
                    result = run_episode(
                        controller,
                        topology,
                        sched,
                        duration=duration,
                        params=params,
                        layout=layout,
                    )
                    pooled.extend(result.records)
                row = {
                    "agent": name,
                    "cav_rate": rate,
                    "band_low": band[0],
                    "band_high": band[1],
                    "episodes": episodes_per_cell,
                }
                row.update(aggregate(pooled))
                if with_groups:
                    for gname, stats in group_aggregate(pooled, topology).items():
                        for key, val in stats.items():
                            row[f"{gname}:{key}"] = val
                cells.append(row)
    return {"schema": "crossyield.cross_eval.v1", "cells": cells}


def evaluate_on_bands(
    controller,
    topology: Topology,
    bands: Sequence[tuple],
    *,
    episodes: int,
    cav_rate: float,
    duration: float,
    seed: int,
    params: DriverParams = DriverParams(),
    iteration: int = 0,
) -> list[dict]:
    """Training-curve rows: per-band throughput and travel-time statistics."""
    layout = ObservationLayout(topology, params)
    rows = []
    for band in bands:
        pooled: list[VehicleRecord] = []
        for i, base in enumerate(
            make_eval_schedules(topology, band, episodes, duration, seed)
        ):
            sched = labeled(base, cav_rate, seed + 31 * i)
            result = run_episode(
                controller, topology, sched, duration=duration, params=params, layout=layout
            )
            pooled.extend(result.records)
        stats = aggregate(pooled)
        rows.append(
            {
                "iteration": iteration,
                "band_low": band[0],
                "band_high": band[1],
                "throughput_pct": stats["throughput_pct"],
                "mean_tau": stats["mean_tau"],
                "std_tau": stats["std_tau"],
            }
        )
    return rows


# -- persistence ----------------------------------------------------------------------


def _sig6(x):
    if isinstance(x, float):
        return float(f"{x:.6g}")
    return x


def export_report(report: Mapping, fmt: str, path) -> None:
    """Write a cross-eval report as CSV (long format) or JSON."""
    if fmt == "json":
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
        return
    if fmt != "csv":
        raise ValueError(f"unknown export format {fmt!r}")
    cells = report.get("cells", [])
    lead = ["agent", "cav_rate", "band_low", "band_high", "episodes"]
    keys: list[str] = list(lead)
    for cell in cells:
        for k in cell:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for cell in cells:
            writer.writerow({k: _sig6(v) for k, v in cell.items()})


def load_report(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def records_to_csv(records: Sequence[VehicleRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["vid", "route", "is_cav", "scheduled", "release_time", "tau", "released"]
        )
        for r in records:
            writer.writerow(
                [
                    "" if r.vid is None else r.vid,
                    r.route,
                    int(r.is_cav),
                    _sig6(r.scheduled),
                    "" if r.release_time is None else r.release_time,
                    _sig6(r.tau),
                    int(r.released),
                ]
            )


# -- replay -----------------------------------------------------------------------------


def episode_log(
    topology_name: str,
    schedule,
    result: EpisodeResult,
    controller_kind: str,
) -> dict:
    """Self-contained description of one run for exact re-simulation."""
    return {
        "schema": "crossyield.episode.v1",
        "topology": topology_name,
        "duration": result.duration,
        "controller_kind": controller_kind,
        "actions": list(result.actions),
        "schedule": [[e.time, e.route, int(e.is_cav)] for e in schedule],
    }


class _ReplayController:
    kind = "policy"
    name = "replay"

    def __init__(self, actions: Sequence[int]):
        self._actions = list(actions)
        self._i = 0

    def act(self, observation) -> int:
        if self._i >= len(self._actions):
            return 0
        a = self._actions[self._i]
        self._i += 1
        return a


def replay_episode(log: Mapping, params: DriverParams = DriverParams()) -> EpisodeResult:
    """Re-run a logged episode and emit its per-second trace."""
    topo = preset(log["topology"])
    schedule = demand_mod.SpawnSchedule(
        entries=tuple(
            demand_mod.SpawnEntry(float(t), r, bool(c)) for t, r, c in log["schedule"]
        )
    )
    kind = log.get("controller_kind", "rs")
    if kind == "rs":
        controller = RSController()
    elif kind == "policy":
        controller = _ReplayController(log.get("actions", []))
    else:
        raise ValueError(f"cannot replay controller kind {kind!r}")
    return run_episode(
        controller,
        topo,
        schedule,
        duration=log["duration"],
        params=params,
        record_trace=True,
    )
