"""MDP wrapper around the microsimulator.

Encodes the world into a fixed-length observation (lane segments, slots
sorted by distance to the stop line), maps discrete actions to virtual-red
restriction sets, advances the simulator with CAV-free second skipping and
accumulates the equity reward per released vehicle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .microsim import DriverParams, SignalState, World
from .topology import Topology

APPROACH_SEGMENTS = 3  # far / mid / near split of every approach lane
WAIT_CLAMP = 300.0  # s, normalization ceiling for time-since-entry
BASE_FEATURES = ("occupied", "position", "speed", "wait", "cav")


@dataclass(frozen=True)
class Segment:
    kind: str  # "approach" or "junction"
    key: str  # leg name or route name
    s_lo: float
    s_hi: float
    slots: int


class ObservationLayout:
    """Fixed observation layout for one topology.

    Segment order: approach segments per leg (far to near, legs in topology
    order), then one junction segment per route. Each segment holds
    ``capacity`` slots (jam maximum); each slot carries the base features
    plus a route one-hot. Empty slots stay at zeros, so the occupancy flag
    is what distinguishes a real stopped vehicle at the line from padding.
    """

    def __init__(self, topology: Topology, params: DriverParams = DriverParams()):
        self.topology = topology
        self.jam_spacing = params.jam_spacing
        self.segments: list[Segment] = []
        a = topology.approach_length
        for leg in topology.leg_names():
            bounds = np.linspace(-a, 0.0, APPROACH_SEGMENTS + 1)
            for i in range(APPROACH_SEGMENTS):
                seg_len = bounds[i + 1] - bounds[i]
                self.segments.append(
                    Segment(
                        "approach",
                        leg,
                        float(bounds[i]),
                        float(bounds[i + 1]),
                        int(math.ceil(seg_len / self.jam_spacing)),
                    )
                )
        for route in topology.routes:
            plen = topology.path_length(route)
            self.segments.append(
                Segment("junction", route, 0.0, plen, int(math.ceil(plen / self.jam_spacing)))
            )
        self.route_index = {r: i for i, r in enumerate(topology.routes)}
        self.slot_width = len(BASE_FEATURES) + len(topology.routes)
        self.total_slots = sum(s.slots for s in self.segments)
        self.dim = self.total_slots * self.slot_width

    def schema(self) -> dict:
        """Machine-readable layout description for logged observations."""
        return {
            "topology": self.topology.name,
            "dim": self.dim,
            "slot_features": list(BASE_FEATURES)
            + [f"route:{r}" for r in self.topology.routes],
            "segments": [
                {
                    "kind": s.kind,
                    "key": s.key,
                    "s_lo": s.s_lo,
                    "s_hi": s.s_hi,
                    "slots": s.slots,
                }
                for s in self.segments
            ],
            "normalization": {
                "position_approach": "(s + approach_length) / approach_length",
                "position_junction": "s / path_length",
                "speed": "v / speed_limit",
                "wait": f"min(t - entry, {WAIT_CLAMP}) / {WAIT_CLAMP}",
            },
        }

    def encode(self, world: World) -> np.ndarray:
        """Deterministic fixed-length encoding of the tracked vehicles."""
        topo = self.topology
        a = topo.approach_length
        per_segment: dict[int, list] = {i: [] for i in range(len(self.segments))}

        approach_base: dict[str, int] = {}
        junction_idx: dict[str, int] = {}
        for i, seg in enumerate(self.segments):
            if seg.kind == "approach" and seg.key not in approach_base:
                approach_base[seg.key] = i
            if seg.kind == "junction":
                junction_idx[seg.key] = i

        bounds = np.linspace(-a, 0.0, APPROACH_SEGMENTS + 1)
        for veh in world.vehicles.values():
            if veh.crossed:
                si = junction_idx[veh.route]
                dist = veh.s  # past the line: nearer the line sorts first
            else:
                k = min(
                    APPROACH_SEGMENTS - 1,
                    int(np.searchsorted(bounds, veh.s, side="right")) - 1,
                )
                k = max(0, k)
                si = approach_base[topo.origin_leg(veh.route)] + k
                dist = -veh.s
            per_segment[si].append((dist, veh))

        vec = np.zeros(self.dim, dtype=np.float32)
        offset = 0
        for i, seg in enumerate(self.segments):
            vehicles = sorted(per_segment[i], key=lambda p: (p[0], p[1].vid))
            for slot, (_, veh) in enumerate(vehicles[: seg.slots]):
                base = offset + slot * self.slot_width
                if seg.kind == "approach":
                    pos = (veh.s + a) / a
                else:
                    pos = veh.s / seg.s_hi if seg.s_hi > 0 else 0.0
                wait = min(world.clock - veh.entry_time, WAIT_CLAMP) / WAIT_CLAMP
                vec[base + 0] = 1.0
                vec[base + 1] = min(max(pos, 0.0), 1.0)
                vec[base + 2] = min(veh.v / topo.speed_limit, 1.0)
                vec[base + 3] = wait
                vec[base + 4] = 1.0 if veh.is_cav else 0.0
                vec[base + 5 + self.route_index[veh.route]] = 1.0
            offset += seg.slots * self.slot_width
        return vec


def action_to_restrictions(action: int, topology: Topology) -> frozenset:
    """Fixed action-index to restriction-set mapping of the topology."""
    sets = topology.action_sets
    if not 0 <= action < len(sets):
        raise ValueError(f"action {action} outside 0..{len(sets) - 1}")
    return sets[action]


@dataclass(frozen=True)
class EnvStep:
    observation: np.ndarray
    reward: float
    k: int  # elapsed seconds in this step (>= 1)
    released: tuple  # of (vid, tau)
    done: bool
    occupancy: tuple[int, int]  # (n_current, n_capacity) at the new state
    cav_present: bool  # whether the new state contains a CAV


@dataclass(frozen=True)
class EnvReset:
    observation: np.ndarray
    occupancy: tuple[int, int]
    cav_present: bool


class IntersectionEnv:
    """Decision-per-second environment with CAV-free state removal.

    ``step`` applies one restriction action, then advances the world second
    by second. Seconds whose end state contains no CAV are folded into the
    same step (the action's restrictions persist and are inert), so the
    returned step length k can be any positive integer. The reward is the
    within-step discounted sum of per-released-vehicle equity rewards.
    """

    def __init__(
        self,
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
    ):
        self.topology = topology
        self.schedule = schedule
        self.duration = int(duration)
        self.gamma = gamma
        self.eta_a = eta_a
        self.eta_b = eta_b
        self.params = params
        self.layout = layout or ObservationLayout(topology, params)
        self.record_trace = record_trace
        self.world: Optional[World] = None
        self._done = True
        # Episode log: per-step records for return/replay oracles.
        self.step_log: list[dict] = []

    @property
    def n_actions(self) -> int:
        return len(self.topology.action_sets)

    @property
    def done(self) -> bool:
        return self._done

    def reset(self) -> EnvReset:
        self.world = World(
            self.topology,
            self.schedule,
            params=self.params,
            record_trace=self.record_trace,
        )
        self._done = False
        self.step_log = []
        return EnvReset(
            observation=self.layout.encode(self.world),
            occupancy=self.world.count_vehicles(),
            cav_present=self.world.any_cav(),
        )

    def step(self, action: int) -> EnvStep:
        if self._done or self.world is None:
            raise RuntimeError("step() on a finished episode; call reset()")
        world = self.world
        world.set_restrictions(action_to_restrictions(action, self.topology))
        reward = 0.0
        k = 0
        released: list[tuple] = []
        per_second: list[list[float]] = []
        while True:
            events = world.advance_second()
            taus = [e.tau for e in events]
            per_second.append(taus)
            reward += (self.gamma**k) * sum(
                self.eta_a * tau + self.eta_b for tau in taus
            )
            released.extend((e.vid, e.tau) for e in events)
            k += 1
            if world.clock >= self.duration:
                self._done = True
                break
            if world.any_cav():
                break
        self.step_log.append(
            {
                "action": action,
                "start_clock": world.clock - k,
                "k": k,
                "reward": reward,
                "taus_per_second": per_second,
            }
        )
        return EnvStep(
            observation=self.layout.encode(world),
            reward=reward,
            k=k,
            released=tuple(released),
            done=self._done,
            occupancy=world.count_vehicles(),
            cav_present=world.any_cav(),
        )
