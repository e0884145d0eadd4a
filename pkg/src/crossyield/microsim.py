"""Second-by-second microscopic simulation of one priority-regulated junction.

Vehicles follow a Krauss-style safe-speed car-following rule on a 1-D
coordinate per route (negative = approach lane, 0 = stop line, positive =
junction path, beyond the path end = outgoing lane, which is an infinite
sink). Yielding vehicles cross only after a gap-acceptance test against all
conflicting higher-priority traffic. Externally imposed route restrictions
(virtual red lights for CAVs) and optional traffic-light signal states
override or replace the static priorities.

The external contract is one-second ticks; internally each tick integrates
several substeps for numerical quality. Everything is deterministic: the
same topology, spawn schedule and command sequence reproduce bit-identical
event logs.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .topology import Topology

# Yield decisions and stop-line holds only engage this close to the line (m).
# Beyond it no vehicle needs to brake for the line yet: the stopping distance
# from the speed limit is about 35 m with the default driver parameters.
ENGAGE_DISTANCE = 40.0


class SimulationError(RuntimeError):
    """A world invariant broke; carries a diagnostic dump of the world."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message + "\n" + json.dumps(dump, indent=2, default=str))
        self.dump = dump


@dataclass(frozen=True)
class DriverParams:
    """Low-level vehicle controller constants shared by CAVs and HVs.

    The saturation-flow calibration anchor is a single-lane queue discharge
    of 1670 v/h; ``crossing_headway`` is the knob that tunes it (minimum time
    between successive stop-line crossings on one approach lane).
    """

    accel: float = 2.6  # m/s^2
    decel: float = 4.5  # m/s^2, also the comfortable-stop bound
    vehicle_length: float = 5.0  # m
    min_gap: float = 2.5  # m, bumper-to-bumper at standstill
    headway: float = 1.0  # s, driver reaction headway in the safe-speed rule
    gap_margin: float = 1.5  # s, extra clearance demanded by yield decisions
    crossing_headway: float = 3600.0 / 1670.0  # s, per-lane stop-line separation
    substeps: int = 2  # integration substeps per one-second tick

    @property
    def jam_spacing(self) -> float:
        return self.vehicle_length + self.min_gap


@dataclass(frozen=True)
class SignalState:
    """Per-second traffic-light state: green and amber route sets, rest red."""

    green: frozenset
    amber: frozenset = frozenset()


@dataclass
class Vehicle:
    """One vehicle's kinematic and bookkeeping state."""

    vid: int
    route: str
    is_cav: bool
    scheduled: float  # when the demand schedule intended it to appear (s)
    entry_time: int  # tick at which it actually entered the detection area
    s: float  # 1-D position along its route; stop line at 0
    v: float
    halt: bool = False  # active virtual-red order (CAVs only)
    crossed: bool = False  # front bumper passed the stop line
    committed: bool = False  # will enter the junction regardless of new orders


@dataclass(frozen=True)
class ReleaseEvent:
    """Emitted when a vehicle enters an outgoing lane."""

    vid: int
    route: str
    is_cav: bool
    scheduled: float
    release_time: int
    tau: float  # release_time - scheduled


def _safe_speed(gap_net: float, v_lead: float, p: DriverParams) -> float:
    """Krauss safe speed toward a leader with net gap and speed v_lead."""
    usable = max(0.0, gap_net - p.min_gap)
    bt = p.decel * p.headway
    return -bt + math.sqrt(bt * bt + v_lead * v_lead + 2.0 * p.decel * usable)


def _stop_speed(dist: float, p: DriverParams) -> float:
    """Safe speed such that the vehicle can still stop within dist meters."""
    bt = p.decel * p.headway
    return -bt + math.sqrt(bt * bt + 2.0 * p.decel * max(0.0, dist))


def _time_to_cover(dist: float, v0: float, p: DriverParams, v_max: float) -> float:
    """Travel time over dist starting at v0, accelerating toward v_max."""
    if dist <= 0:
        return 0.0
    t_acc = (v_max - v0) / p.accel
    d_acc = (v_max * v_max - v0 * v0) / (2.0 * p.accel)
    if dist <= d_acc:
        return (math.sqrt(v0 * v0 + 2.0 * p.accel * dist) - v0) / p.accel
    return t_acc + (dist - d_acc) / v_max


class World:
    """Mutable simulation state for one episode on one intersection.

    A World instance is single-threaded; run independent instances in
    parallel. The spawn schedule is an iterable of (time, route, is_cav)
    triples sorted by time (``demand.SpawnEntry`` satisfies this).
    """

    def __init__(
        self,
        topology: Topology,
        schedule: Iterable,
        params: DriverParams = DriverParams(),
        record_trace: bool = False,
    ):
        self.topology = topology
        self.params = params
        self.clock = 0
        self.record_trace = record_trace
        self.trace: list[str] = []

        entries = [self._coerce_entry(e) for e in schedule]
        for a, b in zip(entries, entries[1:]):
            if b[0] < a[0]:
                raise ValueError("spawn schedule must be sorted by time")
        self._pending: dict[str, deque] = {leg: deque() for leg in topology.leg_names()}
        for e in entries:
            self._pending[topology.origin_leg(e[1])].append(e)

        self.vehicles: dict[int, Vehicle] = {}
        self._leg_q: dict[str, deque] = {leg: deque() for leg in topology.leg_names()}
        self._path_q: dict[str, deque] = {r: deque() for r in topology.routes}
        self.active_restrictions: frozenset = frozenset()
        self._last_cross: dict[str, float] = {leg: -1e9 for leg in topology.leg_names()}
        self._next_vid = 0
        self.spawned = 0
        self.released = 0
        self.release_log: list[ReleaseEvent] = []
        # Conflict-point occupancy windows per ordered pair, for the safety check.
        self._cp_windows: dict[tuple[str, str], deque] = {
            pair: deque(maxlen=64) for pair in topology.conflict_points
        }
        self._cp_progress: dict[tuple[int, str], float] = {}  # (vid, other) -> t_enter
        self.capacity = int(
            math.floor(len(topology.legs) * topology.approach_length / params.jam_spacing)
        )

    @staticmethod
    def _coerce_entry(e):
        if hasattr(e, "time"):
            return (float(e.time), e.route, bool(e.is_cav))
        t, route, cav = e
        return (float(t), route, bool(cav))

    # -- public queries ---------------------------------------------------------

    def count_vehicles(self) -> tuple[int, int]:
        """(vehicles currently inside the detection area, static jam capacity)."""
        return len(self.vehicles), self.capacity

    def any_cav(self) -> bool:
        return any(v.is_cav for v in self.vehicles.values())

    def pending_count(self) -> int:
        return sum(len(q) for q in self._pending.values())

    def totals(self) -> dict:
        return {
            "spawned": self.spawned,
            "released": self.released,
            "in_world": len(self.vehicles),
            "pending": self.pending_count(),
        }

    # -- commands ---------------------------------------------------------------

    def set_restrictions(self, routes: Iterable[str]) -> None:
        """Replace the active virtual-red set; handles the too-close exemption.

        Re-issuing the identical set is a no-op, so repeated commands are
        idempotent. CAVs that cannot stop comfortably before the line when a
        new order arrives ignore it and proceed.
        """
        rs = frozenset(routes)
        bad = rs - self.topology.restrictable_routes()
        if bad:
            raise ValueError(f"cannot restrict non-priority routes: {sorted(bad)}")
        if rs == self.active_restrictions:
            return
        self.active_restrictions = rs
        p = self.params
        for veh in self.vehicles.values():
            if not veh.is_cav or veh.crossed:
                continue
            if veh.route in rs:
                if not veh.halt and not veh.committed:
                    dist = self.topology.hold_position(veh.route) - veh.s
                    if veh.v * veh.v / (2.0 * p.decel) > dist:
                        veh.committed = True  # too close to stop: proceeds
                    else:
                        veh.halt = True
            else:
                veh.halt = False

    def advance_second(self, signal: Optional[SignalState] = None) -> list[ReleaseEvent]:
        """Advance exactly one second; returns the vehicles released in it."""
        self._spawn_due()
        events: list[ReleaseEvent] = []
        dt = 1.0 / self.params.substeps
        for i in range(self.params.substeps):
            t0 = self.clock + i * dt
            events.extend(self._substep(t0, dt, signal))
        self.clock += 1
        out = [
            ReleaseEvent(
                vid=e[0],
                route=e[1],
                is_cav=e[2],
                scheduled=e[3],
                release_time=self.clock,
                tau=self.clock - e[3],
            )
            for e in events
        ]
        self.released += len(out)
        self.release_log.extend(out)
        if self.record_trace:
            self.trace.append(self._trace_line(out, signal))
        return out

    # -- spawning ---------------------------------------------------------------

    def _spawn_due(self) -> None:
        p = self.params
        topo = self.topology
        s0 = -topo.approach_length
        for leg, queue in self._pending.items():
            while queue and queue[0][0] <= self.clock:
                lane = self._leg_q[leg]
                if lane:
                    rear = lane[-1]
                    gap_net = rear.s - p.vehicle_length - s0
                    if gap_net < p.min_gap:
                        break  # lane entry jammed; later entries wait FIFO
                    v0 = min(topo.speed_limit, _safe_speed(gap_net, rear.v, p))
                else:
                    v0 = topo.speed_limit
                t, route, cav = queue.popleft()
                veh = Vehicle(
                    vid=self._next_vid,
                    route=route,
                    is_cav=cav,
                    scheduled=t,
                    entry_time=self.clock,
                    s=s0,
                    v=v0,
                    halt=bool(cav and route in self.active_restrictions),
                )
                self._next_vid += 1
                self.vehicles[veh.vid] = veh
                lane.append(veh)
                self.spawned += 1

    # -- one integration substep --------------------------------------------------

    def _substep(self, t0: float, dt: float, signal) -> list[tuple]:
        p = self.params
        topo = self.topology
        v_max = topo.speed_limit

        # Crossing permission is only ever exercised by the first vehicle on
        # each approach lane that has not crossed yet.
        permitted: dict[int, bool] = {}
        for leg, lane in self._leg_q.items():
            head = next((veh for veh in lane if not veh.crossed), None)
            if head is None:
                continue
            dist = topo.hold_position(head.route) - head.s
            if dist <= ENGAGE_DISTANCE:
                permitted[head.vid] = self._may_cross(head, t0, signal)

        # Synchronous speed update against the pre-substep snapshot.
        new_speed: dict[int, float] = {}
        for leg, lane in self._leg_q.items():
            prev = None
            for veh in lane:
                if veh.crossed:
                    prev = veh
                    continue
                caps = [veh.v + p.accel * dt, v_max]
                if prev is not None:
                    caps.append(_safe_speed(prev.s - p.vehicle_length - veh.s, prev.v, p))
                tail = self._path_q[veh.route][-1] if self._path_q[veh.route] else None
                if tail is not None and tail is not prev:
                    caps.append(_safe_speed(tail.s - p.vehicle_length - veh.s, tail.v, p))
                hold = topo.hold_position(veh.route)
                if hold - veh.s <= ENGAGE_DISTANCE and not permitted.get(veh.vid, True):
                    caps.append(_stop_speed(hold - veh.s, p))
                new_speed[veh.vid] = max(0.0, min(caps))
                prev = veh
        for route, path in self._path_q.items():
            prev = None
            for veh in reversed(path):  # front of the path first
                caps = [veh.v + p.accel * dt, v_max]
                if prev is not None:
                    caps.append(_safe_speed(prev.s - p.vehicle_length - veh.s, prev.v, p))
                new_speed[veh.vid] = max(0.0, min(caps))
                prev = veh

        # Apply motion, detect stop-line crossings and releases.
        released: list[tuple] = []
        for veh in list(self.vehicles.values()):
            v_new = new_speed[veh.vid]
            s_old = veh.s
            s_new = s_old + v_new * dt
            veh.v = v_new
            veh.s = s_new
            hold = topo.hold_position(veh.route)
            if not veh.crossed and s_new > hold:
                frac = (hold - s_old) / (s_new - s_old) if s_new > s_old else 0.0
                self._last_cross[topo.origin_leg(veh.route)] = t0 + frac * dt
                veh.crossed = True
                veh.committed = True
                veh.halt = False
                self._path_q[veh.route].append(veh)
            self._track_conflicts(veh, s_old, s_new, t0, dt)
            if veh.crossed:
                path_len = topo.path_length(veh.route)
                if s_new >= path_len:
                    frac = (path_len - s_old) / (s_new - s_old) if s_new > s_old else 0.0
                    self._finish_conflicts(veh, t0 + frac * dt)
                    released.append((veh.vid, veh.route, veh.is_cav, veh.scheduled))
                    self._path_q[veh.route].remove(veh)
                    self._leg_drop(veh)
                    del self.vehicles[veh.vid]
                    continue
            if veh.crossed and veh.s - p.vehicle_length >= 0.0:
                self._leg_drop(veh)
        self._check_gaps(t0)
        return released

    def _leg_drop(self, veh: Vehicle) -> bool:
        lane = self._leg_q[self.topology.origin_leg(veh.route)]
        if veh in lane:
            lane.remove(veh)
            return True
        return False

    # -- crossing permission -------------------------------------------------------

    def _may_cross(self, veh: Vehicle, t0: float, signal) -> bool:
        if veh.committed:
            return True
        p = self.params
        topo = self.topology
        route = veh.route
        hold = topo.hold_position(route)
        dist = hold - veh.s

        if signal is not None:
            if route in signal.green:
                pass
            elif route in signal.amber:
                if veh.v * veh.v / (2.0 * p.decel) > dist:
                    veh.committed = True  # cannot stop comfortably: continue
                    return True
                return False
            else:
                return False
        elif veh.halt:
            return False

        # Per-lane crossing separation (saturation-flow calibration).
        if p.crossing_headway > 0.0:
            eta = t0 + dist / max(veh.v, 1.0)
            if eta < self._last_cross[topo.origin_leg(route)] + p.crossing_headway:
                return False

        # Never enter while a conflicting vehicle is inside the junction (or
        # irrevocably entering it) and has not cleared the mutual conflict point.
        for other_route in topo.conflicts_of(route):
            d_self, d_other = topo.conflict_point(route, other_route)
            for u in self._path_q[other_route]:
                if u.s - p.vehicle_length < d_other:
                    return False
            lane = self._leg_q[topo.origin_leg(other_route)]
            for u in lane:
                if u.route == other_route and not u.crossed and u.committed:
                    return False

        # Gap acceptance against approaching traffic with priority.
        margin = p.gap_margin
        for other_route in topo.conflicts_of(route):
            if not topo.yields_to(route, other_route):
                continue
            d_self, d_other = topo.conflict_point(route, other_route)
            clear = _time_to_cover(
                d_self - veh.s + p.vehicle_length, veh.v, p, topo.speed_limit
            )
            for u in self._leg_q[topo.origin_leg(other_route)]:
                if u.route != other_route or u.crossed:
                    continue
                if u.v <= 0.05:
                    continue  # constant-speed extrapolation: never arrives
                arrival = (d_other - u.s) / u.v
                if arrival <= clear + margin:
                    return False
        return True

    # -- safety accounting ----------------------------------------------------------

    def _track_conflicts(self, veh: Vehicle, s_old, s_new, t0, dt) -> None:
        if not veh.crossed or s_new <= s_old:
            return
        topo = self.topology
        L = self.params.vehicle_length
        for (a, b), (d_a, d_b) in topo.conflict_points.items():
            if a != veh.route:
                continue
            key = (veh.vid, b)
            if key not in self._cp_progress and s_old < d_a <= s_new:
                self._cp_progress[key] = t0 + (d_a - s_old) / (s_new - s_old) * dt
            if key in self._cp_progress and s_old < d_a + L <= s_new:
                t_in = self._cp_progress.pop(key)
                t_out = t0 + (d_a + L - s_old) / (s_new - s_old) * dt
                self._push_window((a, b), veh.vid, t_in, t_out)

    def _finish_conflicts(self, veh: Vehicle, t_rel: float) -> None:
        """Close windows still open at release by extrapolating into the sink."""
        L = self.params.vehicle_length
        speed = max(veh.v, 0.5)
        for (a, b), (d_a, _) in self.topology.conflict_points.items():
            if a != veh.route:
                continue
            key = (veh.vid, b)
            if key in self._cp_progress:
                t_in = self._cp_progress.pop(key)
                remain = d_a + L - self.topology.path_length(a)
                self._push_window((a, b), veh.vid, t_in, t_rel + max(0.0, remain) / speed)

    def _push_window(self, pair, vid, t_in, t_out) -> None:
        a, b = pair
        for (ovid, o_in, o_out) in self._cp_windows[(b, a)]:
            if t_in < o_out - 1e-9 and o_in < t_out - 1e-9:
                raise SimulationError(
                    f"conflict-point overlap on {a} vs {b}: vehicle {vid} "
                    f"[{t_in:.3f}, {t_out:.3f}] against vehicle {ovid} "
                    f"[{o_in:.3f}, {o_out:.3f}]",
                    self.dump_state(),
                )
        self._cp_windows[pair].append((vid, t_in, t_out))

    def _check_gaps(self, t0: float) -> None:
        p = self.params
        for group in (self._leg_q, self._path_q):
            for key, lane in group.items():
                prev = None
                for veh in lane:
                    if prev is not None:
                        gap = prev.s - p.vehicle_length - veh.s
                        if gap < p.min_gap - 1e-6:
                            raise SimulationError(
                                f"minimum-gap violation on {key} at t={t0:.2f}: "
                                f"vehicle {veh.vid} gap {gap:.3f} m behind {prev.vid}",
                                self.dump_state(),
                            )
                    prev = veh

    # -- introspection ---------------------------------------------------------------

    def dump_state(self) -> dict:
        return {
            "clock": self.clock,
            "restrictions": sorted(self.active_restrictions),
            "vehicles": [
                {
                    "vid": v.vid,
                    "route": v.route,
                    "cav": v.is_cav,
                    "s": round(v.s, 3),
                    "v": round(v.v, 3),
                    "halt": v.halt,
                    "crossed": v.crossed,
                }
                for v in sorted(self.vehicles.values(), key=lambda x: x.vid)
            ],
            "totals": self.totals(),
        }

    def _trace_line(self, events: Sequence[ReleaseEvent], signal) -> str:
        rec = {
            "t": self.clock,
            "veh": [
                [v.vid, v.route, "C" if v.is_cav else "H", round(v.s, 4), round(v.v, 4)]
                for v in sorted(self.vehicles.values(), key=lambda x: x.vid)
            ],
            "restr": sorted(self.active_restrictions),
            "phase": None
            if signal is None
            else {"green": sorted(signal.green), "amber": sorted(signal.amber)},
            "rel": [[e.vid, round(e.tau, 4)] for e in events],
        }
        return json.dumps(rec, separators=(",", ":"))


def advance_one_second(
    world: World,
    restrictions: Optional[Iterable[str]] = None,
    signal: Optional[SignalState] = None,
) -> list[ReleaseEvent]:
    """Functional wrapper: apply commands, then advance the world one second."""
    if restrictions is not None:
        world.set_restrictions(restrictions)
    return world.advance_second(signal)
