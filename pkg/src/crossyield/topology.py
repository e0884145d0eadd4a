"""Intersection topology: routes, conflict geometry, priorities, presets.

A topology describes one junction: its approach legs, the directed routes
(movements) through it, which route pairs conflict inside the junction box,
and the static priority ranking that decides who yields under road signs.

Coordinates are only used internally to locate conflict points. Every route
gets a 1-D coordinate: position 0 is the junction entry (stop line), negative
positions are on the approach lane, positive positions run along the route's
path through the junction box until it reaches an outgoing lane.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

LANE_WIDTH = 3.5  # m, one lane per direction on every road
_PATH_STEP = 0.2  # m, sampling resolution for junction path polylines


class TopologyError(ValueError):
    """Malformed topology specification."""


@dataclass(frozen=True)
class Leg:
    """One approach road, identified by the unit heading of inbound travel."""

    name: str
    heading: tuple[float, float]


@dataclass(frozen=True)
class JunctionPath:
    """Sampled centerline of a route across the junction box."""

    points: np.ndarray  # (n, 2)
    cum_len: np.ndarray  # (n,), cum_len[0] == 0

    @property
    def length(self) -> float:
        return float(self.cum_len[-1])


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = float(np.hypot(v[0], v[1]))
    if n < 1e-12:
        raise TopologyError("zero-length leg heading")
    return v / n


def _left_normal(h: np.ndarray) -> np.ndarray:
    return np.array([-h[1], h[0]])


def _sample_line(p1, p2) -> np.ndarray:
    d = float(np.hypot(*(p2 - p1)))
    n = max(2, int(math.ceil(d / _PATH_STEP)) + 1)
    t = np.linspace(0.0, 1.0, n)
    return p1[None, :] * (1 - t)[:, None] + p2[None, :] * t[:, None]


def _sample_arc(p1, h1, p2, h2) -> np.ndarray:
    """Circular fillet tangent to heading h1 at p1 and h2 at p2."""
    n1, n2 = _left_normal(h1), _left_normal(h2)
    dn = n1 - n2
    denom = float(dn @ dn)
    if denom < 1e-12:
        raise TopologyError("cannot fit arc between parallel headings")
    r = float((p2 - p1) @ dn) / denom
    center = p1 + n1 * r
    if np.hypot(*(p2 + n2 * r - center)) > 1e-6:
        raise TopologyError("route endpoints admit no tangent arc")
    a1 = math.atan2(p1[1] - center[1], p1[0] - center[0])
    a2 = math.atan2(p2[1] - center[1], p2[0] - center[0])
    sweep = a2 - a1
    if r > 0:  # left turn, counterclockwise
        while sweep <= 0:
            sweep += 2 * math.pi
    else:  # right turn, clockwise
        while sweep >= 0:
            sweep -= 2 * math.pi
    arc_len = abs(r) * abs(sweep)
    n = max(2, int(math.ceil(arc_len / _PATH_STEP)) + 1)
    ang = a1 + sweep * np.linspace(0.0, 1.0, n)
    return np.stack(
        [center[0] + abs(r) * np.cos(ang), center[1] + abs(r) * np.sin(ang)], axis=1
    )


def _build_path(p_in, h_in, p_out, h_out) -> JunctionPath:
    cross = h_in[0] * h_out[1] - h_in[1] * h_out[0]
    if abs(cross) < 1e-9:
        off = p_out - p_in
        if abs(h_in[0] * off[1] - h_in[1] * off[0]) > 1e-6:
            raise TopologyError("straight route with laterally offset endpoints")
        pts = _sample_line(p_in, p_out)
    else:
        pts = _sample_arc(p_in, h_in, p_out, h_out)
    seg = np.hypot(*np.diff(pts, axis=0).T)
    return JunctionPath(points=pts, cum_len=np.concatenate([[0.0], np.cumsum(seg)]))


def _polyline_intersection(a: JunctionPath, b: JunctionPath):
    """First crossing of two path centerlines as arc lengths (d_a, d_b).

    Coincident endpoints (merging routes) count as a crossing at the paths'
    ends. Returns None when the centerlines never meet.
    """
    pa, pb = a.points, b.points
    best = None
    for i in range(len(pa) - 1):
        p, r = pa[i], pa[i + 1] - pa[i]
        for j in range(len(pb) - 1):
            q, s = pb[j], pb[j + 1] - pb[j]
            denom = r[0] * s[1] - r[1] * s[0]
            qp = q - p
            if abs(denom) < 1e-14:
                continue
            t = (qp[0] * s[1] - qp[1] * s[0]) / denom
            u = (qp[0] * r[1] - qp[1] * r[0]) / denom
            if -1e-9 <= t <= 1 + 1e-9 and -1e-9 <= u <= 1 + 1e-9:
                da = a.cum_len[i] + t * (a.cum_len[i + 1] - a.cum_len[i])
                db = b.cum_len[j] + u * (b.cum_len[j + 1] - b.cum_len[j])
                if best is None or da < best[0]:
                    best = (float(da), float(db))
    if best is not None:
        return best
    if np.hypot(*(pa[-1] - pb[-1])) < 1e-6:  # pure merge at a shared exit
        return (a.length, b.length)
    return None


@dataclass(frozen=True)
class Topology:
    """Validated description of one intersection."""

    name: str
    legs: tuple[Leg, ...]
    routes: tuple[str, ...]
    conflicts: frozenset  # of frozenset({route_a, route_b})
    priority_rank: Mapping[str, int]
    action_sets: tuple[frozenset, ...]
    approach_length: float
    speed_limit: float
    stop_line_offset: Mapping[str, float]
    junction_paths: Mapping[str, JunctionPath]
    conflict_points: Mapping[tuple[str, str], tuple[float, float]]

    # -- structural queries ---------------------------------------------------

    def origin_leg(self, route: str) -> str:
        return route.split("-")[0]

    def dest_leg(self, route: str) -> str:
        return route.split("-")[1]

    def leg_names(self) -> tuple[str, ...]:
        return tuple(leg.name for leg in self.legs)

    def routes_from(self, leg: str) -> tuple[str, ...]:
        return tuple(r for r in self.routes if self.origin_leg(r) == leg)

    def conflicting(self, a: str, b: str) -> bool:
        return frozenset((a, b)) in self.conflicts

    def conflicts_of(self, route: str) -> tuple[str, ...]:
        return tuple(r for r in self.routes if self.conflicting(route, r))

    def yields_to(self, a: str, b: str) -> bool:
        """True when route a must give way to conflicting route b."""
        return self.conflicting(a, b) and self.priority_rank[a] < self.priority_rank[b]

    def priority_class(self, route: str) -> str:
        """'high' when the route has priority over some conflicting route."""
        return "high" if route in self.restrictable_routes() else "low"

    def restrictable_routes(self) -> frozenset:
        return frozenset(
            r for r in self.routes if any(self.yields_to(o, r) for o in self.routes)
        )

    def conflict_point(self, a: str, b: str) -> tuple[float, float]:
        """Conflict location as (distance along a, distance along b)."""
        return self.conflict_points[(a, b)]

    def path_length(self, route: str) -> float:
        return self.junction_paths[route].length

    def hold_position(self, route: str) -> float:
        """Where a stopped vehicle's front bumper waits (at the stop line)."""
        return -self.stop_line_offset[route]


def build_topology(spec: Mapping) -> Topology:
    """Build and validate a Topology from a structured description.

    Expected keys: ``legs`` {name: [hx, hy]}, ``routes`` [names],
    ``conflicts`` [[a, b], ...] or {route: [routes]}, ``priority`` {route: rank},
    ``action_sets`` [[routes], ...]; optional ``name``, ``approach_length``,
    ``speed_limit``, ``stop_line_offset`` {route: m}.
    """
    try:
        legs = tuple(Leg(n, tuple(_unit(h))) for n, h in spec["legs"].items())
        routes = tuple(spec["routes"])
        rank = dict(spec["priority"])
    except KeyError as exc:
        raise TopologyError(f"missing topology key: {exc}") from exc

    leg_names = {l.name for l in legs}
    if len(leg_names) != len(legs):
        raise TopologyError("duplicate leg names")
    if len(set(routes)) != len(routes):
        raise TopologyError("duplicate route names")
    for r in routes:
        parts = r.split("-")
        if len(parts) != 2 or parts[0] not in leg_names or parts[1] not in leg_names:
            raise TopologyError(f"route {r!r} does not join two known legs")
        if parts[0] == parts[1]:
            raise TopologyError(f"route {r!r} is a U-turn; not supported")

    raw_conflicts = spec["conflicts"]
    pairs = set()
    if isinstance(raw_conflicts, Mapping):
        for a, others in raw_conflicts.items():
            for b in others:
                pairs.add((a, b))
        for a, b in list(pairs):
            if (b, a) not in pairs:
                raise TopologyError(f"asymmetric conflict declaration: {a} vs {b}")
    else:
        for a, b in raw_conflicts:
            pairs.add((a, b))
            pairs.add((b, a))
    conflicts = set()
    for a, b in pairs:
        if a == b:
            raise TopologyError(f"route {a!r} cannot conflict with itself")
        if a not in routes or b not in routes:
            raise TopologyError(f"conflict references unknown route: {a}, {b}")
        conflicts.add(frozenset((a, b)))

    if set(rank) != set(routes):
        raise TopologyError("priority must rank every route exactly once")
    for pair in conflicts:
        a, b = tuple(pair)
        if rank[a] == rank[b]:
            raise TopologyError(f"conflicting routes {a}, {b} share priority rank")

    approach_length = float(spec.get("approach_length", 150.0))
    speed_limit = float(spec.get("speed_limit", 13.89))
    if approach_length <= 0:
        raise TopologyError("approach_length must be positive")
    if speed_limit <= 0:
        raise TopologyError("speed_limit must be positive")

    offsets = {r: 0.0 for r in routes}
    for r, v in dict(spec.get("stop_line_offset", {})).items():
        if r not in routes:
            raise TopologyError(f"stop_line_offset for unknown route {r!r}")
        offsets[r] = float(v)
    for r, v in offsets.items():
        if not 0.0 <= v <= approach_length:
            raise TopologyError(f"stop_line_offset[{r}] outside [0, approach_length]")

    # Junction geometry: junction box half-size equals the road half-width.
    leg_by_name = {l.name: l for l in legs}
    half = LANE_WIDTH
    paths = {}
    for r in routes:
        o, d = r.split("-")
        h_in = np.asarray(leg_by_name[o].heading)
        h_out = -np.asarray(leg_by_name[d].heading)
        p_in = -h_in * half + np.array([h_in[1], -h_in[0]]) * (LANE_WIDTH / 2)
        p_out = h_out * half + np.array([h_out[1], -h_out[0]]) * (LANE_WIDTH / 2)
        paths[r] = _build_path(p_in, h_in, p_out, h_out)

    cps = {}
    for pair in conflicts:
        a, b = sorted(pair)
        hit = _polyline_intersection(paths[a], paths[b])
        if hit is None:
            raise TopologyError(f"declared conflict {a} vs {b} has no shared point")
        cps[(a, b)] = hit
        cps[(b, a)] = (hit[1], hit[0])

    topo = Topology(
        name=str(spec.get("name", "custom")),
        legs=legs,
        routes=routes,
        conflicts=frozenset(conflicts),
        priority_rank=rank,
        action_sets=(),
        approach_length=approach_length,
        speed_limit=speed_limit,
        stop_line_offset=offsets,
        junction_paths=paths,
        conflict_points=cps,
    )

    action_sets = [frozenset(s) for s in spec.get("action_sets", [[]])]
    restrictable = topo.restrictable_routes()
    if not action_sets or action_sets[0] != frozenset():
        raise TopologyError("action_sets must start with the empty set")
    for s in action_sets:
        bad = s - restrictable
        if bad:
            raise TopologyError(f"action set restricts non-priority routes: {sorted(bad)}")
    object.__setattr__(topo, "action_sets", tuple(action_sets))
    return topo


def load_topology(path) -> Topology:
    """Read a topology spec from a JSON file (documented key set)."""
    with open(path, "r", encoding="utf-8") as fh:
        return build_topology(json.load(fh))


# -- presets -------------------------------------------------------------------

THREE_WAY_SPEC = {
    "name": "three_way",
    # Main road runs W-E, the side road joins from the south.
    "legs": {"W": [1, 0], "E": [-1, 0], "S": [0, 1]},
    "routes": ["W-E", "W-S", "E-W", "E-S", "S-W", "S-E"],
    "conflicts": [
        ["W-E", "S-W"],
        ["W-E", "E-S"],
        ["W-E", "S-E"],
        ["E-W", "S-W"],
        ["E-S", "S-W"],
        ["W-S", "E-S"],
    ],
    # Rank 2: protected main-road movements. Rank 1: the main-road left turn,
    # which yields to oncoming traffic but beats the side road. Rank 0: side road.
    "priority": {"W-E": 2, "W-S": 2, "E-W": 2, "E-S": 1, "S-W": 0, "S-E": 0},
    "action_sets": [[], ["W-E"], ["W-E", "W-S"], ["W-E", "E-W", "E-S"]],
}

TULLASTRASSE_SPEC = {
    "name": "tullastrasse",
    # Main road runs N-S, the side road joins from the east.
    "legs": {"N": [0, -1], "S": [0, 1], "E": [-1, 0]},
    "routes": ["N-S", "N-E", "S-N", "S-E", "E-N", "E-S"],
    "conflicts": [
        ["S-N", "E-S"],
        ["S-N", "N-E"],
        ["S-N", "E-N"],
        ["N-S", "E-S"],
        ["N-E", "E-S"],
        ["S-E", "N-E"],
    ],
    "priority": {"S-N": 2, "S-E": 2, "N-S": 2, "N-E": 1, "E-S": 0, "E-N": 0},
    "action_sets": [[], ["S-N"], ["S-N", "S-E"], ["S-N", "N-S", "N-E"]],
}

_PRESETS = {"three_way": THREE_WAY_SPEC, "tullastrasse": TULLASTRASSE_SPEC}


def preset(name: str) -> Topology:
    """Built-in topologies: ``three_way`` and ``tullastrasse``."""
    try:
        return build_topology(_PRESETS[name])
    except KeyError:
        raise TopologyError(f"unknown preset {name!r}; have {sorted(_PRESETS)}")
