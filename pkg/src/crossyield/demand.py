"""Traffic demand: synthetic episode profiles, real count tables, spawning.

A demand profile stores one piecewise-linear flow curve (vehicles per hour)
per route. Synthetic training and evaluation profiles are straight lines
between a sampled begin and end total, split across routes on a uniform
simplex. Real-world 15-minute count tables become piecewise-constant
profiles. Spawn schedules are drawn from a nonhomogeneous Poisson process
whose rate follows the profile, then labeled CAV/HV at a penetration rate.

All sampling goes through an explicit numpy Generator, so every artifact is
reproducible from its seed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Mapping, Sequence

import numpy as np

# Evaluation bands for total traffic input, v/h.
EVAL_BANDS: tuple[tuple[float, float], ...] = (
    (0.0, 1000.0),
    (500.0, 1500.0),
    (1000.0, 2000.0),
    (1500.0, 2500.0),
    (2000.0, 3000.0),
)

# Largest allowed |F_end - F_begin| when sampling synthetic training demand.
TRAINING_MAX_SWING = 1500.0


class DemandError(ValueError):
    """Malformed demand input."""


@dataclass(frozen=True)
class SpawnEntry:
    time: float
    route: str
    is_cav: bool = False


@dataclass(frozen=True)
class SpawnSchedule:
    """Time-sorted spawn list with class labels."""

    entries: tuple[SpawnEntry, ...]

    def __post_init__(self):
        times = [e.time for e in self.entries]
        if any(b < a for a, b in zip(times, times[1:])):
            raise DemandError("spawn entries must be sorted by time")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def cav_fraction(self) -> float:
        if not self.entries:
            return 0.0
        return sum(e.is_cav for e in self.entries) / len(self.entries)

    def to_json(self) -> dict:
        return {
            "entries": [[e.time, e.route, int(e.is_cav)] for e in self.entries]
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "SpawnSchedule":
        return cls(
            entries=tuple(
                SpawnEntry(float(t), r, bool(c)) for t, r, c in obj["entries"]
            )
        )


class DemandProfile:
    """Per-route piecewise-linear flow curves over one episode."""

    def __init__(self, duration: float, times: Sequence[float], flows: Mapping[str, Sequence[float]]):
        self.duration = float(duration)
        self.times = np.asarray(times, dtype=float)
        self.flows = {r: np.asarray(f, dtype=float) for r, f in flows.items()}
        if self.duration <= 0:
            raise DemandError("duration must be positive")
        if np.any(np.diff(self.times) < 0):
            raise DemandError("profile breakpoints must be non-decreasing")
        for r, f in self.flows.items():
            if f.shape != self.times.shape:
                raise DemandError(f"flow vector shape mismatch for route {r}")
            if np.any(f < 0):
                raise DemandError(f"negative flow on route {r}")

    @property
    def routes(self) -> tuple[str, ...]:
        return tuple(self.flows)

    @classmethod
    def linear(cls, duration: float, endpoints: Mapping[str, tuple[float, float]]) -> "DemandProfile":
        """Straight-line interpolation between begin and end flow per route."""
        times = [0.0, float(duration)]
        flows = {r: [float(b), float(e)] for r, (b, e) in endpoints.items()}
        return cls(duration, times, flows)

    @classmethod
    def piecewise_constant(
        cls, bin_seconds: float, counts: Mapping[str, Sequence[float]]
    ) -> "DemandProfile":
        """Step profile from per-bin vehicle counts (flow = count * 3600/bin)."""
        n = {len(v) for v in counts.values()}
        if len(n) != 1:
            raise DemandError("all routes need the same number of count bins")
        nbins = n.pop()
        duration = bin_seconds * nbins
        times, flows = [], {r: [] for r in counts}
        for i in range(nbins):
            times += [i * bin_seconds, (i + 1) * bin_seconds]
            for r, vals in counts.items():
                f = float(vals[i]) * 3600.0 / bin_seconds
                flows[r] += [f, f]
        return cls(duration, times, flows)

    def flow(self, route: str, t: float) -> float:
        """Instantaneous flow (v/h) of one route at time t."""
        return float(np.interp(t, self.times, self.flows[route]))

    def total_flow(self, t: float) -> float:
        return sum(self.flow(r, t) for r in self.flows)

    def peak_flow(self, route: str) -> float:
        return float(self.flows[route].max(initial=0.0))

    def expected_count(self, route: str) -> float:
        """Time integral of the route's flow, in vehicles."""
        return float(np.trapz(self.flows[route], self.times)) / 3600.0

    def to_json(self) -> dict:
        return {
            "duration": self.duration,
            "times": self.times.tolist(),
            "flows": {r: f.tolist() for r, f in self.flows.items()},
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "DemandProfile":
        return cls(obj["duration"], obj["times"], obj["flows"])


def _simplex_split(rng: np.random.Generator, n: int, total: float) -> np.ndarray:
    """Uniform split of ``total`` over n nonnegative parts that sum exactly."""
    if total <= 0:
        return np.zeros(n)
    parts = rng.dirichlet(np.ones(n)) * total
    parts[-1] = total - parts[:-1].sum()  # kill the floating-point residue
    return parts


def sample_training_profile(
    rng: np.random.Generator,
    routes: Sequence[str],
    f_min: float = 0.0,
    f_max: float = 3000.0,
    duration: float = 1200.0,
) -> DemandProfile:
    """Synthetic training demand: drifting total flow, uniform route split.

    The episode's total begins uniformly in [f_min, f_max] and ends uniformly
    within 1500 v/h of the begin value, clamped back into the range.
    """
    if not 0 <= f_min < f_max:
        raise DemandError("need 0 <= f_min < f_max")
    f_begin = rng.uniform(f_min, f_max)
    lo = max(f_min, f_begin - TRAINING_MAX_SWING)
    hi = min(f_max, f_begin + TRAINING_MAX_SWING)
    f_end = rng.uniform(lo, hi)
    begin = _simplex_split(rng, len(routes), f_begin)
    end = _simplex_split(rng, len(routes), f_end)
    return DemandProfile.linear(
        duration, {r: (begin[i], end[i]) for i, r in enumerate(routes)}
    )


def sample_eval_profile(
    rng: np.random.Generator,
    routes: Sequence[str],
    band: tuple[float, float],
    duration: float = 3600.0,
) -> DemandProfile:
    """Evaluation demand: begin and end totals drawn independently in a band."""
    lo, hi = band
    if lo < 0 or hi < lo:
        raise DemandError("band must satisfy 0 <= low <= high")
    f_begin = rng.uniform(lo, hi)
    f_end = rng.uniform(lo, hi)
    begin = _simplex_split(rng, len(routes), f_begin)
    end = _simplex_split(rng, len(routes), f_end)
    return DemandProfile.linear(
        duration, {r: (begin[i], end[i]) for i, r in enumerate(routes)}
    )


def realize_spawns(profile: DemandProfile, rng: np.random.Generator) -> SpawnSchedule:
    """Draw spawn times from a nonhomogeneous Poisson process per route.

    Thinning against the route's peak rate; the expected count per route is
    the time integral of its flow. Entries come back unlabeled (all HV).
    """
    entries: list[SpawnEntry] = []
    for route in profile.routes:
        peak = profile.peak_flow(route) / 3600.0
        if peak <= 0:
            continue
        t = 0.0
        while True:
            t += rng.exponential(1.0 / peak)
            if t >= profile.duration:
                break
            if rng.random() * peak <= profile.flow(route, t) / 3600.0:
                entries.append(SpawnEntry(time=t, route=route))
    entries.sort(key=lambda e: (e.time, e.route))
    return SpawnSchedule(entries=tuple(entries))


def assign_classes(
    schedule: SpawnSchedule, cav_rate: float, rng: np.random.Generator
) -> SpawnSchedule:
    """Label each entry CAV with probability cav_rate, keeping times/routes.

    Relabeling the same base schedule at different rates preserves the
    (time, route) sequence exactly, which is what keeps cross-rate
    comparisons on identical traffic.
    """
    if not 0.0 <= cav_rate <= 1.0:
        raise DemandError("cav_rate must lie in [0, 1]")
    flags = rng.random(len(schedule.entries)) < cav_rate
    return SpawnSchedule(
        entries=tuple(
            SpawnEntry(e.time, e.route, bool(f))
            for e, f in zip(schedule.entries, flags)
        )
    )


# -- real-world count tables -------------------------------------------------------


def _parse_clock(label: str) -> int:
    try:
        h, m = label.strip().split(":")
        return int(h) * 60 + int(m)
    except ValueError as exc:
        raise DemandError(f"bad time-bin label {label!r}") from exc


def load_count_table(path, routes: Sequence[str] | None = None) -> list[DemandProfile]:
    """Read a 15-minute count CSV into piecewise-constant demand profiles.

    Layout: header ``direction,<H:MM>,...`` with one column per 15-minute
    bin; one row per movement. Consecutive bin labels are grouped into
    blocks (a jump larger than 15 minutes starts a new block, e.g. a morning
    and an afternoon rush hour); each block becomes one profile.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0].strip().lower() != "direction":
        raise DemandError("count table must start with a 'direction' header row")
    labels = [c.strip() for c in rows[0][1:]]
    minutes = [_parse_clock(c) for c in labels]
    if any(b <= a for a, b in zip(minutes, minutes[1:])):
        raise DemandError("count-table bins must be strictly increasing in time")

    blocks: list[list[int]] = [[0]]
    for i in range(1, len(minutes)):
        if minutes[i] - minutes[i - 1] == 15:
            blocks[-1].append(i)
        else:
            blocks.append([i])

    counts: dict[str, list[float]] = {}
    for row in rows[1:]:
        if not row or not row[0].strip():
            continue
        name = row[0].strip()
        if routes is not None and name not in routes:
            raise DemandError(f"unknown movement label {name!r}")
        vals = row[1:]
        if len(vals) != len(labels):
            raise DemandError(f"row {name!r} has {len(vals)} bins, expected {len(labels)}")
        try:
            nums = [float(v) for v in vals]
        except ValueError as exc:
            raise DemandError(f"non-numeric count in row {name!r}") from exc
        if any(v < 0 for v in nums):
            raise DemandError(f"negative count in row {name!r}")
        counts[name] = nums
    if routes is not None:
        missing = set(routes) - set(counts)
        if missing:
            raise DemandError(f"count table misses movements: {sorted(missing)}")

    profiles = []
    for block in blocks:
        profiles.append(
            DemandProfile.piecewise_constant(
                900.0, {r: [counts[r][i] for i in block] for r in counts}
            )
        )
    return profiles


def tullastrasse_counts_path():
    """Path of the packaged rush-hour count table for the tullastrasse preset."""
    return resources.files("crossyield").joinpath("data/tullastrasse_counts.csv")


def save_demand(path, profile: DemandProfile, schedule: SpawnSchedule, meta: Mapping | None = None) -> None:
    obj = {"profile": profile.to_json(), "schedule": schedule.to_json()}
    if meta:
        obj["meta"] = dict(meta)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh)


def load_demand(path) -> tuple[DemandProfile, SpawnSchedule, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    return (
        DemandProfile.from_json(obj["profile"]),
        SpawnSchedule.from_json(obj["schedule"]),
        obj.get("meta", {}),
    )
