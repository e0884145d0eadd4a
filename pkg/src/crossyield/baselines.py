"""Reference controllers: static road-sign priorities and traffic lights.

The road-sign baseline simply never restricts anything. The traffic-light
baseline drives the simulator's signal override, either on a fixed-time
cyclic schedule or through a phase-selection policy trained with the same
PPO machinery as the main controller (1-second decisions, amber and all-red
inserted on every phase change, no CAV-free skipping).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .env import EnvReset, EnvStep, ObservationLayout
from .microsim import DriverParams, SignalState, World
from .topology import Topology


class PhaseError(ValueError):
    """Invalid green-phase specification or schedule."""


@dataclass(frozen=True)
class PhaseSet:
    """Green phases of one signal plan plus the clearance times."""

    phases: tuple  # of (frozenset of green routes, minimum green seconds)
    amber: int = 3
    all_red: int = 2

    def __post_init__(self):
        if not self.phases:
            raise PhaseError("need at least one green phase")
        if self.amber < 0 or self.all_red < 0:
            raise PhaseError("clearance times must be nonnegative")
        for green, min_green in self.phases:
            if min_green < 1:
                raise PhaseError("minimum green must be at least 1 s")

    def validate(self, topology: Topology) -> None:
        covered = set()
        for green, _ in self.phases:
            unknown = set(green) - set(topology.routes)
            if unknown:
                raise PhaseError(f"phase greens unknown routes: {sorted(unknown)}")
            covered |= set(green)
            for a in green:
                for b in green:
                    if a < b and topology.conflicting(a, b):
                        # Conflicting greens are allowed only as a permitted
                        # conflict that gap acceptance can resolve.
                        if topology.priority_rank[a] == topology.priority_rank[b]:
                            raise PhaseError(
                                f"phase greens {a} and {b} conflict without a yield order"
                            )
        missing = set(topology.routes) - covered
        if missing:
            raise PhaseError(f"routes never green: {sorted(missing)}")

    @property
    def n_phases(self) -> int:
        return len(self.phases)


def canonical_phase_set(topology: Topology, amber: int = 3, all_red: int = 2) -> PhaseSet:
    """Two-phase plan: protected mainline movements, then everything else."""
    main = frozenset(r for r in topology.routes if topology.priority_rank[r] >= 2)
    rest = frozenset(topology.routes) - main
    if not main or not rest:
        raise PhaseError("topology does not split into mainline and side phases")
    ps = PhaseSet(phases=((main, 5), (rest, 5)), amber=amber, all_red=all_red)
    ps.validate(topology)
    return ps


def rs_controller(observation=None) -> int:
    """Road-sign baseline: always the empty-restriction action."""
    return 0


class FixedTimeSignal:
    """Cyclic fixed-time signal: per-second SignalState emitter.

    The plan starts with one all-red clearance interval, then cycles
    green(i) -> amber(i) -> all-red for every phase in order.
    """

    def __init__(self, phase_set: PhaseSet, greens: Sequence[int]):
        if len(greens) != phase_set.n_phases:
            raise PhaseError("need one green duration per phase")
        for g, (_, min_green) in zip(greens, phase_set.phases):
            if g < min_green:
                raise PhaseError(f"green duration {g} below minimum {min_green}")
        self.phase_set = phase_set
        self.greens = tuple(int(g) for g in greens)
        self._schedule: list[SignalState] = []
        for (green, _), g in zip(phase_set.phases, self.greens):
            self._schedule += [SignalState(green=green)] * g
            if phase_set.n_phases > 1:
                self._schedule += [
                    SignalState(green=frozenset(), amber=green)
                ] * phase_set.amber
                self._schedule += [SignalState(green=frozenset())] * phase_set.all_red

    @property
    def cycle_length(self) -> int:
        return len(self._schedule)

    def signal_at(self, t: int) -> SignalState:
        if t < self.phase_set.all_red:  # initial clearance
            return SignalState(green=frozenset())
        return self._schedule[(t - self.phase_set.all_red) % len(self._schedule)]


def expand_phase_changes(
    phase_set: PhaseSet, decisions: Sequence[int], initial: int = 0
) -> list[SignalState]:
    """Per-second signal sequence for a list of phase decisions.

    Each decision covers one green second; choosing a different phase first
    inserts the mandatory amber (for the old greens) and all-red seconds.
    Used both by the learned phase selector and as its test oracle surface.
    """
    out: list[SignalState] = []
    current = initial
    for want in decisions:
        if want != current:
            old_green = phase_set.phases[current][0]
            out += [SignalState(green=frozenset(), amber=old_green)] * phase_set.amber
            out += [SignalState(green=frozenset())] * phase_set.all_red
            current = want
        out.append(SignalState(green=phase_set.phases[current][0]))
    return out


class TrafficLightEnv:
    """Phase-selection MDP over the simulator for the learned TL baseline.

    Observation = lane-segment encoding plus current-phase one-hot and a
    normalized time-in-phase. A phase change spans amber + all-red + the
    first new green second in a single step (k > 1); holding the phase is a
    one-second step. All vehicles obey the lights, so no states are skipped.
    """

    PHASE_TIME_CLAMP = 120.0

    def __init__(
        self,
        topology: Topology,
        schedule,
        phase_set: PhaseSet,
        *,
        duration: float = 1200.0,
        gamma: float = 0.98,
        eta_a: float = 0.0027,
        eta_b: float = 0.946,
        params: DriverParams = DriverParams(),
        layout: Optional[ObservationLayout] = None,
        record_trace: bool = False,
    ):
        phase_set.validate(topology)
        self.topology = topology
        self.schedule = schedule
        self.phase_set = phase_set
        self.duration = int(duration)
        self.gamma = gamma
        self.eta_a = eta_a
        self.eta_b = eta_b
        self.params = params
        self.layout = layout or ObservationLayout(topology, params)
        self.record_trace = record_trace
        self.world: Optional[World] = None
        self._done = True
        self.phase = 0
        self.time_in_phase = 0

    @property
    def n_actions(self) -> int:
        return self.phase_set.n_phases

    @property
    def obs_dim(self) -> int:
        return self.layout.dim + self.phase_set.n_phases + 1

    @property
    def done(self) -> bool:
        return self._done

    def _observe(self) -> np.ndarray:
        one_hot = np.zeros(self.phase_set.n_phases, dtype=np.float32)
        one_hot[self.phase] = 1.0
        t_norm = min(self.time_in_phase, self.PHASE_TIME_CLAMP) / self.PHASE_TIME_CLAMP
        return np.concatenate(
            [self.layout.encode(self.world), one_hot, [np.float32(t_norm)]]
        )

    def reset(self) -> EnvReset:
        self.world = World(
            self.topology, self.schedule, params=self.params, record_trace=self.record_trace
        )
        self._done = False
        self.phase = 0
        self.time_in_phase = 0
        return EnvReset(
            observation=self._observe(),
            occupancy=self.world.count_vehicles(),
            cav_present=self.world.any_cav(),
        )

    def step(self, action: int) -> EnvStep:
        if self._done or self.world is None:
            raise RuntimeError("step() on a finished episode; call reset()")
        if not 0 <= action < self.n_actions:
            raise ValueError(f"phase index {action} out of range")
        seconds: list[SignalState] = []
        if action != self.phase:
            old_green = self.phase_set.phases[self.phase][0]
            seconds += [
                SignalState(green=frozenset(), amber=old_green)
            ] * self.phase_set.amber
            seconds += [SignalState(green=frozenset())] * self.phase_set.all_red
            self.phase = action
            self.time_in_phase = 0
        seconds.append(SignalState(green=self.phase_set.phases[self.phase][0]))

        reward = 0.0
        k = 0
        released: list[tuple] = []
        for sig in seconds:
            events = self.world.advance_second(sig)
            reward += (self.gamma**k) * sum(
                self.eta_a * e.tau + self.eta_b for e in events
            )
            released.extend((e.vid, e.tau) for e in events)
            k += 1
            self.time_in_phase += 1
            if self.world.clock >= self.duration:
                self._done = True
                break
        return EnvStep(
            observation=self._observe(),
            reward=reward,
            k=k,
            released=tuple(released),
            done=self._done,
            occupancy=self.world.count_vehicles(),
            cav_present=self.world.any_cav(),
        )


@dataclass(frozen=True)
class TrafficLightEnvFactory:
    """Seeded TL training environments, mirroring the main training factory."""

    topology: Topology
    cfg: "TrainConfig"  # noqa: F821 - imported lazily to avoid a cycle
    phase_set: PhaseSet
    params: DriverParams = DriverParams()

    def __call__(self, seed: int) -> TrafficLightEnv:
        from . import demand as demand_mod

        rng = np.random.default_rng(seed)
        if self.cfg.demand_band is not None:
            profile = demand_mod.sample_eval_profile(
                rng, self.topology.routes, self.cfg.demand_band, self.cfg.episode_duration
            )
        else:
            profile = demand_mod.sample_training_profile(
                rng,
                self.topology.routes,
                self.cfg.f_min,
                self.cfg.f_max,
                self.cfg.episode_duration,
            )
        schedule = demand_mod.assign_classes(
            demand_mod.realize_spawns(profile, rng), self.cfg.cav_rate, rng
        )
        return TrafficLightEnv(
            self.topology,
            schedule,
            self.phase_set,
            duration=self.cfg.episode_duration,
            gamma=self.cfg.gamma,
            eta_a=self.cfg.eta_a,
            eta_b=self.cfg.eta_b,
            params=self.params,
        )


def train_tl_agent(
    cfg,
    topology: Topology,
    phase_set: Optional[PhaseSet] = None,
    checkpoint_dir=None,
    params: DriverParams = DriverParams(),
    log=None,
):
    """Train the phase-selection baseline with the shared PPO learner."""
    from .learner import train

    phase_set = phase_set or canonical_phase_set(topology)
    factory = TrafficLightEnvFactory(topology, cfg, phase_set, params)
    probe = factory(0)
    trained, curve = train(
        cfg,
        factory,
        probe.obs_dim,
        probe.n_actions,
        checkpoint_dir=checkpoint_dir,
        log=log,
    )
    return trained, phase_set, curve
