"""Mixed-traffic intersection simulation and learned yielding control."""

from .demand import (
    DemandProfile,
    EVAL_BANDS,
    SpawnEntry,
    SpawnSchedule,
    assign_classes,
    load_count_table,
    realize_spawns,
    sample_eval_profile,
    sample_training_profile,
)
from .env import EnvStep, IntersectionEnv, ObservationLayout, action_to_restrictions
from .learner import (
    RolloutBatch,
    TrainConfig,
    collect_rollouts,
    compute_scaled_returns,
    ppo_update,
    train_cvtsc,
)
from .microsim import DriverParams, ReleaseEvent, SignalState, SimulationError, World
from .nets import PolicyParams, load_checkpoint, policy_forward, save_checkpoint
from .topology import Topology, build_topology, load_topology, preset

__version__ = "0.1.0"

__all__ = [
    "DemandProfile",
    "DriverParams",
    "EVAL_BANDS",
    "EnvStep",
    "IntersectionEnv",
    "ObservationLayout",
    "PolicyParams",
    "ReleaseEvent",
    "RolloutBatch",
    "SignalState",
    "SimulationError",
    "SpawnEntry",
    "SpawnSchedule",
    "Topology",
    "TrainConfig",
    "World",
    "action_to_restrictions",
    "assign_classes",
    "build_topology",
    "collect_rollouts",
    "compute_scaled_returns",
    "load_checkpoint",
    "load_count_table",
    "load_topology",
    "policy_forward",
    "ppo_update",
    "preset",
    "realize_spawns",
    "sample_eval_profile",
    "sample_training_profile",
    "save_checkpoint",
    "train_cvtsc",
]
