"""Proximal policy optimization over the intersection environment.

Steps have variable length (k seconds), so returns discount across steps by
gamma raised to summed step lengths. Returns are optionally rescaled by an
occupancy factor so that near-empty and saturated states contribute at
comparable magnitude to the update. Gradients are computed analytically by
the numpy backprop in ``nets``; the optimizer is Adam with decoupled weight
decay.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import multiprocessing as mp
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import demand as demand_mod
from .env import IntersectionEnv, ObservationLayout
from .microsim import DriverParams
from .nets import (
    AdamW,
    PolicyParams,
    log_softmax,
    mlp_backward,
    mlp_forward,
    policy_forward,
    save_checkpoint,
    softmax,
)
from .topology import Topology

RETURN_CONVENTIONS = ("skip_first", "elapsed")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters; defaults follow the published training setup.

    ``return_convention`` selects how rewards discount across step
    boundaries: "skip_first" leaves the immediately following step's reward
    undiscounted (within-step per-second discounting is already inside each
    reward), "elapsed" discounts every future reward by the full number of
    elapsed seconds.
    """

    gamma: float = 0.98
    clip_eps: float = 0.001
    actors: int = 32
    minibatch: int = 100
    epochs: int = 8
    lr: float = 5e-6
    weight_decay: float = 1e-3
    return_scaling: bool = True
    scaling_exponent: float = 0.2
    eta_a: float = 0.0027
    eta_b: float = 0.946
    episode_duration: float = 1200.0
    hidden: tuple = (256, 128)
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    advantage_norm: bool = False
    return_convention: str = "skip_first"
    iterations: int = 50
    eval_every: int = 10
    eval_episodes: int = 2
    cav_rate: float = 0.5
    f_min: float = 0.0
    f_max: float = 3000.0
    demand_band: Optional[tuple] = None  # focus training demand on one band
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if self.scaling_exponent < 0:
            raise ValueError("scaling_exponent must be nonnegative")
        if self.return_convention not in RETURN_CONVENTIONS:
            raise ValueError(f"return_convention must be one of {RETURN_CONVENTIONS}")

    def to_json(self) -> dict:
        obj = dataclasses.asdict(self)
        obj["hidden"] = list(self.hidden)
        if self.demand_band is not None:
            obj["demand_band"] = list(self.demand_band)
        return obj

    @classmethod
    def from_json(cls, obj) -> "TrainConfig":
        obj = dict(obj)
        if "hidden" in obj:
            obj["hidden"] = tuple(obj["hidden"])
        if obj.get("demand_band") is not None:
            obj["demand_band"] = tuple(obj["demand_band"])
        return cls(**obj)

    def config_hash(self) -> str:
        text = json.dumps(self.to_json(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:12]


@dataclass
class RolloutBatch:
    """Transitions collected under one policy snapshot.

    ``trainable`` marks transitions whose source state contained a CAV;
    CAV-free states are kept for correct discounting but removed from the
    update (state-removal rule).
    """

    obs: np.ndarray  # (n, obs_dim) float32
    actions: np.ndarray  # (n,) int64
    logp: np.ndarray  # (n,) float64, under the snapshot policy
    rewards: np.ndarray  # (n,) float64
    k: np.ndarray  # (n,) int64, step lengths in seconds
    n_current: np.ndarray  # (n,) int64
    n_capacity: np.ndarray  # (n,) int64
    done: np.ndarray  # (n,) bool
    episode: np.ndarray  # (n,) int64
    trainable: np.ndarray  # (n,) bool

    def __len__(self) -> int:
        return len(self.actions)

    def episode_slices(self) -> list[slice]:
        out = []
        ids = self.episode
        start = 0
        for i in range(1, len(ids) + 1):
            if i == len(ids) or ids[i] != ids[start]:
                out.append(slice(start, i))
                start = i
        return out

    @classmethod
    def concatenate(cls, parts: Sequence["RolloutBatch"]) -> "RolloutBatch":
        return cls(
            **{
                f.name: np.concatenate([getattr(p, f.name) for p in parts])
                for f in dataclasses.fields(cls)
            }
        )


def compute_scaled_returns(batch: RolloutBatch, cfg: TrainConfig) -> np.ndarray:
    """Per-transition returns with adaptive discounting and return scaling.

    Unscaled recursion ("skip_first"): G[n] = r[n] + gamma^(k[n+1]) * G[n+1];
    the reward of the immediately following step crosses the boundary
    undiscounted because each step reward already carries its internal
    per-second discounting. Episodes are complete, so terminal value is 0.
    The scaling factor rho = (capacity / max(n_current, 1))^exponent
    multiplies each state's whole return.
    """
    g = np.zeros(len(batch), dtype=np.float64)
    for sl in batch.episode_slices():
        r = batch.rewards[sl]
        kk = batch.k[sl]
        acc = 0.0
        out = np.zeros(len(r))
        for i in range(len(r) - 1, -1, -1):
            if i == len(r) - 1:
                acc = r[i]
            elif cfg.return_convention == "skip_first":
                acc = r[i] + (cfg.gamma ** kk[i + 1]) * acc
            else:
                acc = r[i] + (cfg.gamma ** kk[i]) * acc
            out[i] = acc
        g[sl] = out
    if cfg.return_scaling:
        n = np.maximum(batch.n_current, 1).astype(np.float64)
        rho = (batch.n_capacity.astype(np.float64) / n) ** cfg.scaling_exponent
        g = g * rho
    return g


# -- loss and gradients -----------------------------------------------------------


def ppo_loss_and_grads(
    params: PolicyParams,
    obs: np.ndarray,
    actions: np.ndarray,
    old_logp: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    cfg: TrainConfig,
):
    """PPO clipped-surrogate total loss with analytic gradients.

    Returns (loss, grads, diagnostics); the decoupled weight decay is not
    part of the loss (the optimizer applies it directly).
    """
    x = np.asarray(obs, dtype=np.float64)
    n = x.shape[0]
    logits, cache_p = mlp_forward(params.policy, x)
    lp_all = log_softmax(logits)
    probs = np.exp(lp_all)
    lp = lp_all[np.arange(n), actions]
    ratio = np.exp(lp - old_logp)
    lo, hi = 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps
    s1 = ratio * advantages
    s2 = np.clip(ratio, lo, hi) * advantages
    obj = np.minimum(s1, s2)
    policy_loss = -obj.mean()

    entropy = -(probs * lp_all).sum(axis=1)
    v_out, cache_v = mlp_forward(params.value, x)
    v = v_out[:, 0]
    value_loss = ((v - returns) ** 2).mean()

    loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy.mean()
    if not np.isfinite(loss):
        raise RuntimeError(
            "non-finite PPO loss; minibatch dump: "
            + json.dumps(
                {
                    "ratio_range": [float(np.min(ratio)), float(np.max(ratio))],
                    "adv_range": [float(np.min(advantages)), float(np.max(advantages))],
                    "returns_range": [float(np.min(returns)), float(np.max(returns))],
                    "actions": actions.tolist(),
                }
            )
        )

    # d loss / d chosen log-prob: active when the unclipped branch is the min.
    unclipped_active = s1 <= s2
    g_lp = np.where(unclipped_active, -ratio * advantages, 0.0) / n
    d_logits = g_lp[:, None] * (np.eye(params.n_actions)[actions] - probs)
    if cfg.entropy_coef:
        d_logits += (cfg.entropy_coef / n) * probs * (lp_all + entropy[:, None])
    grads_policy = mlp_backward(params.policy, cache_p, d_logits)

    d_v = (cfg.value_coef * 2.0 / n) * (v - returns)
    grads_value = mlp_backward(params.value, cache_v, d_v[:, None])

    diagnostics = {
        "loss": float(loss),
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": float(entropy.mean()),
        "mean_ratio": float(ratio.mean()),
        "clip_fraction": float(np.mean(~unclipped_active)),
    }
    return float(loss), {"policy": grads_policy, "value": grads_value}, diagnostics


def ppo_update(
    params: PolicyParams,
    batch: RolloutBatch,
    returns: np.ndarray,
    cfg: TrainConfig,
    optimizer: AdamW,
    rng: np.random.Generator,
) -> dict:
    """Run the configured epochs of minibatch updates in place.

    Advantage is plain G - V(s) under the pre-update value head; CAV-free
    source states are excluded from the update.
    """
    if len(batch) == 0:
        return {"updates": 0}
    idx = np.flatnonzero(batch.trainable)
    if idx.size == 0:
        return {"updates": 0}
    from .nets import value_forward

    values = value_forward(params, batch.obs[idx].astype(np.float64))
    advantages = returns[idx] - values
    if cfg.advantage_norm and idx.size > 1:
        advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)

    stats: dict[str, float] = {}
    updates = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(idx.size)
        for start in range(0, idx.size, cfg.minibatch):
            mb = order[start : start + cfg.minibatch]
            rows = idx[mb]
            _, grads, diag = ppo_loss_and_grads(
                params,
                batch.obs[rows],
                batch.actions[rows],
                batch.logp[rows],
                advantages[mb],
                returns[rows],
                cfg,
            )
            optimizer.step(params, grads)
            updates += 1
            for key, val in diag.items():
                stats[key] = stats.get(key, 0.0) + val
    if not params.check_finite():
        raise RuntimeError("parameters became non-finite during the update")
    out = {k: v / updates for k, v in stats.items()}
    out["updates"] = updates
    out["transitions"] = int(idx.size)
    return out


# -- rollout collection -------------------------------------------------------------


@dataclass(frozen=True)
class TrainingEnvFactory:
    """Builds one seeded training environment per actor episode.

    Demand is sampled fresh per episode: drifting totals over the configured
    range (or focused on one band), split across routes, realized as Poisson
    arrivals and labeled at the configured CAV rate.
    """

    topology: Topology
    cfg: TrainConfig
    params: DriverParams = DriverParams()

    def __call__(self, seed: int) -> IntersectionEnv:
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
        return IntersectionEnv(
            self.topology,
            schedule,
            duration=self.cfg.episode_duration,
            gamma=self.cfg.gamma,
            eta_a=self.cfg.eta_a,
            eta_b=self.cfg.eta_b,
            params=self.params,
        )


def _collect_episode(args) -> RolloutBatch:
    params, env_factory, seed, episode_id = args
    env = env_factory(seed)
    rng = np.random.default_rng(seed + 0x9E3779B9)
    obs_l, act_l, logp_l, rew_l, k_l, ncur_l, ncap_l, done_l, train_l = (
        [] for _ in range(9)
    )
    state = env.reset()
    obs, occ, cav = state.observation, state.occupancy, state.cav_present
    while True:
        probs = policy_forward(params, obs)
        action = int(rng.choice(len(probs), p=probs))
        step = env.step(action)
        obs_l.append(obs)
        act_l.append(action)
        logp_l.append(float(np.log(probs[action])))
        rew_l.append(step.reward)
        k_l.append(step.k)
        ncur_l.append(occ[0])
        ncap_l.append(occ[1])
        done_l.append(step.done)
        train_l.append(cav)
        obs, occ, cav = step.observation, step.occupancy, step.cav_present
        if step.done:
            break
    n = len(act_l)
    return RolloutBatch(
        obs=np.asarray(obs_l, dtype=np.float32),
        actions=np.asarray(act_l, dtype=np.int64),
        logp=np.asarray(logp_l, dtype=np.float64),
        rewards=np.asarray(rew_l, dtype=np.float64),
        k=np.asarray(k_l, dtype=np.int64),
        n_current=np.asarray(ncur_l, dtype=np.int64),
        n_capacity=np.asarray(ncap_l, dtype=np.int64),
        done=np.asarray(done_l, dtype=bool),
        episode=np.full(n, episode_id, dtype=np.int64),
        trainable=np.asarray(train_l, dtype=bool),
    )


def collect_rollouts(
    params: PolicyParams,
    env_factory: Callable[[int], IntersectionEnv],
    cfg: TrainConfig,
    seed: int,
) -> RolloutBatch:
    """Run one full episode per actor under the snapshot policy."""
    seeds = np.random.SeedSequence(seed).generate_state(cfg.actors).tolist()
    jobs = [(params, env_factory, s, i) for i, s in enumerate(seeds)]
    if cfg.workers > 1:
        with mp.get_context("spawn").Pool(cfg.workers) as pool:
            parts = pool.map(_collect_episode, jobs)
    else:
        parts = [_collect_episode(job) for job in jobs]
    return RolloutBatch.concatenate(parts)


# -- training loop -------------------------------------------------------------------


def greedy_action(params: PolicyParams, obs: np.ndarray) -> int:
    return int(np.argmax(policy_forward(params, obs)))


def train(
    cfg: TrainConfig,
    env_factory: Callable[[int], IntersectionEnv],
    obs_dim: int,
    n_actions: int,
    checkpoint_dir=None,
    evaluator: Optional[Callable[[PolicyParams, int], list[dict]]] = None,
    log: Optional[Callable[[str], None]] = None,
) -> tuple[PolicyParams, list[dict]]:
    """Alternate rollout collection and PPO updates.

    ``evaluator(params, iteration)`` may return curve rows (dicts) that are
    collected and, when a checkpoint directory is given, written to
    training_curve.csv next to the checkpoints.
    """
    rng = np.random.default_rng(cfg.seed)
    params = PolicyParams.create(rng, obs_dim, n_actions, cfg.hidden)
    optimizer = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    curve: list[dict] = []

    def emit(msg: str) -> None:
        if log:
            log(msg)

    for it in range(cfg.iterations):
        batch = collect_rollouts(params, env_factory, cfg, seed=cfg.seed * 100003 + it)
        returns = compute_scaled_returns(batch, cfg)
        diag = ppo_update(params, batch, returns, cfg, optimizer, rng)
        emit(
            f"iter {it}: transitions={diag.get('transitions', 0)} "
            f"loss={diag.get('loss', float('nan')):.4f} "
            f"ratio={diag.get('mean_ratio', float('nan')):.4f}"
        )
        last = it == cfg.iterations - 1
        if evaluator is not None and (last or (it + 1) % cfg.eval_every == 0):
            rows = evaluator(params, it)
            curve.extend(rows)
            for row in rows:
                emit(f"  eval {row}")
        if checkpoint_dir is not None and (last or (it + 1) % cfg.eval_every == 0):
            save_checkpoint(
                os.path.join(checkpoint_dir, f"iter_{it + 1:05d}"),
                params,
                extra={"config_hash": cfg.config_hash(), "iteration": it + 1},
            )
    if checkpoint_dir is not None:
        save_checkpoint(
            os.path.join(checkpoint_dir, "final"),
            params,
            extra={"config_hash": cfg.config_hash(), "iteration": cfg.iterations},
        )
        if curve:
            write_curve(curve, os.path.join(checkpoint_dir, "training_curve.csv"))
    return params, curve


def write_curve(rows: Sequence[dict], path) -> None:
    cols = ["iteration", "band_low", "band_high", "throughput_pct", "mean_tau", "std_tau"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c, "") for c in cols})


def train_cvtsc(
    cfg: TrainConfig,
    topology: Topology,
    checkpoint_dir=None,
    params: DriverParams = DriverParams(),
    evaluate_bands: Optional[Sequence[tuple]] = None,
    log=None,
) -> tuple[PolicyParams, list[dict]]:
    """Train the virtual-red-light controller on one topology."""
    layout = ObservationLayout(topology, params)
    factory = TrainingEnvFactory(topology, cfg, params)
    evaluator = None
    if evaluate_bands:
        from .harness import PolicyController, evaluate_on_bands

        def evaluator(p, it):
            return evaluate_on_bands(
                PolicyController(p, topology),
                topology,
                evaluate_bands,
                episodes=cfg.eval_episodes,
                cav_rate=cfg.cav_rate,
                duration=cfg.episode_duration,
                seed=cfg.seed * 7919 + it,
                params=params,
                iteration=it,
            )

    return train(
        cfg,
        factory,
        layout.dim,
        len(topology.action_sets),
        checkpoint_dir=checkpoint_dir,
        evaluator=evaluator,
        log=log,
    )
