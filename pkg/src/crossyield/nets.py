"""Policy and value networks: plain numpy MLPs with hand-written backprop.

Both heads are two-hidden-layer rectified MLPs over the same observation
vector. Parameters live in float64 for exact gradient checks; checkpoints
serialize them as little-endian float32 blobs next to a JSON manifest.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

_LAYER_KEYS = ("W1", "b1", "W2", "b2", "W3", "b3")


def init_mlp(
    rng: np.random.Generator,
    sizes: Sequence[int],
    out_scale: float = 0.01,
) -> dict:
    """He-initialized 2-hidden-layer MLP; small final layer keeps the
    initial policy near uniform and the initial value near zero."""
    d0, h1, h2, dout = sizes
    return {
        "W1": rng.normal(0.0, np.sqrt(2.0 / d0), size=(d0, h1)),
        "b1": np.zeros(h1),
        "W2": rng.normal(0.0, np.sqrt(2.0 / h1), size=(h1, h2)),
        "b2": np.zeros(h2),
        "W3": rng.normal(0.0, out_scale / np.sqrt(h2), size=(h2, dout)),
        "b3": np.zeros(dout),
    }


def mlp_forward(params: Mapping, x: np.ndarray):
    """Forward pass; returns (output, cache) with x of shape (n, d0)."""
    z1 = x @ params["W1"] + params["b1"]
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ params["W2"] + params["b2"]
    h2 = np.maximum(z2, 0.0)
    out = h2 @ params["W3"] + params["b3"]
    return out, (x, z1, h1, z2, h2)


def mlp_backward(params: Mapping, cache, d_out: np.ndarray) -> dict:
    """Gradient of a scalar loss w.r.t. all parameters, given dLoss/d_out."""
    x, z1, h1, z2, h2 = cache
    grads = {
        "W3": h2.T @ d_out,
        "b3": d_out.sum(axis=0),
    }
    d_h2 = d_out @ params["W3"].T
    d_z2 = d_h2 * (z2 > 0.0)
    grads["W2"] = h1.T @ d_z2
    grads["b2"] = d_z2.sum(axis=0)
    d_h1 = d_z2 @ params["W2"].T
    d_z1 = d_h1 * (z1 > 0.0)
    grads["W1"] = x.T @ d_z1
    grads["b1"] = d_z1.sum(axis=0)
    return grads


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


@dataclass
class PolicyParams:
    """Both network heads plus the shape manifest they must match."""

    policy: dict
    value: dict
    obs_dim: int
    n_actions: int
    hidden: tuple[int, int]

    @classmethod
    def create(
        cls, rng: np.random.Generator, obs_dim: int, n_actions: int, hidden=(256, 128)
    ) -> "PolicyParams":
        h1, h2 = hidden
        return cls(
            policy=init_mlp(rng, (obs_dim, h1, h2, n_actions)),
            value=init_mlp(rng, (obs_dim, h1, h2, 1)),
            obs_dim=obs_dim,
            n_actions=n_actions,
            hidden=(h1, h2),
        )

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            policy={k: v.copy() for k, v in self.policy.items()},
            value={k: v.copy() for k, v in self.value.items()},
            obs_dim=self.obs_dim,
            n_actions=self.n_actions,
            hidden=self.hidden,
        )

    def check_finite(self) -> bool:
        return all(
            np.isfinite(v).all()
            for net in (self.policy, self.value)
            for v in net.values()
        )

    # -- flat views -----------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "obs_dim": self.obs_dim,
            "n_actions": self.n_actions,
            "hidden": list(self.hidden),
            "order": [f"{net}.{k}" for net in ("policy", "value") for k in _LAYER_KEYS],
            "shapes": {
                f"{net}.{k}": list(getattr(self, net)[k].shape)
                for net in ("policy", "value")
                for k in _LAYER_KEYS
            },
            "dtype": "<f4",
        }

    def to_flat(self) -> np.ndarray:
        return np.concatenate(
            [getattr(self, net)[k].ravel() for net in ("policy", "value") for k in _LAYER_KEYS]
        )

    def load_flat(self, flat: np.ndarray) -> None:
        i = 0
        for net in ("policy", "value"):
            for k in _LAYER_KEYS:
                arr = getattr(self, net)[k]
                n = arr.size
                getattr(self, net)[k] = (
                    flat[i : i + n].astype(np.float64).reshape(arr.shape)
                )
                i += n
        if i != flat.size:
            raise ValueError("flat weight blob does not match the shape manifest")


def policy_forward(params: PolicyParams, obs: np.ndarray) -> np.ndarray:
    """Action distribution for one observation or a batch of them."""
    x = np.asarray(obs, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] != params.obs_dim:
        raise ValueError(f"observation length {x.shape[1]} != manifest {params.obs_dim}")
    logits, _ = mlp_forward(params.policy, x)
    probs = softmax(logits)
    return probs[0] if squeeze else probs


def value_forward(params: PolicyParams, obs: np.ndarray) -> np.ndarray:
    x = np.asarray(obs, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    out, _ = mlp_forward(params.value, x)
    return float(out[0, 0]) if squeeze else out[:, 0]


class AdamW:
    """Adam with decoupled weight decay over a PolicyParams container."""

    def __init__(self, params: PolicyParams, lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {
            (net, k): np.zeros_like(getattr(params, net)[k])
            for net in ("policy", "value")
            for k in _LAYER_KEYS
        }
        self.v = {key: np.zeros_like(val) for key, val in self.m.items()}

    def step(self, params: PolicyParams, grads: dict) -> None:
        """grads: {"policy": {...}, "value": {...}} matching the layer keys."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for net in ("policy", "value"):
            target = getattr(params, net)
            for k in _LAYER_KEYS:
                g = grads[net][k]
                key = (net, k)
                self.m[key] = b1 * self.m[key] + (1 - b1) * g
                self.v[key] = b2 * self.v[key] + (1 - b2) * g * g
                m_hat = self.m[key] / (1 - b1**self.t)
                v_hat = self.v[key] / (1 - b2**self.t)
                # Decay only the weight matrices, not the biases.
                if self.weight_decay and k.startswith("W"):
                    target[k] *= 1.0 - self.lr * self.weight_decay
                target[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(directory, params: PolicyParams, extra: Mapping | None = None) -> None:
    """Write manifest.json plus a flat little-endian float32 weight blob."""
    os.makedirs(directory, exist_ok=True)
    blob = params.to_flat().astype("<f4").tobytes()
    manifest = params.manifest()
    manifest["weights_file"] = "weights.bin"
    manifest["weights_sha256"] = hashlib.sha256(blob).hexdigest()
    if extra:
        manifest.update(extra)
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    with open(os.path.join(directory, "weights.bin"), "wb") as fh:
        fh.write(blob)


def load_checkpoint(directory) -> tuple[PolicyParams, dict]:
    with open(os.path.join(directory, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    flat = np.fromfile(
        os.path.join(directory, manifest.get("weights_file", "weights.bin")),
        dtype="<f4",
    )
    rng = np.random.default_rng(0)
    params = PolicyParams.create(
        rng,
        manifest["obs_dim"],
        manifest["n_actions"],
        tuple(manifest["hidden"]),
    )
    params.load_flat(flat)
    return params, manifest
