"""Deterministic agent policy trained by behavior cloning on expert data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .buffers import Buffer
from .nets import AdamState, Mlp, adam_step, backward, forward, init_mlp, net_from_json, net_to_json
from .spaces import ActionSpace, ContinuousSpace, DiscreteSpace, space_from_json


@dataclass
class Policy:
    net: Mlp
    space: ActionSpace

    def copy(self) -> "Policy":
        return Policy(net=self.net.copy(), space=self.space)


def make_policy(obs_dim: int, space: ActionSpace, hidden: tuple[int, ...],
                rng: np.random.Generator) -> Policy:
    out = space.dim if isinstance(space, ContinuousSpace) else space.n
    net = init_mlp([obs_dim, *hidden, out], rng)
    return Policy(net=net, space=space)


def _squash(space: ContinuousSpace, z: np.ndarray) -> np.ndarray:
    mid = (space.high + space.low) / 2.0
    half = (space.high - space.low) / 2.0
    return mid + half * np.tanh(z)


def act(policy: Policy, s: np.ndarray):
    """Deterministic action: tanh-squashed output (continuous) or argmax
    logits with lowest-index tie-break (discrete)."""
    z = forward(policy.net, s)
    if isinstance(policy.space, ContinuousSpace):
        return _squash(policy.space, z)
    return int(np.argmax(z))


def act_batch(policy: Policy, states: np.ndarray):
    z = forward(policy.net, states)
    if isinstance(policy.space, ContinuousSpace):
        return _squash(policy.space, z)
    return np.argmax(z, axis=1)


def bc_loss_and_grads(policy: Policy, states: np.ndarray, actions):
    """Imitation loss on a batch: squared action distance (continuous) or
    cross-entropy over action logits (discrete). Returns (loss, grads)."""
    z = forward(policy.net, states)
    n = states.shape[0]
    if isinstance(policy.space, ContinuousSpace):
        half = (policy.space.high - policy.space.low) / 2.0
        th = np.tanh(z)
        a = (policy.space.high + policy.space.low) / 2.0 + half * th
        err = a - np.asarray(actions)
        loss = float(np.sum(err * err) / n)
        upstream = (2.0 / n) * err * half * (1.0 - th * th)
    else:
        idx = np.asarray(actions, dtype=int)
        zs = z - z.max(axis=1, keepdims=True)
        ez = np.exp(zs)
        p = ez / ez.sum(axis=1, keepdims=True)
        loss = float(-np.mean(np.log(p[np.arange(n), idx] + 1e-12)))
        upstream = p.copy()
        upstream[np.arange(n), idx] -= 1.0
        upstream /= n
    grads = backward(policy.net, states, upstream)
    return loss, grads


def bc_update(policy: Policy, human: Buffer, batch_size: int,
              opt: AdamState, rng: np.random.Generator) -> float | None:
    """One Adam step of imitation on a sampled expert batch.

    Returns the batch loss, or None (no-op) when the buffer is empty.
    """
    if len(human) == 0:
        return None
    batch = human.sample_arrays(batch_size, rng)
    loss, grads = bc_loss_and_grads(policy, batch.s, batch.a)
    adam_step(policy.net.params, grads.params, opt)
    return loss


def policy_to_json(policy: Policy) -> dict:
    return {"kind": "policy", "space": policy.space.to_json(),
            "net": net_to_json(policy.net)}


def policy_from_json(doc: dict) -> Policy:
    return Policy(net=net_from_json(doc["net"]),
                  space=space_from_json(doc["space"]))
