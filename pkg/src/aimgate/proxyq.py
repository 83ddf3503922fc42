"""The intervention critic: a proxy Q-function scoring how strongly a
state-action pair warrants expert takeover.

Expert-demonstrated actions are regressed toward -1; agent actions that
deviate from the expert's at the same state are pushed toward +1, so
high values mean "ask for help". A temporal-difference term propagates these
labels to self-exploration states through a slow target copy, letting the
critic flag trouble before it happens. Two thresholds turn values into gate
decisions: ``beta`` (a quantile over agent-visited states) opens the gate,
and ``epsilon`` (mean squared policy-expert action distance) closes it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .buffers import ArrayBatch, Buffer, concat_batches
from .errors import EmptySourceError
from .nets import (AdamState, TargetPair, adam_step, backward, forward,
                   net_from_json, net_to_json, polyak_update)
from .policy import Policy, act_batch
from .spaces import (ActionSpace, ContinuousSpace, DiscreteSpace, deviates,
                     space_from_json)

BETA_SUBSAMPLE = 4096  # cap on states scored per threshold refresh
N_BOX_SAMPLES = 8      # extra uniform actions in the continuous max


def nearest_rank(values: np.ndarray, q: float) -> float:
    """Nearest-rank quantile: sort ascending, take the ceil(q*N)-th value."""
    vals = np.sort(np.asarray(values, dtype=np.float64))
    n = vals.shape[0]
    if n == 0:
        raise EmptySourceError("quantile of an empty sample")
    rank = int(np.ceil(q * n))
    return float(vals[min(max(rank, 1), n) - 1])


@dataclass
class ProxyQ:
    pair: TargetPair
    space: ActionSpace

    @property
    def online(self):
        return self.pair.online

    @property
    def target(self):
        return self.pair.target

    def copy(self) -> "ProxyQ":
        return ProxyQ(pair=TargetPair(online=self.pair.online.copy(),
                                      target=self.pair.target.copy(),
                                      tau=self.pair.tau),
                      space=self.space)


def make_proxy_q(obs_dim: int, space: ActionSpace, hidden: tuple[int, ...],
                 rng: np.random.Generator, tau: float = 0.005) -> ProxyQ:
    if isinstance(space, ContinuousSpace):
        sizes = [obs_dim + space.dim, *hidden, 1]
    else:
        sizes = [obs_dim, *hidden, space.n]
    return ProxyQ(pair=TargetPair.create(sizes, rng, tau=tau), space=space)


def _q_batch(net, space: ActionSpace, states: np.ndarray, actions) -> np.ndarray:
    """Q(s, a) for a batch; continuous encodes the action into the input,
    discrete reads one head per action."""
    if isinstance(space, ContinuousSpace):
        x = np.concatenate([states, np.asarray(actions, dtype=np.float64)], axis=1)
        return forward(net, x)[:, 0]
    out = forward(net, states)
    return out[np.arange(states.shape[0]), np.asarray(actions, dtype=int)]


def q_value(q: ProxyQ, s: np.ndarray, a) -> float:
    return float(_q_batch(q.online, q.space, s[None, :], [a])[0])


def should_request(q: ProxyQ, s: np.ndarray, a_r, beta: float) -> bool:
    """Gate-opening rule: strictly above the quantile threshold."""
    return q_value(q, s, a_r) > beta


def should_release(a_r, a_h, eps: float, space: ActionSpace) -> bool:
    """Gate-closing rule: agent proposal within tolerance of the expert's."""
    return not deviates(a_r, a_h, eps, space)


def aim_loss_and_grads(q: ProxyQ, states: np.ndarray, expert_actions,
                       policy: Policy, eps: float):
    """Supervised intervention labels on expert-buffer pairs.

    Expert actions regress to -1. For each state the current policy proposes
    an action; where it deviates beyond ``eps`` that proposal regresses to +1,
    otherwise its term is masked out entirely. Gradients flow only through
    the critic.
    """
    n = states.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    a_r = act_batch(policy, states)
    if isinstance(q.space, ContinuousSpace):
        diff = a_r - np.asarray(expert_actions)
        f = (np.sum(diff * diff, axis=1) > eps).astype(np.float64)
        x_h = np.concatenate([states, np.asarray(expert_actions)], axis=1)
        x_r = np.concatenate([states, a_r], axis=1)
        q_h = forward(q.online, x_h)[:, 0]
        q_r = forward(q.online, x_r)[:, 0]
        loss = float(np.mean((q_h + 1.0) ** 2) + np.mean(f * (q_r - 1.0) ** 2))
        g_h = backward(q.online, x_h, ((2.0 / n) * (q_h + 1.0))[:, None])
        g_r = backward(q.online, x_r, ((2.0 / n) * f * (q_r - 1.0))[:, None])
        grads = [a + b for a, b in zip(g_h.params, g_r.params)]
    else:
        idx_h = np.asarray(expert_actions, dtype=int)
        idx_r = np.asarray(a_r, dtype=int)
        f = (idx_r != idx_h).astype(np.float64)
        out = forward(q.online, states)
        rows = np.arange(n)
        q_h = out[rows, idx_h]
        q_r = out[rows, idx_r]
        loss = float(np.mean((q_h + 1.0) ** 2) + np.mean(f * (q_r - 1.0) ** 2))
        upstream = np.zeros_like(out)
        np.add.at(upstream, (rows, idx_h), (2.0 / n) * (q_h + 1.0))
        np.add.at(upstream, (rows, idx_r), (2.0 / n) * f * (q_r - 1.0))
        grads = backward(q.online, states, upstream).params
    return loss, grads


def _max_next_q(q: ProxyQ, next_states: np.ndarray, done: np.ndarray,
                policy: Policy, rng: np.random.Generator) -> np.ndarray:
    """Approximate max over next actions of the target critic.

    Discrete takes the exact head max. Continuous maximizes over the policy's
    proposal plus a few uniform box samples; terminal states contribute zero.
    """
    n = next_states.shape[0]
    if isinstance(q.space, DiscreteSpace):
        m = forward(q.target, next_states).max(axis=1)
    else:
        cands = [np.asarray(act_batch(policy, next_states))]
        span = q.space.high - q.space.low
        for _ in range(N_BOX_SAMPLES):
            cands.append(q.space.low + span * rng.uniform(size=(n, q.space.dim)))
        vals = np.stack([
            forward(q.target, np.concatenate([next_states, c], axis=1))[:, 0]
            for c in cands])
        m = vals.max(axis=0)
    return np.where(done, 0.0, m)


def _td_from_arrays(q: ProxyQ, b: ArrayBatch, gamma: float, policy: Policy,
                    rng: np.random.Generator):
    n = b.s.shape[0]
    m = _max_next_q(q, b.s_next, b.done, policy, rng)
    target = gamma * m
    if isinstance(q.space, ContinuousSpace):
        x = np.concatenate([b.s, b.a], axis=1)
        err = forward(q.online, x)[:, 0] - target
        loss = float(np.mean(err ** 2))
        grads = backward(q.online, x, ((2.0 / n) * err)[:, None]).params
    else:
        out = forward(q.online, b.s)
        rows = np.arange(n)
        err = out[rows, b.a] - target
        loss = float(np.mean(err ** 2))
        upstream = np.zeros_like(out)
        upstream[rows, b.a] = (2.0 / n) * err
        grads = backward(q.online, b.s, upstream).params
    return loss, grads


def _batch_from_transitions(batch, space) -> ArrayBatch:
    from .buffers import CRASH, TIMEOUT
    if isinstance(space, ContinuousSpace):
        a = np.stack([t.a for t in batch])
    else:
        a = np.array([t.a for t in batch], dtype=np.int64)
    return ArrayBatch(s=np.stack([t.s for t in batch]), a=a,
                      s_next=np.stack([t.s_next for t in batch]),
                      done=np.array([t.done for t in batch]),
                      failed=np.array([t.outcome in (CRASH, TIMEOUT)
                                       for t in batch]))


def td_loss_and_grads(q: ProxyQ, batch, gamma: float, policy: Policy,
                      rng: np.random.Generator):
    """|Q(s,a) - gamma * max_a' Q_target(s',a')|^2 on mixed-buffer transitions."""
    if not batch:
        raise ValueError("empty batch")
    return _td_from_arrays(q, _batch_from_transitions(batch, q.space), gamma,
                           policy, rng)


def _reward_label_from_arrays(q: ProxyQ, bh: ArrayBatch, br: ArrayBatch | None,
                              gamma: float, policy: Policy, eps: float,
                              rng: np.random.Generator):
    n = bh.s.shape[0]
    a_r = act_batch(policy, bh.s)
    m = gamma * _max_next_q(q, bh.s_next, bh.done, policy, rng)

    if isinstance(q.space, ContinuousSpace):
        diff = a_r - bh.a
        f = (np.sum(diff * diff, axis=1) > eps).astype(np.float64)
        x_h = np.concatenate([bh.s, bh.a], axis=1)
        x_r = np.concatenate([bh.s, a_r], axis=1)
        e_h = forward(q.online, x_h)[:, 0] - (1.0 + m)
        e_r = forward(q.online, x_r)[:, 0] - (-1.0 + m)
        loss = float(np.mean(e_h ** 2) + np.mean(f * e_r ** 2))
        g_h = backward(q.online, x_h, ((2.0 / n) * e_h)[:, None])
        g_r = backward(q.online, x_r, ((2.0 / n) * f * e_r)[:, None])
        grads = [a + b for a, b in zip(g_h.params, g_r.params)]
    else:
        idx_h = bh.a.astype(int)
        idx_r = np.asarray(a_r, dtype=int)
        f = (idx_r != idx_h).astype(np.float64)
        out = forward(q.online, bh.s)
        rows = np.arange(n)
        e_h = out[rows, idx_h] - (1.0 + m)
        e_r = out[rows, idx_r] - (-1.0 + m)
        loss = float(np.mean(e_h ** 2) + np.mean(f * e_r ** 2))
        upstream = np.zeros_like(out)
        np.add.at(upstream, (rows, idx_h), (2.0 / n) * e_h)
        np.add.at(upstream, (rows, idx_r), (2.0 / n) * f * e_r)
        grads = backward(q.online, bh.s, upstream).params

    if br is not None and br.s.shape[0] > 0:
        td_loss, td_grads = _td_from_arrays(q, br, gamma, policy, rng)
        loss += td_loss
        grads = [a + b for a, b in zip(grads, td_grads)]
    return loss, grads


def reward_label_loss_and_grads(q: ProxyQ, batch_h, batch_r, gamma: float,
                                policy: Policy, eps: float,
                                rng: np.random.Generator):
    """Ablation variant: fold +1/-1 reward labels into TD targets on
    intervention data instead of regressing Q values directly.

    Expert pairs get target ``+1 + gamma*M(s')``, deviating agent proposals
    ``-1 + gamma*M(s')`` (masked like the label loss), and self-exploration
    transitions plain ``gamma*M(s')``.
    """
    bh = _batch_from_transitions(batch_h, q.space)
    br = _batch_from_transitions(batch_r, q.space) if batch_r else None
    return _reward_label_from_arrays(q, bh, br, gamma, policy, eps, rng)


FULL, NO_TD, REWARD_LABEL = "full", "no_td", "reward"


def update_proxy_q(q: ProxyQ, human: Buffer, novice: Buffer, policy: Policy,
                   batch_size: int, gamma: float, eps: float,
                   opt: AdamState, rng: np.random.Generator,
                   variant: str = FULL) -> dict:
    """One combined gradient step (label loss + TD loss, unit weights),
    then a polyak move of the target copy.

    ``variant`` selects the two ablations: ``no_td`` drops the TD term,
    ``reward`` swaps the direct labels for reward-folded TD targets.
    """
    if len(human) == 0:
        raise EmptySourceError("proxy-Q update needs expert data")
    batch_h = human.sample_arrays(batch_size, rng)

    if variant == REWARD_LABEL:
        half = batch_size // 2
        batch_r = novice.sample_arrays(half, rng) if len(novice) > 0 else None
        loss, grads = _reward_label_from_arrays(q, batch_h, batch_r, gamma,
                                                policy, eps, rng)
        report = {"aim_loss": 0.0, "td_loss": loss}
    else:
        aim_loss, grads = aim_loss_and_grads(q, batch_h.s, batch_h.a, policy, eps)
        td_loss = 0.0
        if variant != NO_TD:
            half = batch_size // 2
            if len(novice) > 0:
                td_batch = concat_batches(human.sample_arrays(half, rng),
                                          novice.sample_arrays(batch_size - half, rng))
            else:
                td_batch = human.sample_arrays(batch_size, rng)
            td_loss, td_grads = _td_from_arrays(q, td_batch, gamma, policy, rng)
            grads = [a + b for a, b in zip(grads, td_grads)]
        report = {"aim_loss": aim_loss, "td_loss": td_loss}

    adam_step(q.online.params, grads, opt)
    polyak_update(q.pair)
    return report


def compute_beta(q: ProxyQ, novice: Buffer, policy: Policy, delta: float,
                 rng: np.random.Generator, cap: int = BETA_SUBSAMPLE) -> float:
    """Nearest-rank (1-delta) quantile of critic values over agent-visited
    states, each paired with the policy's current proposal."""
    n = len(novice)
    if n == 0:
        raise EmptySourceError("threshold needs agent-visited states")
    if n > cap:
        idx = rng.choice(n, size=cap, replace=False)
        states = novice.states_at(idx)
    else:
        states = novice.states()
    a_r = act_batch(policy, states)
    vals = _q_batch(q.online, q.space, states, a_r)
    return nearest_rank(vals, 1.0 - delta)


def compute_epsilon(human: Buffer, policy: Policy) -> float:
    """Mean squared action distance between policy and expert over the whole
    human buffer (continuous spaces; discrete gates use exact mismatch)."""
    if len(human) == 0:
        raise EmptySourceError("epsilon needs expert data")
    if not isinstance(policy.space, ContinuousSpace):
        raise ValueError("epsilon is only defined for continuous actions")
    states = human.states()
    a_h = human.actions()
    a_r = act_batch(policy, states)
    d = a_r - a_h
    return float(np.mean(np.sum(d * d, axis=1)))


def proxy_q_to_json(q: ProxyQ) -> dict:
    return {"kind": "proxy_q", "space": q.space.to_json(), "tau": q.pair.tau,
            "online": net_to_json(q.online), "target": net_to_json(q.target)}


def proxy_q_from_json(doc: dict) -> ProxyQ:
    pair = TargetPair(online=net_from_json(doc["online"]),
                      target=net_from_json(doc["target"]), tau=doc["tau"])
    return ProxyQ(pair=pair, space=space_from_json(doc["space"]))
