"""Evaluation rollouts and the data-quality / deviation studies.

Evaluation always runs the agent alone, on the fixed held-out layout suite
(seeds disjoint from every training layout by construction), and is fully
deterministic for a given policy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .buffers import AGENT, CRASH, EXPERT, SUCCESS, Buffer, human_buffer
from .config import RunConfig
from .envs import CORRIDOR, FOURROOMS, make_env
from .errors import UndefinedRatioError
from .nets import AdamState
from .policy import Policy, act, bc_update, make_policy
from .spaces import deviates


@dataclass
class EvalReport:
    success_rate: float
    episodic_return: float
    route_completion: float
    n_rollouts: int
    crash_rate: float | None = None

    def to_dict(self) -> dict:
        return {"success_rate": self.success_rate,
                "episodic_return": self.episodic_return,
                "route_completion": self.route_completion,
                "n_rollouts": self.n_rollouts,
                "crash_rate": self.crash_rate}


@dataclass
class BudgetReport:
    expert_data_usage: int
    total_data_usage: int

    @property
    def overall_intervention_rate(self) -> float:
        if self.total_data_usage == 0:
            return 0.0
        return self.expert_data_usage / self.total_data_usage

    def to_dict(self) -> dict:
        return {"expert_data_usage": self.expert_data_usage,
                "total_data_usage": self.total_data_usage,
                "overall_intervention_rate": self.overall_intervention_rate}


def make_eval_env(cfg: RunConfig):
    if cfg.env_kind == FOURROOMS:
        return make_env(FOURROOMS, size=cfg.grid_size, max_steps=cfg.max_steps)
    return make_env(CORRIDOR, goal_x=cfg.goal_x, lane_halfwidth=cfg.lane_halfwidth,
                    max_steps=cfg.max_steps, n_rays=cfg.n_rays)


def evaluate(policy: Policy, cfg: RunConfig, n_rollouts: int | None = None,
             collect_states: bool = False):
    """Expert-free rollouts on the held-out suite; averaged metrics.

    With ``collect_states`` the visited environment states are returned too,
    as probes for the deviation study (corridor only).
    """
    n = n_rollouts or cfg.eval_rollouts
    env = make_eval_env(cfg)
    successes = crashes = 0
    returns = []
    completions = []
    probes = []
    for j in range(n):
        obs = env.reset(RunConfig.eval_layout_seed(j))
        total = 0.0
        while not env.done:
            if collect_states and cfg.env_kind == CORRIDOR:
                st = env.state
                probes.append((st.x, st.y, st.heading, st.speed, st.layout_seed))
            t, r = env.step(act(policy, obs), actor=AGENT)
            obs = t.s_next
            total += r
        returns.append(total)
        successes += t.outcome == SUCCESS
        crashes += t.outcome == CRASH
        if cfg.env_kind == CORRIDOR:
            completions.append(min(env.state.x / env.goal_x, 1.0))
        else:
            completions.append(1.0 if t.outcome == SUCCESS else 0.0)
    report = EvalReport(
        success_rate=successes / n,
        episodic_return=float(np.mean(returns)),
        route_completion=float(np.mean(completions)),
        n_rollouts=n,
        crash_rate=crashes / n if cfg.env_kind == CORRIDOR else None,
    )
    if collect_states:
        return report, probes
    return report


def deviation_ratio(policy: Policy, cfg: RunConfig, probes, eps: float) -> float:
    """Among safety-critical probe states, the fraction where the policy's
    action deviates from the oracle's beyond ``eps``."""
    if cfg.env_kind != CORRIDOR:
        raise UndefinedRatioError("deviation ratio is a corridor-world study")
    env = make_eval_env(cfg)
    critical = deviating = 0
    from .envs.corridor import CorridorState, build_layout
    for (x, y, heading, speed, layout_seed) in probes:
        obstacles, _, _ = build_layout(layout_seed, cfg.lane_halfwidth, cfg.goal_x)
        st = CorridorState(x=x, y=y, heading=heading, speed=speed,
                           obstacles=list(obstacles),
                           lane_halfwidth=cfg.lane_halfwidth, goal_x=cfg.goal_x,
                           step_count=0, layout_seed=layout_seed)
        a_h = env.expert_action(st)
        if float(np.linalg.norm(a_h)) <= 0.5:
            continue
        critical += 1
        obs = env.observe(st)
        if deviates(act(policy, obs), a_h, eps, env.space):
            deviating += 1
    if critical == 0:
        raise UndefinedRatioError("no safety-critical probe states")
    return deviating / critical


def bc_train_offline(dataset: Buffer, cfg: RunConfig, steps: int | None = None,
                     seed_offset: int = 0) -> Policy:
    """Behavior cloning from scratch on a fixed dataset, no environment use."""
    if len(dataset) == 0:
        raise ValueError("cannot clone from an empty dataset")
    rng = np.random.default_rng(cfg.seed + seed_offset)
    env = make_eval_env(cfg)
    policy = make_policy(env.obs_dim, env.space, cfg.hidden, rng)
    opt = AdamState.for_params(policy.net.params, lr=cfg.lr)
    batch = min(cfg.batch_size, max(len(dataset), 4))
    for _ in range(steps or cfg.bc_train_steps):
        bc_update(policy, dataset, batch, opt, rng)
    return policy


def offline_quality_curve(human: Buffer, warmup_len: int, t_grid: list[int],
                          cfg: RunConfig):
    """Clone policies from growing prefixes of the gate-requested expert data
    (warm-up demonstrations stripped) and evaluate each."""
    requested = human.entries[warmup_len:]
    out = []
    for t_len in t_grid:
        take = requested[:t_len]
        if not take:
            continue  # skipped with a warning by the caller
        subset = human_buffer()
        for tr in take:
            subset.push(tr)
        policy = bc_train_offline(subset, cfg, seed_offset=1 + t_len)
        out.append((t_len, evaluate(policy, cfg)))
    return out
