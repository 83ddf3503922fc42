"""Append-only JSON Lines run logs and replay-based protocol verification.

A run log carries one header record, one record per episode start, and one
record per environment step. Step records include the agent's proposal even
when the expert acted, the gate state, and a digest of the post-step
observation, so a finished log can be replayed against a fresh environment
to verify determinism and every gating rule after the fact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .buffers import AGENT, EXPERT
from .envs import CORRIDOR, FOURROOMS, make_env
from .spaces import ContinuousSpace, action_from_json, action_to_json, deviates

SCHEMA = 1


def obs_digest(obs: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(obs, dtype=np.float64).tobytes()).hexdigest()[:16]


class RunLogWriter:
    def __init__(self, path, method: str, env_kind: str, seed: int,
                 config: dict, expert_kind: str = "oracle", variant: str | None = None):
        self.path = path
        self._fh = open(path, "w")
        header = {"kind": "header", "schema": SCHEMA, "method": method,
                  "env": env_kind, "seed": seed, "expert": expert_kind,
                  "config": config}
        if variant is not None:
            header["variant"] = variant
        self._write(header)

    def _write(self, doc: dict) -> None:
        self._fh.write(json.dumps(doc) + "\n")

    def episode(self, index: int, layout_seed: int, reset_digest: str) -> None:
        self._write({"kind": "episode", "episode": index,
                     "layout_seed": layout_seed, "reset_digest": reset_digest})

    def step(self, *, step: int, episode: int, phase: str, controller: str,
             a_r, a_executed, space, q_value, beta, epsilon, request_event: bool,
             release_event: bool, outcome, expert_steps_used: int, pos,
             digest: str) -> None:
        self._write({
            "kind": "step", "step": step, "episode": episode, "phase": phase,
            "controller": controller,
            "a_r": action_to_json(a_r, space),
            "a_executed": action_to_json(a_executed, space),
            "q_value": q_value, "beta": beta, "epsilon": epsilon,
            "request_event": request_event, "release_event": release_event,
            "outcome": outcome, "expert_steps_used": expert_steps_used,
            "pos": pos, "obs_digest": digest,
        })

    def note(self, doc: dict) -> None:
        self._write(doc)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_runlog(path) -> list[dict]:
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    if not records or records[0].get("kind") != "header":
        raise ValueError(f"{path} is not a run log (missing header)")
    return records


def steps_of(records: list[dict]) -> list[dict]:
    return [r for r in records if r.get("kind") == "step"]


@dataclass
class ProtocolReport:
    ok: bool = True
    problems: list = field(default_factory=list)
    n_steps: int = 0
    n_expert_steps: int = 0
    n_requests: int = 0
    n_releases: int = 0

    def fail(self, msg: str) -> None:
        self.ok = False
        if len(self.problems) < 20:
            self.problems.append(msg)


def check_protocol(records: list[dict], expert_budget: int | None = None) -> ProtocolReport:
    """Structural gating checks on the records alone.

    Verifies that expert control blocks open with a request event, close with
    a release event (unless the episode or the budget ended the block), that
    agent steps execute the agent's own proposal, and that the expert step
    counter matches the controller attribution.
    """
    rep = ProtocolReport()
    header = records[0]
    budget = expert_budget
    if budget is None:
        budget = header.get("config", {}).get("expert_budget")

    expert_count = 0
    prev = None  # previous step record within the same episode
    for r in records:
        if r.get("kind") == "episode":
            if prev is not None and prev["controller"] == EXPERT and prev["outcome"] is None:
                # a block may only end silently at the episode edge if the
                # episode ended or the budget ran out
                if budget is not None and prev["expert_steps_used"] < budget:
                    rep.fail(f"expert block cut at episode {r['episode']} "
                             "without outcome or exhausted budget")
            prev = None
            continue
        if r.get("kind") != "step":
            continue
        rep.n_steps += 1

        if r["controller"] == EXPERT:
            expert_count += 1
            rep.n_expert_steps += 1
            entering = prev is None or prev["controller"] == AGENT
            if entering and not r["request_event"]:
                rep.fail(f"step {r['step']}: expert block begins without request")
            if not entering and r["request_event"]:
                rep.fail(f"step {r['step']}: request event inside a block")
            if r["release_event"]:
                rep.fail(f"step {r['step']}: release on an expert step")
        else:
            if r["request_event"]:
                rep.fail(f"step {r['step']}: request on an agent-executed step")
            left_block = prev is not None and prev["controller"] == EXPERT
            if left_block and not r["release_event"]:
                budget_out = budget is not None and r["expert_steps_used"] >= budget
                if not budget_out:
                    rep.fail(f"step {r['step']}: block ended without release")
            if not left_block and r["release_event"]:
                rep.fail(f"step {r['step']}: release without preceding block")
            if r["a_executed"] != r["a_r"]:
                rep.fail(f"step {r['step']}: agent step executed a foreign action")

        if r["expert_steps_used"] != expert_count:
            rep.fail(f"step {r['step']}: expert step counter mismatch")
        if budget is not None and r["expert_steps_used"] > budget:
            rep.fail(f"step {r['step']}: budget exceeded")
        rep.n_requests += bool(r["request_event"])
        rep.n_releases += bool(r["release_event"])

        if r["outcome"] is not None:
            prev = None
        else:
            prev = r
    return rep


def _env_from_header(header: dict):
    cfg = header.get("config", {})
    kind = header["env"]
    if kind == FOURROOMS:
        return make_env(kind, size=cfg.get("grid_size", 13),
                        max_steps=cfg.get("max_steps", 100))
    return make_env(kind, goal_x=cfg.get("goal_x", 80.0),
                    lane_halfwidth=cfg.get("lane_halfwidth", 4.0),
                    max_steps=cfg.get("max_steps", 200),
                    n_rays=cfg.get("n_rays", 24))


def replay_verify(path) -> ProtocolReport:
    """Re-run the logged actions through a fresh environment and verify
    observation digests, gate decisions against the scripted oracle, and the
    executed-action rule. Oracle checks are skipped for human-expert logs."""
    records = read_runlog(path)
    header = records[0]
    rep = check_protocol(records)
    env = _env_from_header(header)
    space = env.space
    with_oracle = header.get("expert") == "oracle"

    episode_open = False
    for r in records:
        if r.get("kind") == "episode":
            obs = env.reset(r["layout_seed"])
            if obs_digest(obs) != r["reset_digest"]:
                rep.fail(f"episode {r['episode']}: reset observation differs")
            episode_open = True
            continue
        if r.get("kind") != "step" or not episode_open:
            continue
        a_exec = action_from_json(r["a_executed"], space)
        a_r = action_from_json(r["a_r"], space)
        if with_oracle and not env.done:
            a_h = env.expert_action()
            if r["controller"] == EXPERT:
                same = not deviates(a_exec, a_h, 0.0, space) if isinstance(
                    space, ContinuousSpace) else a_exec == a_h
                if not same:
                    rep.fail(f"step {r['step']}: expert action differs from oracle")
                eps = r["epsilon"] if r["epsilon"] is not None else 0.0
                if not r["request_event"]:
                    # interior expert step: the previous release check failed,
                    # so the proposal there must have deviated
                    if not deviates(a_r, a_h, eps, space):
                        rep.fail(f"step {r['step']}: expert kept control though "
                                 "the proposal matched")
            elif r["release_event"]:
                eps = r["epsilon"] if r["epsilon"] is not None else 0.0
                if deviates(a_r, a_h, eps, space):
                    rep.fail(f"step {r['step']}: released while deviating")
        t, _ = env.step(a_exec, actor=r["controller"])
        if obs_digest(t.s_next) != r["obs_digest"]:
            rep.fail(f"step {r['step']}: observation digest mismatch")
        if t.outcome != r["outcome"]:
            rep.fail(f"step {r['step']}: outcome {t.outcome} != {r['outcome']}")
        if t.done:
            episode_open = False
    return rep
