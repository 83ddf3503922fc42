"""The intervention training loops.

One engine drives every method so that seeds, warm-up, release rule, budget
accounting, logging, and evaluation cadence are identical across comparisons;
a method object only supplies the switch-to-human criterion and its own
network updates. Two loop shapes exist:

* human-gated: a simulated (or live) expert watches every step and takes over
  whenever the agent's proposal deviates beyond a fixed tolerance. Used for
  the warm-up trajectories of every method and, on its own, as HG-DAgger.
* robot-gated: the agent asks for help when its method's criterion fires,
  and the expert keeps control until the agent's proposal matches the
  expert's within the release tolerance.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .buffers import AGENT, EXPERT, Transition, human_buffer, novice_buffer, save_buffer
from .config import RunConfig
from .envs import CORRIDOR
from .errors import InvariantViolation
from .metrics import BudgetReport, deviation_ratio, evaluate, make_eval_env
from .nets import AdamState
from .policy import Policy, act, bc_update, make_policy, policy_to_json
from .proxyq import (FULL, ProxyQ, compute_beta, compute_epsilon, make_proxy_q,
                     proxy_q_to_json, q_value, should_release, update_proxy_q)
from .runlog import RunLogWriter, obs_digest
from .spaces import ContinuousSpace, deviates

WARMUP, MAIN = "warmup", "main"


class StopTraining(Exception):
    """Raised by session hooks to end a run cleanly."""


def init_rng(seed: int) -> np.random.Generator:
    """Stream for network initialization; disjoint from the training stream."""
    return np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[0])


def train_rng(seed: int) -> np.random.Generator:
    """Stream the loop consumes for batches, box samples and subsampling."""
    return np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])


@dataclass
class GateState:
    delta: float
    beta: float | None = None
    epsilon: float | None = None
    controller: str = AGENT
    intervention_count: int = 0
    expert_steps: int = 0


@dataclass
class SessionEvents:
    """Optional callbacks for a live session wrapped around the loop."""
    on_episode_start: object = None
    on_step: object = None       # called with (trainer, record_dict)
    on_request: object = None
    on_release: object = None
    should_stop: object = None   # () -> bool


@dataclass
class RunResult:
    method: str
    env_kind: str
    seed: int
    out_dir: str
    budget: BudgetReport
    warmup_expert_steps: int
    final_eval: dict
    best_eval: dict
    checkpoints: list
    stopped_early: bool = False
    variant: str | None = None

    def to_dict(self) -> dict:
        return {"method": self.method, "env": self.env_kind, "seed": self.seed,
                "budget": self.budget.to_dict(),
                "warmup_expert_steps": self.warmup_expert_steps,
                "final_eval": self.final_eval, "best_eval": self.best_eval,
                "stopped_early": self.stopped_early, "variant": self.variant}


class GatedTrainer:
    """Owns the environment, buffers, budget, logging and evaluation; the
    method object owns the gate criterion and its networks."""

    def __init__(self, method, cfg: RunConfig, out_dir, expert=None,
                 events: SessionEvents | None = None,
                 expert_kind: str = "oracle", budget_counts_all_steps=False):
        self.method = method
        self.cfg = cfg
        self.out_dir = str(out_dir)
        os.makedirs(self.out_dir, exist_ok=True)
        self.env = make_eval_env(cfg)
        self.space = self.env.space
        self.expert = expert or (lambda env: env.expert_action())
        self.events = events or SessionEvents()
        self.budget_counts_all_steps = budget_counts_all_steps

        self.rng = train_rng(cfg.seed)

        self.human = human_buffer()
        self.novice = novice_buffer()
        self.gate = GateState(delta=cfg.delta)
        self.total_steps = 0
        self.episode = -1
        self.warmup_expert_steps = 0
        self.checkpoints: list[dict] = []
        self._best = None
        self._window = {"steps": 0, "expert": 0, "requests": 0}
        self._loss_acc: dict[str, list] = {}
        self._stopped = False

        self.log = RunLogWriter(os.path.join(self.out_dir, "runlog.jsonl"),
                                method=method.name, env_kind=cfg.env_kind,
                                seed=cfg.seed, config=cfg.to_dict(),
                                expert_kind=expert_kind,
                                variant=getattr(method, "variant", None))

    # -- budget ------------------------------------------------------------

    def budget_spent(self) -> int:
        if self.budget_counts_all_steps:
            return self.total_steps
        return self.gate.expert_steps

    def budget_left(self) -> bool:
        return self.budget_spent() < self.cfg.expert_budget

    # -- bookkeeping --------------------------------------------------------

    def _note_losses(self, report: dict | None) -> None:
        if not report:
            return
        for k, v in report.items():
            self._loss_acc.setdefault(k, []).append(v)

    def _start_episode(self) -> np.ndarray:
        self.episode += 1
        layout = self.cfg.train_layout_seed(self.episode)
        obs = self.env.reset(layout)
        self.gate.controller = AGENT
        self.log.episode(self.episode, layout, obs_digest(obs))
        if self.events.on_episode_start:
            self.events.on_episode_start(self)
        return obs

    def _position(self):
        if self.cfg.env_kind == CORRIDOR:
            st = self.env.state
            return [st.x, st.y]
        return list(self.env.state.agent_pos)

    def _record_step(self, *, phase, controller, a_r, a_executed, score,
                     request_event, release_event, t: Transition) -> dict:
        record = dict(step=self.total_steps, episode=self.episode, phase=phase,
                      controller=controller, a_r=a_r, a_executed=a_executed,
                      space=self.space, q_value=score, beta=self.gate.beta,
                      epsilon=self.gate.epsilon,
                      request_event=request_event, release_event=release_event,
                      outcome=t.outcome,
                      expert_steps_used=self.gate.expert_steps,
                      pos=self._position(), digest=obs_digest(t.s_next))
        self.log.step(**record)
        self.total_steps += 1
        self._window["steps"] += 1
        self._window["expert"] += controller == EXPERT
        self._window["requests"] += request_event
        if self.events.on_step:
            self.events.on_step(self, record)
        if self.events.should_stop and self.events.should_stop():
            raise StopTraining
        return record

    def _maybe_eval(self) -> None:
        if self.total_steps % self.cfg.eval_every != 0:
            return
        self._eval_checkpoint()

    def _eval_checkpoint(self) -> None:
        policy = self.method.policy_snapshot()
        cfg = self.cfg
        if cfg.env_kind == CORRIDOR:
            report, probes = evaluate(policy, cfg, collect_states=True)
            probes = probes[::max(1, len(probes) // 1500)]
            probe_eps = self.gate.epsilon if self.gate.epsilon is not None else cfg.eps0
            try:
                dev = deviation_ratio(policy, cfg, probes, probe_eps)
            except Exception:
                dev = None
        else:
            report = evaluate(policy, cfg)
            dev = None
        w = self._window
        row = {
            "step": self.total_steps,
            "episode": self.episode,
            "expert_steps": self.gate.expert_steps,
            "total_steps": self.total_steps,
            "success_rate": report.success_rate,
            "episodic_return": report.episodic_return,
            "route_completion": report.route_completion,
            "crash_rate": report.crash_rate,
            "deviation_ratio": dev,
            "window_intervention_rate": (w["expert"] / w["steps"]) if w["steps"] else 0.0,
            "window_requests": w["requests"],
            "beta": self.gate.beta if np.isfinite(self.gate.beta or np.inf) else None,
            "epsilon": self.gate.epsilon,
        }
        for k, vals in self._loss_acc.items():
            row[k] = float(np.mean(vals)) if vals else None
        self._loss_acc = {k: [] for k in self._loss_acc}
        self._window = {"steps": 0, "expert": 0, "requests": 0}
        self.checkpoints.append(row)
        if self._best is None or row["success_rate"] > self._best["success_rate"]:
            self._best = row
            self._save_policy("policy_best.json")

    def _save_policy(self, name: str) -> None:
        with open(os.path.join(self.out_dir, name), "w") as fh:
            json.dump(policy_to_json(self.method.policy_snapshot()), fh)

    # -- human-gated loop ----------------------------------------------------

    def run_human_gated_episode(self, phase: str) -> None:
        obs = self._start_episode()
        cfg = self.cfg
        eps0 = cfg.eps0
        prev_controller = AGENT
        while not self.env.done and self.budget_left() and self.total_steps < cfg.total_steps:
            a_r = act(self.method.policy_snapshot_ref(), obs)
            a_h = self.expert(self.env)
            intervene = deviates(a_r, a_h, eps0, self.space)
            controller = EXPERT if intervene else AGENT
            request_event = controller == EXPERT and prev_controller == AGENT
            release_event = controller == AGENT and prev_controller == EXPERT
            executed = a_h if intervene else a_r
            self.gate.controller = controller
            self.gate.epsilon = eps0 if isinstance(self.space, ContinuousSpace) else None
            if request_event:
                self.gate.intervention_count += 1
                if self.events.on_request:
                    self.events.on_request(self)
            if release_event and self.events.on_release:
                self.events.on_release(self)

            t, _ = self.env.step(executed, actor=controller)
            if controller == EXPERT:
                self.human.push(t)
                self.gate.expert_steps += 1
                if phase == WARMUP:
                    self.warmup_expert_steps += 1
            else:
                self.novice.push(t)
            self._note_losses(self.method.train_on_human_gated_step(self, t))
            self._record_step(phase=phase, controller=controller, a_r=a_r,
                              a_executed=executed, score=None,
                              request_event=request_event,
                              release_event=release_event, t=t)
            self._maybe_eval()
            obs = t.s_next
            prev_controller = controller

    # -- robot-gated loop ------------------------------------------------------

    def run_robot_gated_episode(self) -> None:
        obs = self._start_episode()
        cfg = self.cfg
        if cfg.recompute_epsilon and len(self.human) > 0 and isinstance(
                self.space, ContinuousSpace):
            self.gate.epsilon = compute_epsilon(self.human, self.method.policy_snapshot_ref())
        while not self.env.done and self.total_steps < cfg.total_steps:
            a_r = act(self.method.policy_snapshot_ref(), obs)
            score = self.method.request_score(obs, a_r)
            request_event = release_event = False
            a_h = None
            if self.gate.controller == AGENT:
                if self.budget_left() and self.method.wants_expert(obs, a_r, score):
                    self.gate.controller = EXPERT
                    self.gate.intervention_count += 1
                    request_event = True
                    if self.events.on_request:
                        self.events.on_request(self)
            else:
                if not self.budget_left():
                    self.gate.controller = AGENT  # budget cut, no release event
                else:
                    a_h = self.expert(self.env)
                    eps = self.gate.epsilon if self.gate.epsilon is not None else 0.0
                    if should_release(a_r, a_h, eps, self.space):
                        self.gate.controller = AGENT
                        release_event = True
                        if self.events.on_release:
                            self.events.on_release(self)

            if self.gate.controller == EXPERT:
                if a_h is None:
                    a_h = self.expert(self.env)
                t, _ = self.env.step(a_h, actor=EXPERT)
                self.human.push(t)
                self.gate.expert_steps += 1
                self._note_losses(self.method.train_on_expert_step(self, t))
                executed = a_h
            else:
                t, _ = self.env.step(a_r, actor=AGENT)
                self.novice.push(t)
                executed = a_r
            self._note_losses(self.method.train_on_any_step(self, t))
            self._record_step(phase=MAIN, controller=t.actor, a_r=a_r,
                              a_executed=executed, score=score,
                              request_event=request_event,
                              release_event=release_event, t=t)
            self._maybe_eval()
            obs = t.s_next
        if self.env.done:
            self.gate.controller = AGENT

    # -- full run ----------------------------------------------------------

    def run(self) -> RunResult:
        cfg = self.cfg
        stopped = False
        try:
            for _ in range(cfg.warmup_trajectories):
                if not self.budget_left():
                    break
                self.run_human_gated_episode(WARMUP)
            if self.budget_counts_all_steps:
                # human-gated method: the whole budget is monitored steps
                while self.budget_left() and self.total_steps < cfg.total_steps:
                    self.run_human_gated_episode(MAIN)
            else:
                budget_exhausted_in_warmup = not self.budget_left()
                if not budget_exhausted_in_warmup:
                    self._note_losses(self.method.post_warmup(self))
                    while self.total_steps < cfg.total_steps:
                        self.run_robot_gated_episode()
                else:
                    self.log.note({"kind": "note",
                                   "event": "budget_exhausted_in_warmup"})
        except StopTraining:
            stopped = True
        return self._finalize(stopped)

    def _finalize(self, stopped: bool) -> RunResult:
        if not self.checkpoints or self.checkpoints[-1]["step"] != self.total_steps:
            self._eval_checkpoint()
        self.log.close()
        self._save_policy("policy_final.json")
        self.method.save_extras(self.out_dir)
        save_buffer(os.path.join(self.out_dir, "human_buffer.jsonl"),
                    self.human, self.space)

        with open(os.path.join(self.out_dir, "metrics.csv"), "w", newline="") as fh:
            cols = sorted({k for row in self.checkpoints for k in row})
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            writer.writerows(self.checkpoints)

        budget = BudgetReport(expert_data_usage=self.gate.expert_steps,
                              total_data_usage=self.total_steps)
        best = self._best or self.checkpoints[-1]
        result = RunResult(method=self.method.name, env_kind=self.cfg.env_kind,
                           seed=self.cfg.seed, out_dir=self.out_dir,
                           budget=budget,
                           warmup_expert_steps=self.warmup_expert_steps,
                           final_eval=self.checkpoints[-1], best_eval=best,
                           checkpoints=self.checkpoints, stopped_early=stopped,
                           variant=getattr(self.method, "variant", None))
        with open(os.path.join(self.out_dir, "result.json"), "w") as fh:
            json.dump(result.to_dict(), fh, indent=1)
        return result


class AimMethod:
    """Adaptive gate: a proxy intervention critic with quantile threshold."""

    NAMES = {FULL: "aim", "reward": "aim-reward", "no_td": "aim-notd"}

    def __init__(self, cfg: RunConfig, env, rng_init: np.random.Generator,
                 variant: str = FULL):
        self.cfg = cfg
        self.variant = None if variant == FULL else variant
        self._loss_variant = variant
        self.name = self.NAMES[variant]
        self.policy = make_policy(env.obs_dim, env.space, cfg.hidden, rng_init)
        self.q = make_proxy_q(env.obs_dim, env.space, cfg.hidden, rng_init,
                              tau=cfg.tau)
        self.policy_opt = AdamState.for_params(self.policy.net.params, lr=cfg.lr)
        self.q_opt = AdamState.for_params(self.q.online.params,
                                          lr=cfg.q_lr if cfg.q_lr is not None else cfg.lr)
        self._beta: float | None = None

    def policy_snapshot_ref(self) -> Policy:
        return self.policy

    def policy_snapshot(self) -> Policy:
        return self.policy.copy()

    def request_score(self, obs, a_r):
        return q_value(self.q, obs, a_r)

    def wants_expert(self, obs, a_r, score) -> bool:
        return self._beta is not None and score > self._beta

    def _bc(self, trainer: GatedTrainer) -> dict | None:
        loss = None
        n = self.cfg.bc_grad_steps or self.cfg.grad_steps_per_iter
        for _ in range(n):
            loss = bc_update(self.policy, trainer.human, self.cfg.batch_size,
                             self.policy_opt, trainer.rng)
        return {"bc_loss": loss} if loss is not None else None

    def _q_update(self, trainer: GatedTrainer) -> dict | None:
        if len(trainer.human) == 0:
            return None
        eps = trainer.gate.epsilon if trainer.gate.epsilon is not None else 0.0
        report = None
        for _ in range(self.cfg.grad_steps_per_iter):
            report = update_proxy_q(self.q, trainer.human, trainer.novice,
                                    self.policy, self.cfg.batch_size,
                                    self.cfg.gamma, eps, self.q_opt,
                                    trainer.rng, variant=self._loss_variant)
        return report

    def train_on_human_gated_step(self, trainer, t) -> dict | None:
        return self._bc(trainer)

    def train_on_expert_step(self, trainer, t) -> dict | None:
        return self._bc(trainer)

    def train_on_any_step(self, trainer, t) -> dict | None:
        if t.actor == EXPERT and not self.cfg.update_q_during_expert:
            return None
        report = self._q_update(trainer)
        self._refresh_beta(trainer)
        return report

    def _refresh_beta(self, trainer: GatedTrainer) -> None:
        if len(trainer.novice) == 0:
            return
        self._beta = compute_beta(self.q, trainer.novice, self.policy,
                                  self.cfg.delta, trainer.rng,
                                  cap=self.cfg.beta_subsample)
        trainer.gate.beta = self._beta

    def post_warmup(self, trainer: GatedTrainer) -> dict | None:
        cfg = self.cfg
        if isinstance(trainer.space, ContinuousSpace):
            if len(trainer.human) > 0:
                trainer.gate.epsilon = compute_epsilon(trainer.human, self.policy)
            else:
                trainer.gate.epsilon = cfg.eps0
        report = None
        if len(trainer.human) > 0:
            eps = trainer.gate.epsilon if trainer.gate.epsilon is not None else 0.0
            for _ in range(cfg.q_init_steps):
                report = update_proxy_q(self.q, trainer.human, trainer.novice,
                                        self.policy, cfg.batch_size, cfg.gamma,
                                        eps, self.q_opt, trainer.rng,
                                        variant=self._loss_variant)
        self._refresh_beta(trainer)
        return report

    def save_extras(self, out_dir) -> None:
        with open(os.path.join(out_dir, "proxy_q_final.json"), "w") as fh:
            json.dump(proxy_q_to_json(self.q), fh)


def aim_train(cfg: RunConfig, out_dir, variant: str = FULL, expert=None,
              events: SessionEvents | None = None,
              expert_kind: str = "oracle") -> tuple[RunResult, AimMethod]:
    """Full adaptive-gate training run; returns the result and the method
    (policy + critic) for further use."""
    env = make_eval_env(cfg)
    method = AimMethod(cfg, env, init_rng(cfg.seed), variant=variant)
    trainer = GatedTrainer(method, cfg, out_dir, expert=expert, events=events,
                           expert_kind=expert_kind)
    result = trainer.run()
    return result, method
