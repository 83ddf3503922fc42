"""Reference methods under the identical budget protocol.

Every method here reuses the shared gated loop, so seeds, warm-up, release
rule and budget accounting match the adaptive gate exactly; only the
switch-to-human criterion (and the policy container for ensembles) differs.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .buffers import EXPERT, concat_batches, human_buffer
from .config import RunConfig
from .envs import FOURROOMS
from .metrics import bc_train_offline, evaluate, make_eval_env
from .nets import AdamState, adam_step, backward, forward, polyak_update
from .policy import Policy, act, act_batch, bc_update, make_policy, policy_to_json
from .proxyq import (NO_TD, REWARD_LABEL, _max_next_q, _q_batch,
                     compute_epsilon, make_proxy_q, nearest_rank)
from .runlog import RunLogWriter, obs_digest
from .spaces import ContinuousSpace
from .training import MAIN, GatedTrainer, RunResult, aim_train, init_rng


def ensemble_uncertainty(members: list[Policy], s: np.ndarray) -> float:
    """Disagreement of the policy ensemble at one state.

    Continuous: mean over action dimensions of the across-member population
    variance. Discrete: one minus the plurality vote fraction (ties go to the
    lowest action index, matching the argmax tie-break).
    """
    space = members[0].space
    if isinstance(space, ContinuousSpace):
        actions = np.stack([act(m, s) for m in members])
        return float(np.mean(np.var(actions, axis=0)))
    votes = np.array([act(m, s) for m in members])
    counts = np.bincount(votes, minlength=space.n)
    return 1.0 - counts.max() / len(members)


class HgDaggerMethod:
    """Single policy; the (simulated) human gates every step."""

    name = "hgdagger"
    variant = None

    def __init__(self, cfg: RunConfig, env, rng: np.random.Generator):
        self.cfg = cfg
        self.policy = make_policy(env.obs_dim, env.space, cfg.hidden, rng)
        self.opt = AdamState.for_params(self.policy.net.params, lr=cfg.lr)

    def policy_snapshot_ref(self) -> Policy:
        return self.policy

    def policy_snapshot(self) -> Policy:
        return self.policy.copy()

    def train_on_human_gated_step(self, trainer, t) -> dict | None:
        loss = None
        n = self.cfg.bc_grad_steps or self.cfg.grad_steps_per_iter
        for _ in range(n):
            loss = bc_update(self.policy, trainer.human, self.cfg.batch_size,
                             self.opt, trainer.rng)
        return {"bc_loss": loss} if loss is not None else None

    def save_extras(self, out_dir) -> None:
        pass


def hgdagger_train(cfg: RunConfig, out_dir, expert=None) -> RunResult:
    env = make_eval_env(cfg)
    method = HgDaggerMethod(cfg, env, init_rng(cfg.seed))
    trainer = GatedTrainer(method, cfg, out_dir, expert=expert,
                           budget_counts_all_steps=True)
    return trainer.run()


class EnsembleMethod:
    """Fixed-threshold uncertainty gate over an ensemble of policies."""

    name = "ensemble"
    variant = None

    def __init__(self, cfg: RunConfig, env, rng: np.random.Generator,
                 n_members: int | None = None):
        self.cfg = cfg
        n = n_members or cfg.n_ensemble
        self.members = [make_policy(env.obs_dim, env.space, cfg.hidden, rng)
                        for _ in range(n)]
        self.opts = [AdamState.for_params(m.net.params, lr=cfg.lr)
                     for m in self.members]

    def policy_snapshot_ref(self) -> Policy:
        return self.members[0]  # the executed agent action is member 0's

    def policy_snapshot(self) -> Policy:
        return self.members[0].copy()

    def request_score(self, obs, a_r) -> float:
        return ensemble_uncertainty(self.members, obs)

    def wants_expert(self, obs, a_r, score) -> bool:
        return score > self.cfg.ensemble_threshold

    def _train_members(self, trainer) -> dict | None:
        loss = None
        n = self.cfg.bc_grad_steps or self.cfg.grad_steps_per_iter
        for _ in range(n):
            for m, opt in zip(self.members, self.opts):
                # each member draws its own batch
                loss = bc_update(m, trainer.human, self.cfg.batch_size, opt,
                                 trainer.rng)
        return {"bc_loss": loss} if loss is not None else None

    def train_on_human_gated_step(self, trainer, t) -> dict | None:
        return self._train_members(trainer)

    def train_on_expert_step(self, trainer, t) -> dict | None:
        return self._train_members(trainer)

    def train_on_any_step(self, trainer, t) -> dict | None:
        return None

    def post_warmup(self, trainer) -> dict | None:
        report = None
        if len(trainer.human) > 0:
            for _ in range(self.cfg.bc_warmup_steps):
                for m, opt in zip(self.members, self.opts):
                    loss = bc_update(m, trainer.human, self.cfg.batch_size,
                                     opt, trainer.rng)
                report = {"bc_loss": loss}
        if isinstance(trainer.space, ContinuousSpace):
            if len(trainer.human) > 0:
                trainer.gate.epsilon = compute_epsilon(trainer.human, self.members[0])
            else:
                trainer.gate.epsilon = self.cfg.eps0
        trainer.gate.beta = self.cfg.ensemble_threshold
        return report

    def save_extras(self, out_dir) -> None:
        pass


def ensemble_dagger_train(cfg: RunConfig, out_dir, expert=None) -> RunResult:
    env = make_eval_env(cfg)
    method = EnsembleMethod(cfg, env, init_rng(cfg.seed))
    trainer = GatedTrainer(method, cfg, out_dir, expert=expert)
    return trainer.run()


class ThriftyMethod(EnsembleMethod):
    """Rolling-quantile gate on ensemble novelty OR learned failure risk."""

    name = "thrifty"

    def __init__(self, cfg: RunConfig, env, rng: np.random.Generator):
        super().__init__(cfg, env, rng)
        self.risk = make_proxy_q(env.obs_dim, env.space, cfg.hidden, rng,
                                 tau=cfg.tau)
        self.risk_opt = AdamState.for_params(self.risk.online.params, lr=cfg.lr)
        self.novelty_thr: float | None = None
        self.risk_thr: float | None = None

    def risk_value(self, obs, a) -> float:
        v = float(_q_batch(self.risk.online, self.risk.space, obs[None, :], [a])[0])
        return min(max(v, 0.0), 1.0)  # discounted failure probability

    def wants_expert(self, obs, a_r, score) -> bool:
        if self.novelty_thr is None:
            return False
        if score > self.novelty_thr:
            return True
        return self.risk_value(obs, a_r) > (self.risk_thr
                                            if self.risk_thr is not None else 1.0)

    def _risk_update(self, trainer) -> dict | None:
        """TD toward the failure indicator: 1 at crash/timeout terminals,
        discounted max-next elsewhere."""
        if len(trainer.human) == 0 and len(trainer.novice) == 0:
            return None
        half = self.cfg.batch_size // 2
        parts = []
        if len(trainer.human) > 0:
            parts.append(trainer.human.sample_arrays(half, trainer.rng))
        want = self.cfg.batch_size - (half if parts else 0)
        if len(trainer.novice) > 0:
            parts.append(trainer.novice.sample_arrays(want, trainer.rng))
        b = parts[0] if len(parts) == 1 else concat_batches(*parts)
        n = b.s.shape[0]
        m = _max_next_q(self.risk, b.s_next, b.done, self.members[0], trainer.rng)
        target = np.where(b.failed, 1.0, self.cfg.gamma * m)
        if isinstance(self.risk.space, ContinuousSpace):
            x = np.concatenate([b.s, b.a], axis=1)
            err = forward(self.risk.online, x)[:, 0] - target
            grads = backward(self.risk.online, x, ((2.0 / n) * err)[:, None]).params
        else:
            actions = b.a.astype(int)
            out = forward(self.risk.online, b.s)
            rows = np.arange(n)
            err = out[rows, actions] - target
            upstream = np.zeros_like(out)
            upstream[rows, actions] = (2.0 / n) * err
            grads = backward(self.risk.online, b.s, upstream).params
        adam_step(self.risk.online.params, grads, self.risk_opt)
        polyak_update(self.risk.pair)
        return {"risk_loss": float(np.mean(err ** 2))}

    def _refresh_quantiles(self, trainer) -> None:
        n = len(trainer.novice)
        if n == 0:
            return
        cap = self.cfg.beta_subsample
        if n > cap:
            idx = trainer.rng.choice(n, size=cap, replace=False)
        else:
            idx = np.arange(n)
        states = np.stack([trainer.novice.entries[i].s for i in idx])
        novelty = np.array([ensemble_uncertainty(self.members, s) for s in states])
        self.novelty_thr = nearest_rank(novelty, 1.0 - self.cfg.thrifty_novelty_quantile)
        a_r = act_batch(self.members[0], states)
        risks = np.clip(_q_batch(self.risk.online, self.risk.space, states, a_r),
                        0.0, 1.0)
        self.risk_thr = nearest_rank(risks, 1.0 - self.cfg.thrifty_risk_quantile)
        trainer.gate.beta = self.novelty_thr

    def train_on_any_step(self, trainer, t) -> dict | None:
        report = self._risk_update(trainer)
        if trainer.total_steps % self.cfg.thrifty_update_every == 0:
            self._refresh_quantiles(trainer)
        return report

    def post_warmup(self, trainer) -> dict | None:
        report = super().post_warmup(trainer)
        self._refresh_quantiles(trainer)
        return report


def thrifty_train(cfg: RunConfig, out_dir, expert=None) -> RunResult:
    env = make_eval_env(cfg)
    method = ThriftyMethod(cfg, env, init_rng(cfg.seed))
    trainer = GatedTrainer(method, cfg, out_dir, expert=expert)
    return trainer.run()


def aim_ablation_train(cfg: RunConfig, out_dir, variant: str) -> RunResult:
    """The two gate ablations: reward-labeled TD targets, or no TD term."""
    if variant not in (REWARD_LABEL, NO_TD):
        raise ValueError(f"unknown ablation {variant!r}")
    result, _ = aim_train(cfg, out_dir, variant=variant)
    return result


def collect_expert_demos(cfg: RunConfig, out_dir, n_steps: int | None = None):
    """Roll the oracle on training layouts until the step budget is filled;
    the log is a pure-demonstration record (no gating semantics)."""
    budget = n_steps or cfg.expert_budget
    env = make_eval_env(cfg)
    buf = human_buffer()
    os.makedirs(str(out_dir), exist_ok=True)
    log = RunLogWriter(os.path.join(str(out_dir), "runlog.jsonl"), method="bc",
                       env_kind=cfg.env_kind, seed=cfg.seed,
                       config=cfg.to_dict(), expert_kind="oracle")
    episode = 0
    steps = 0
    while steps < budget:
        layout = cfg.train_layout_seed(episode)
        obs = env.reset(layout)
        log.episode(episode, layout, obs_digest(obs))
        first = True
        while not env.done and steps < budget:
            a_h = env.expert_action()
            t, _ = env.step(a_h, actor=EXPERT)
            buf.push(t)
            steps += 1
            pos = ([env.state.x, env.state.y] if cfg.env_kind != FOURROOMS
                   else list(env.state.agent_pos))
            log.step(step=steps - 1, episode=episode, phase=MAIN,
                     controller=EXPERT, a_r=a_h, a_executed=a_h,
                     space=env.space, q_value=None, beta=None, epsilon=None,
                     request_event=first, release_event=False,
                     outcome=t.outcome, expert_steps_used=steps, pos=pos,
                     digest=obs_digest(t.s_next))
            first = False
        episode += 1
    log.close()
    return buf


def bc_train(cfg: RunConfig, out_dir) -> RunResult:
    """Plain behavior cloning on oracle demonstrations, no interaction."""
    out_dir = str(out_dir)
    dataset = collect_expert_demos(cfg, out_dir)
    policy = bc_train_offline(dataset, cfg)
    report = evaluate(policy, cfg)
    with open(os.path.join(out_dir, "policy_final.json"), "w") as fh:
        json.dump(policy_to_json(policy), fh)
    with open(os.path.join(out_dir, "policy_best.json"), "w") as fh:
        json.dump(policy_to_json(policy), fh)
    row = {"step": cfg.expert_budget, "expert_steps": cfg.expert_budget,
           "total_steps": cfg.expert_budget, **report.to_dict()}
    from .metrics import BudgetReport
    result = RunResult(method="bc", env_kind=cfg.env_kind, seed=cfg.seed,
                       out_dir=out_dir,
                       budget=BudgetReport(cfg.expert_budget, cfg.expert_budget),
                       warmup_expert_steps=0, final_eval=row, best_eval=row,
                       checkpoints=[row])
    with open(os.path.join(out_dir, "result.json"), "w") as fh:
        json.dump(result.to_dict(), fh, indent=1)
    return result
