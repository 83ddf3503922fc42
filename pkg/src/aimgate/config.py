"""Run configuration: algorithm hyperparameters plus environment parameters.

`paper_defaults` carries the published hyperparameters for each action-space
kind; the `desk_*` presets shrink batch sizes, network widths and step counts
so a full five-seed comparison fits in CPU minutes. A simple ``key = value``
config file can override any field.
"""

from __future__ import annotations

import ast
import dataclasses
import os
from dataclasses import dataclass

from .envs import CORRIDOR, FOURROOMS

EVAL_SEED_BASE = 2 ** 31  # training layouts live below this, held-out above


@dataclass
class RunConfig:
    env_kind: str = FOURROOMS
    seed: int = 0

    # core training hyperparameters
    gamma: float = 0.99
    lr: float = 1e-4
    q_lr: float | None = None     # critic rate; defaults to lr
    batch_size: int = 1024
    grad_steps_per_iter: int = 1
    bc_grad_steps: int | None = None  # imitation steps per expert step; defaults to grad_steps_per_iter
    delta: float = 0.05
    warmup_trajectories: int = 2
    expert_budget: int = 2000
    total_steps: int = 20_000

    # gate bootstrapping
    eps0: float = 0.04            # simulated-human tolerance before eps exists
    q_init_steps: int = 2000      # proxy-Q gradient steps on warm-up data
    recompute_epsilon: bool = False
    update_q_during_expert: bool = True
    beta_subsample: int = 4096    # states scored per threshold refresh

    # networks
    hidden: tuple = (256, 256)
    tau: float = 0.005

    # evaluation
    eval_every: int = 500
    eval_rollouts: int = 50
    train_pool: int = 50          # distinct training layouts, cycled

    # environment geometry
    max_steps: int = 100
    grid_size: int = 13
    goal_x: float = 80.0
    lane_halfwidth: float = 4.0
    n_rays: int = 24

    # baselines
    n_ensemble: int = 5
    ensemble_threshold: float = 1e-3
    bc_warmup_steps: int = 200
    thrifty_novelty_quantile: float = 0.05
    thrifty_risk_quantile: float = 0.01
    thrifty_update_every: int = 25
    bc_train_steps: int = 4000    # offline behavior-cloning budget

    def train_layout_seed(self, episode: int) -> int:
        slot = episode % self.train_pool if self.train_pool > 0 else episode
        return (self.seed * 1_000_003 + slot * 7919 + 1) % EVAL_SEED_BASE

    @staticmethod
    def eval_layout_seed(rollout: int) -> int:
        return EVAL_SEED_BASE + rollout  # fixed held-out suite, shared by all runs

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["hidden"] = list(self.hidden)
        return doc

    def replace(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "hidden" in doc:
            doc = {**doc, "hidden": tuple(doc["hidden"])}
        return cls(**doc)


def paper_defaults(env_kind: str) -> RunConfig:
    """Published hyperparameter tables for each action-space kind."""
    if env_kind == CORRIDOR:
        return RunConfig(env_kind=CORRIDOR, batch_size=1024, grad_steps_per_iter=1,
                         hidden=(256, 256), max_steps=200, eval_rollouts=50,
                         ensemble_threshold=1e-3, bc_warmup_steps=200)
    return RunConfig(env_kind=FOURROOMS, batch_size=200, grad_steps_per_iter=32,
                     hidden=(256, 256), max_steps=100, eval_rollouts=50,
                     ensemble_threshold=5e-3, bc_warmup_steps=100)


def desk_fourrooms(seed: int = 0) -> RunConfig:
    """Desk-scale preset: same protocol, sized for single-CPU minutes."""
    return paper_defaults(FOURROOMS).replace(
        seed=seed, lr=1e-3, q_lr=2e-4, batch_size=192, grad_steps_per_iter=1,
        bc_grad_steps=32, hidden=(48, 48), total_steps=20_000, q_init_steps=600,
        train_pool=0, grid_size=9,
        eval_every=1000, eval_rollouts=40, max_steps=160,
        beta_subsample=384, bc_train_steps=8000)


def desk_corridor(seed: int = 0) -> RunConfig:
    return paper_defaults(CORRIDOR).replace(
        seed=seed, lr=1e-3, q_lr=1e-4, batch_size=64, grad_steps_per_iter=2,
        bc_grad_steps=8, hidden=(48, 48), total_steps=8000, q_init_steps=600,
        eval_every=500, eval_rollouts=20, max_steps=150,
        beta_subsample=256, bc_train_steps=3000)


def desk_preset(env_kind: str, seed: int = 0) -> RunConfig:
    return desk_fourrooms(seed) if env_kind == FOURROOMS else desk_corridor(seed)


def parse_config_file(path) -> dict:
    """Read ``key = value`` lines; values are python literals or bare strings."""
    doc = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            try:
                doc[key] = ast.literal_eval(raw)
            except (ValueError, SyntaxError):
                doc[key] = raw
    return doc


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    overrides = parse_config_file(path)
    base_doc = (base or paper_defaults(overrides.get("env_kind", FOURROOMS))).to_dict()
    base_doc.update(overrides)
    return RunConfig.from_dict(base_doc)


def log_level() -> str:
    return os.environ.get("AIMGATE_LOG", "info").lower()
