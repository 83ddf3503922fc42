"""Desk-scale environments with scripted oracle experts."""

from __future__ import annotations

from dataclasses import dataclass

FOURROOMS = "fourrooms"
CORRIDOR = "corridor"


@dataclass(frozen=True)
class EpisodeConfig:
    env_kind: str
    max_steps: int
    randomization_seed: int

    def __post_init__(self):
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")
        if self.env_kind not in (FOURROOMS, CORRIDOR):
            raise ValueError(f"unknown env kind {self.env_kind!r}")


def make_env(kind: str, **kwargs):
    if kind == FOURROOMS:
        from .fourrooms import FourRoomsEnv
        return FourRoomsEnv(**kwargs)
    if kind == CORRIDOR:
        from .corridor import CorridorEnv
        return CorridorEnv(**kwargs)
    raise ValueError(f"unknown env kind {kind!r}")


def expert_action(env, state=None):
    """Query the environment's scripted oracle, at the current state by default."""
    return env.expert_action(state)
