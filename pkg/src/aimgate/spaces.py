"""Action spaces and the action-deviation predicate shared by every gate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# A continuous action is a float vector, a discrete one an integer index.
Action = np.ndarray | int


@dataclass(frozen=True, eq=False)
class ContinuousSpace:
    """Box action space: valid actions are vectors with low[i] <= a[i] <= high[i]."""

    low: np.ndarray
    high: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, ContinuousSpace)
                and np.array_equal(self.low, other.low)
                and np.array_equal(self.high, other.high))

    def __post_init__(self):
        object.__setattr__(self, "low", np.asarray(self.low, dtype=np.float64))
        object.__setattr__(self, "high", np.asarray(self.high, dtype=np.float64))
        if self.low.shape != self.high.shape or self.low.ndim != 1:
            raise ValueError("low/high must be 1-D vectors of equal length")
        if not np.all(self.low < self.high):
            raise ValueError("need low[i] < high[i] for every dimension")

    @property
    def dim(self) -> int:
        return self.low.shape[0]

    def clamp(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (self.dim,):
            raise ValueError(f"action shape {a.shape} does not match space dim {self.dim}")
        return np.clip(a, self.low, self.high)

    def to_json(self) -> dict:
        return {"kind": "continuous", "low": [float(v) for v in self.low],
                "high": [float(v) for v in self.high]}


@dataclass(frozen=True)
class DiscreteSpace:
    """Discrete action space: valid actions are integers in [0, n)."""

    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("discrete space needs n >= 2")

    def contains(self, a: int) -> bool:
        return isinstance(a, (int, np.integer)) and 0 <= int(a) < self.n

    def to_json(self) -> dict:
        return {"kind": "discrete", "n": self.n}


ActionSpace = ContinuousSpace | DiscreteSpace


def space_from_json(doc: dict) -> ActionSpace:
    if doc["kind"] == "continuous":
        return ContinuousSpace(np.array(doc["low"]), np.array(doc["high"]))
    if doc["kind"] == "discrete":
        return DiscreteSpace(int(doc["n"]))
    raise ValueError(f"unknown action space kind {doc['kind']!r}")


def symmetric_box(dim: int) -> ContinuousSpace:
    return ContinuousSpace(-np.ones(dim), np.ones(dim))


def deviates(a_r, a_h, eps: float, space: ActionSpace) -> bool:
    """Whether the agent's action differs from the expert's beyond tolerance.

    Continuous spaces compare the squared Euclidean distance against ``eps``
    (strictly greater means deviation; a tie does not). Discrete spaces ignore
    ``eps`` and deviate exactly when the action indices differ.
    """
    if isinstance(space, DiscreteSpace):
        if not (space.contains(a_r) and space.contains(a_h)):
            raise ValueError("discrete action out of range for space")
        return int(a_r) != int(a_h)
    if eps < 0:
        raise ValueError("eps must be >= 0")
    a_r = np.asarray(a_r, dtype=np.float64)
    a_h = np.asarray(a_h, dtype=np.float64)
    if a_r.shape != (space.dim,) or a_h.shape != (space.dim,):
        raise ValueError("action dimension mismatch with space")
    diff = a_r - a_h
    return float(diff @ diff) > eps


def action_to_json(a, space: ActionSpace):
    if isinstance(space, DiscreteSpace):
        return int(a)
    return [float(v) for v in np.asarray(a, dtype=np.float64)]


def action_from_json(doc, space: ActionSpace):
    if isinstance(space, DiscreteSpace):
        return int(doc)
    return np.asarray(doc, dtype=np.float64)
