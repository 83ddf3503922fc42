"""Transitions and the human/novice replay buffers.

Every environment step becomes a :class:`Transition` attributed to whoever
chose the executed action. Expert-executed steps go to the human buffer,
agent-executed steps to the novice buffer; the two never mix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import EmptySourceError, InvariantViolation
from .spaces import ActionSpace, action_from_json, action_to_json

AGENT = "agent"
EXPERT = "expert"

OUTCOME_NONE = None
SUCCESS = "success"
CRASH = "crash"
TIMEOUT = "timeout"


@dataclass
class Transition:
    s: np.ndarray
    a: object
    s_next: np.ndarray
    actor: str
    done: bool
    outcome: str | None = None
    step_index: int = 0

    def __post_init__(self):
        if self.outcome is not None and not self.done:
            raise InvariantViolation("outcome set on a non-terminal transition")


@dataclass
class ArrayBatch:
    """Column view of sampled transitions, for vectorized updates."""
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    failed: np.ndarray  # terminal with outcome crash/timeout


class Buffer:
    """Append-only transition store, tagged by which actor it accepts.

    Entries are also mirrored into contiguous arrays so training batches
    assemble without per-sample stacking.
    """

    def __init__(self, tag: str):
        if tag not in (AGENT, EXPERT):
            raise ValueError(f"unknown buffer tag {tag!r}")
        self.tag = tag
        self.entries: list[Transition] = []
        self._n = 0
        self._cap = 0
        self._s = self._a = self._s_next = self._done = self._failed = None

    def __len__(self):
        return len(self.entries)

    def _ensure_capacity(self, t: Transition) -> None:
        if self._s is None:
            obs_dim = t.s.shape[0]
            self._cap = 256
            self._s = np.empty((self._cap, obs_dim))
            self._s_next = np.empty((self._cap, obs_dim))
            if isinstance(t.a, (int, np.integer)):
                self._a = np.empty(self._cap, dtype=np.int64)
            else:
                self._a = np.empty((self._cap, np.asarray(t.a).shape[0]))
            self._done = np.empty(self._cap, dtype=bool)
            self._failed = np.empty(self._cap, dtype=bool)
        elif self._n == self._cap:
            self._cap *= 2
            for name in ("_s", "_a", "_s_next", "_done", "_failed"):
                old = getattr(self, name)
                new = np.empty((self._cap, *old.shape[1:]), dtype=old.dtype)
                new[:self._n] = old
                setattr(self, name, new)

    def push(self, t: Transition) -> None:
        if t.actor != self.tag:
            raise InvariantViolation(
                f"cannot push {t.actor} transition into {self.tag} buffer")
        self.entries.append(t)
        self._ensure_capacity(t)
        i = self._n
        self._s[i] = t.s
        self._s_next[i] = t.s_next
        self._a[i] = t.a
        self._done[i] = t.done
        self._failed[i] = t.outcome in (CRASH, TIMEOUT)
        self._n += 1

    def sample(self, k: int, rng: np.random.Generator) -> list[Transition]:
        """Draw k entries uniformly with replacement."""
        if not self.entries:
            raise EmptySourceError("cannot sample from an empty buffer")
        idx = rng.integers(0, len(self.entries), size=k)
        return [self.entries[i] for i in idx]

    def sample_arrays(self, k: int, rng: np.random.Generator) -> ArrayBatch:
        if not self.entries:
            raise EmptySourceError("cannot sample from an empty buffer")
        idx = rng.integers(0, len(self.entries), size=k)
        return self.arrays_at(idx)

    def arrays_at(self, idx: np.ndarray) -> ArrayBatch:
        return ArrayBatch(s=self._s[idx], a=self._a[idx],
                          s_next=self._s_next[idx], done=self._done[idx],
                          failed=self._failed[idx])

    def states_at(self, idx: np.ndarray) -> np.ndarray:
        return self._s[idx]

    def states(self) -> np.ndarray:
        return self._s[:self._n].copy()

    def actions(self) -> np.ndarray:
        return self._a[:self._n].copy()


def concat_batches(a: ArrayBatch, b: ArrayBatch) -> ArrayBatch:
    return ArrayBatch(s=np.concatenate([a.s, b.s]),
                      a=np.concatenate([a.a, b.a]),
                      s_next=np.concatenate([a.s_next, b.s_next]),
                      done=np.concatenate([a.done, b.done]),
                      failed=np.concatenate([a.failed, b.failed]))


def human_buffer() -> Buffer:
    return Buffer(EXPERT)


def novice_buffer() -> Buffer:
    return Buffer(AGENT)


def transition_to_json(t: Transition, space: ActionSpace) -> str:
    doc = {
        "s": [float(v) for v in t.s],
        "a": action_to_json(t.a, space),
        "s_next": [float(v) for v in t.s_next],
        "actor": t.actor,
        "done": t.done,
        "outcome": t.outcome,
        "step": t.step_index,
    }
    return json.dumps(doc)


def transition_from_json(line: str, space: ActionSpace) -> Transition:
    doc = json.loads(line)
    return Transition(
        s=np.asarray(doc["s"], dtype=np.float64),
        a=action_from_json(doc["a"], space),
        s_next=np.asarray(doc["s_next"], dtype=np.float64),
        actor=doc["actor"],
        done=doc["done"],
        outcome=doc["outcome"],
        step_index=doc["step"],
    )


def save_buffer(path, buf: Buffer, space: ActionSpace) -> None:
    with open(path, "w") as fh:
        for t in buf.entries:
            fh.write(transition_to_json(t, space) + "\n")


def load_buffer(path, tag: str, space: ActionSpace) -> Buffer:
    buf = Buffer(tag)
    with open(path) as fh:
        for line in fh:
            if line.strip():
                buf.push(transition_from_json(line, space))
    return buf
