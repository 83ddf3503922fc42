"""FourRooms gridworld: rooms split by walls with closed doors, sparse goal.

The agent sees a 7x7 egocentric patch in front of it, one-hot encoded, with
cells hidden behind walls or closed doors rendered as Unknown. The scripted
oracle plans shortest action sequences over the (position, direction,
door-state) product graph, so its episode length is provably minimal.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from ..buffers import AGENT, SUCCESS, TIMEOUT, Transition
from ..errors import InvalidStateError, NoPlanError
from ..spaces import DiscreteSpace

# grid cell codes
EMPTY, WALL, DOOR_CLOSED, DOOR_OPEN, GOAL = 0, 1, 2, 3, 4
N_CHANNELS = 6  # the five codes plus Unknown
UNKNOWN_CHANNEL = 5

# actions, in oracle tie-break order
TURN_LEFT, TURN_RIGHT, FORWARD, OPEN_DOOR = 0, 1, 2, 3
ACTION_NAMES = ("turn_left", "turn_right", "forward", "open_door")

# agent directions: N, E, S, W as (dr, dc)
DIR_VECS = ((-1, 0), (0, 1), (1, 0), (0, -1))

VIEW = 7  # patch side length; agent sits at the bottom-center cell


@dataclass
class FourRoomsState:
    grid: np.ndarray  # (size, size) int8 of cell codes
    agent_pos: tuple[int, int]
    agent_dir: int
    step_count: int
    layout_seed: int

    def door_positions(self) -> list[tuple[int, int]]:
        rs, cs = np.nonzero((self.grid == DOOR_CLOSED) | (self.grid == DOOR_OPEN))
        return sorted(zip(rs.tolist(), cs.tolist()))

    def door_mask(self) -> int:
        mask = 0
        for i, pos in enumerate(self.door_positions()):
            if self.grid[pos] == DOOR_OPEN:
                mask |= 1 << i
        return mask


def generate_layout(size: int, seed: int) -> tuple[np.ndarray, tuple, int, tuple]:
    """Rooms in a chain separated by walls with one closed door each; the
    agent spawns in the first room, the goal sits in the last. Deterministic
    per seed."""
    rng = np.random.default_rng(seed)
    grid = np.full((size, size), EMPTY, dtype=np.int8)
    grid[0, :] = grid[-1, :] = WALL
    grid[:, 0] = grid[:, -1] = WALL

    n_rooms = int(rng.integers(2, 5))
    lo, hi = 2, size - 3
    ideal = np.linspace(lo + 1, hi, n_rooms + 1)[1:-1]
    wall_cols = []
    prev = lo - 1
    for w in ideal:
        c = int(round(w + rng.integers(-1, 2)))
        c = max(prev + 3, min(c, hi))  # keep every room at least 2 cells wide
        wall_cols.append(c)
        prev = c
    wall_cols = [c for c in wall_cols if c <= hi]
    for c in wall_cols:
        grid[:, c] = WALL
        grid[int(rng.integers(1, size - 1)), c] = DOOR_CLOSED

    transpose = bool(rng.integers(0, 2))

    first = [(r, c) for r, c in zip(*np.nonzero(grid == EMPTY))
             if c < (wall_cols[0] if wall_cols else size)]
    last = [(r, c) for r, c in zip(*np.nonzero(grid == EMPTY))
            if c > (wall_cols[-1] if wall_cols else -1)]
    start = first[int(rng.integers(0, len(first)))]
    goal = last[int(rng.integers(0, len(last)))]
    while goal == start:
        goal = last[int(rng.integers(0, len(last)))]
    start_dir = int(rng.integers(0, 4))

    if transpose:
        grid = grid.T.copy()
        start = (start[1], start[0])
        goal = (goal[1], goal[0])
    start = (int(start[0]), int(start[1]))
    goal = (int(goal[0]), int(goal[1]))
    grid[goal] = GOAL
    return grid, start, start_dir, goal


def _passable(code: int, mask_bit_open: bool) -> bool:
    if code == WALL:
        return False
    if code == DOOR_CLOSED or code == DOOR_OPEN:
        return mask_bit_open
    return True


def _transition(grid, doors, pos, d, mask, action):
    """Pure (pos, dir, mask) dynamics shared by env.step and the planner."""
    if action == TURN_LEFT:
        return pos, (d - 1) % 4, mask
    if action == TURN_RIGHT:
        return pos, (d + 1) % 4, mask
    ahead = (pos[0] + DIR_VECS[d][0], pos[1] + DIR_VECS[d][1])
    code = grid[ahead]
    if action == FORWARD:
        bit = (mask >> doors.index(ahead)) & 1 if ahead in doors else 0
        if code in (DOOR_CLOSED, DOOR_OPEN):
            return (ahead if bit else pos), d, mask
        if code == WALL:
            return pos, d, mask
        return ahead, d, mask
    if action == OPEN_DOOR:
        if ahead in doors:
            return pos, d, mask | (1 << doors.index(ahead))
        return pos, d, mask
    raise ValueError(f"invalid action {action}")


def _canonical_key(grid: np.ndarray) -> bytes:
    # door open/closed lives in the mask dimension, not in the cache key
    canon = grid.copy()
    canon[canon == DOOR_OPEN] = DOOR_CLOSED
    return canon.tobytes()


@lru_cache(maxsize=512)
def _distance_table(grid_bytes: bytes, size: int, goal: tuple) -> dict:
    """Steps-to-goal for every (pos, dir, door mask), by backward BFS."""
    grid = np.frombuffer(grid_bytes, dtype=np.int8).reshape(size, size)
    doors = tuple(sorted(zip(*[a.tolist() for a in np.nonzero(
        (grid == DOOR_CLOSED) | (grid == DOOR_OPEN))])))
    n_masks = 1 << len(doors)
    cells = [(int(r), int(c)) for r, c in zip(*np.nonzero(grid != WALL))]

    rev: dict = {}
    for pos in cells:
        for d in range(4):
            for mask in range(n_masks):
                src = (pos, d, mask)
                for a in range(4):
                    dst = _transition(grid, doors, pos, d, mask, a)
                    if dst != src:
                        rev.setdefault(dst, []).append(src)

    dist = {}
    frontier = deque()
    for d in range(4):
        for mask in range(n_masks):
            s = (goal, d, mask)
            dist[s] = 0
            frontier.append(s)
    while frontier:
        cur = frontier.popleft()
        for prev in rev.get(cur, ()):
            if prev not in dist:
                dist[prev] = dist[cur] + 1
                frontier.append(prev)
    return dist


class FourRoomsEnv:
    """Discrete rooms-and-doors world with a shortest-path oracle."""

    kind = "fourrooms"

    def __init__(self, size: int = 13, max_steps: int = 100):
        self.size = size
        self.max_steps = max_steps
        self.space = DiscreteSpace(4)
        self.obs_dim = VIEW * VIEW * N_CHANNELS
        self.state: FourRoomsState | None = None
        self._done = True
        self._last_obs: np.ndarray | None = None

    # -- episode control -------------------------------------------------

    def reset(self, layout_seed: int) -> np.ndarray:
        grid, start, start_dir, _ = generate_layout(self.size, layout_seed)
        self.state = FourRoomsState(grid=grid, agent_pos=start, agent_dir=start_dir,
                                    step_count=0, layout_seed=layout_seed)
        self._done = False
        self._last_obs = self.observe()
        return self._last_obs

    @property
    def done(self) -> bool:
        return self._done

    def step(self, action: int, actor: str = AGENT) -> tuple[Transition, float]:
        if self._done or self.state is None:
            raise InvalidStateError("step() after episode end")
        if not self.space.contains(action):
            raise ValueError(f"invalid action {action!r}")
        st = self.state
        s_before = self._last_obs
        doors = tuple(st.door_positions())
        pos, d, mask = _transition(st.grid, doors, st.agent_pos, st.agent_dir,
                                   st.door_mask(), int(action))
        for i, dp in enumerate(doors):
            if (mask >> i) & 1:
                st.grid[dp] = DOOR_OPEN
        reached_goal = st.grid[pos] == GOAL
        st.agent_pos = pos
        st.agent_dir = d
        st.step_count += 1

        outcome = None
        if reached_goal:
            outcome = SUCCESS
        elif st.step_count >= self.max_steps:
            outcome = TIMEOUT
        self._done = outcome is not None
        reward = 1.0 if outcome == SUCCESS else 0.0
        self._last_obs = self.observe()
        t = Transition(s=s_before, a=int(action), s_next=self._last_obs,
                       actor=actor, done=self._done, outcome=outcome,
                       step_index=st.step_count - 1)
        return t, reward

    # -- observation ------------------------------------------------------

    def observe(self, state: FourRoomsState | None = None) -> np.ndarray:
        """One-hot 7x7 forward patch; occluded and off-grid cells are Unknown."""
        st = state or self.state
        r0, c0 = st.agent_pos
        fwd = DIR_VECS[st.agent_dir]
        right = DIR_VECS[(st.agent_dir + 1) % 4]

        # world coordinates of each patch cell (agent at bottom-center)
        f = (VIEW - 1 - np.arange(VIEW))[:, None]
        l = (np.arange(VIEW) - VIEW // 2)[None, :]
        rows = r0 + f * fwd[0] + l * right[0]
        cols = c0 + f * fwd[1] + l * right[1]
        inside = (rows >= 0) & (rows < self.size) & (cols >= 0) & (cols < self.size)
        codes = np.full((VIEW, VIEW), -1, dtype=np.int64)
        codes[inside] = st.grid[rows[inside], cols[inside]]

        visible = np.zeros((VIEW, VIEW), dtype=bool)
        agent_cell = (VIEW - 1, VIEW // 2)
        visible[agent_cell] = True
        frontier = deque([agent_cell])
        while frontier:
            pr, pc = frontier.popleft()
            code = codes[pr, pc]
            if code in (WALL, DOOR_CLOSED) or code == -1:
                continue  # visible surface, but sight stops here
            for nr, nc in ((pr - 1, pc), (pr + 1, pc), (pr, pc - 1), (pr, pc + 1)):
                if 0 <= nr < VIEW and 0 <= nc < VIEW and not visible[nr, nc]:
                    visible[nr, nc] = True
                    frontier.append((nr, nc))

        channel = np.where(visible & (codes >= 0), codes, UNKNOWN_CHANNEL)
        obs = np.zeros((VIEW * VIEW, N_CHANNELS))
        obs[np.arange(VIEW * VIEW), channel.reshape(-1)] = 1.0
        return obs.reshape(-1)

    # -- oracle -----------------------------------------------------------

    def expert_action(self, state: FourRoomsState | None = None) -> int:
        """First action of a shortest plan, ties broken by fixed action order."""
        st = state or self.state
        if st is None:
            raise InvalidStateError("no active episode")
        goal = tuple(int(v) for v in np.argwhere(st.grid == GOAL)[0])
        dist = _distance_table(_canonical_key(st.grid), self.size, goal)
        doors = tuple(st.door_positions())
        cur = (st.agent_pos, st.agent_dir, st.door_mask())
        if cur not in dist:
            raise NoPlanError(f"goal unreachable from {cur[:2]}")
        for a in (TURN_LEFT, TURN_RIGHT, FORWARD, OPEN_DOOR):
            nxt = _transition(st.grid, doors, st.agent_pos, st.agent_dir,
                              st.door_mask(), a)
            if nxt != cur and nxt in dist and dist[nxt] + 1 == dist[cur]:
                return a
        raise NoPlanError("no improving action found")  # pragma: no cover

    def plan_length(self, state: FourRoomsState | None = None) -> int:
        st = state or self.state
        goal = tuple(int(v) for v in np.argwhere(st.grid == GOAL)[0])
        dist = _distance_table(_canonical_key(st.grid), self.size, goal)
        cur = (st.agent_pos, st.agent_dir, st.door_mask())
        if cur not in dist:
            raise NoPlanError("goal unreachable")
        return dist[cur]

    def is_safety_critical(self, state=None) -> bool:
        from ..errors import UnsupportedEnvironmentError
        raise UnsupportedEnvironmentError(
            "safety-critical labeling is defined for the corridor world only")

    # -- rendering --------------------------------------------------------

    def render_doc(self) -> dict:
        st = self.state
        return {
            "env": self.kind,
            "size": self.size,
            "cells": [[int(v) for v in row] for row in st.grid],
            "agent": {"row": st.agent_pos[0], "col": st.agent_pos[1],
                      "dir": st.agent_dir},
            "step": st.step_count,
            "layout_seed": st.layout_seed,
        }
