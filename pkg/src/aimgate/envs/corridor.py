"""CorridorDrive: straight lane with cones and one roadblock, continuous control.

Action is (steer, throttle) in [-1, 1]^2 with first-order kinematics. The
scripted oracle follows a precomputed collision-free reference line and brakes
near obstacles; layouts are regenerated at build time until the reference line
clears everything, so the oracle succeeds on every emitted layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..buffers import AGENT, CRASH, SUCCESS, TIMEOUT, Transition
from ..errors import InvalidStateError
from ..spaces import symmetric_box

THETA_MAX = 0.2      # rad of heading change per unit steer
V_MAX = 2.0          # m per step
A_MAX = 0.5          # m/step^2 per unit throttle
COLLISION_RADIUS = 0.6
HEADING_LIMIT = math.pi / 2

REF_STEP = 1.0       # reference line resolution in meters
REF_SLOPE = 0.6      # max |dy/dx| of the reference line
REF_CLEARANCE = 1.5  # lateral distance the line keeps from cone centers
REF_MARGIN = 1.05    # minimum acceptable line-to-obstacle distance

SLOW_RANGE = 3.5     # start braking this far from an obstacle
MIN_SPEED_FRAC = 0.6


@dataclass(frozen=True)
class Cone:
    x: float
    y: float


@dataclass(frozen=True)
class Roadblock:
    x: float
    y: float       # center of the blocked span
    width: float

    @property
    def lo(self) -> float:
        return self.y - self.width / 2.0

    @property
    def hi(self) -> float:
        return self.y + self.width / 2.0


@dataclass
class CorridorState:
    x: float
    y: float
    heading: float
    speed: float
    obstacles: list
    lane_halfwidth: float
    goal_x: float
    step_count: int
    layout_seed: int


def _point_segment_dist(px, py, ax, ay, bx, by) -> float:
    vx, vy = bx - ax, by - ay
    denom = vx * vx + vy * vy
    t = 0.0 if denom == 0 else max(0.0, min(1.0, ((px - ax) * vx + (py - ay) * vy) / denom))
    dx, dy = px - (ax + t * vx), py - (ay + t * vy)
    return math.hypot(dx, dy)


def _obstacle_distance(ob, px: float, py: float) -> float:
    if isinstance(ob, Cone):
        return math.hypot(px - ob.x, py - ob.y)
    return _point_segment_dist(px, py, ob.x, ob.lo, ob.x, ob.hi)


def _segment_obstacle_dist(ob, ax, ay, bx, by, n_probe: int = 5) -> float:
    # sample the swept path; cheap and sufficient at <= 2 m per step
    best = math.inf
    for i in range(n_probe + 1):
        t = i / n_probe
        best = min(best, _obstacle_distance(ob, ax + t * (bx - ax), ay + t * (by - ay)))
    return best


def _try_layout(seed: int, lane_halfwidth: float, goal_x: float):
    """Cone slalom in the first half, roadblock in the second; the stretches
    before, between and after stay clear so queries far from obstacles are
    distinguishable."""
    rng = np.random.default_rng(seed)
    n_cones = int(rng.integers(4, 7))

    obstacles = []
    x = float(rng.uniform(0.22, 0.28)) * goal_x
    sign = 1.0 if rng.uniform() < 0.5 else -1.0
    for _ in range(n_cones):
        oy = sign * float(rng.uniform(0.4, lane_halfwidth - 2.0))
        obstacles.append(Cone(x=x, y=oy))
        x += float(rng.uniform(3.5, 4.5))
        sign = -sign

    width = 2 * lane_halfwidth * float(rng.uniform(0.45, 0.6))
    side = 1.0 if rng.uniform() < 0.5 else -1.0
    yc = side * (lane_halfwidth - width / 2.0)
    bx = float(rng.uniform(0.68, 0.76)) * goal_x
    obstacles.append(Roadblock(x=bx, y=float(yc), width=float(width)))

    spawn_y = float(rng.uniform(-0.2 * lane_halfwidth, 0.2 * lane_halfwidth))
    return obstacles, spawn_y


def _build_reference(obstacles, lane_halfwidth: float, goal_x: float) -> np.ndarray:
    """Slope-limited polyline y(x) that the oracle steers toward."""
    n = int(goal_x / REF_STEP) + 2
    xs = np.arange(n) * REF_STEP
    drive_lim = lane_halfwidth - 0.7

    targets = np.zeros(n)
    owner_dx = np.full(n, np.inf)
    for ob in obstacles:
        if isinstance(ob, Cone):
            lo, hi = ob.x - 5.0, ob.x + 3.0
            cand = ob.y - REF_CLEARANCE if ob.y >= 0 else ob.y + REF_CLEARANCE
            if abs(cand) > drive_lim:
                cand = ob.y + REF_CLEARANCE if ob.y >= 0 else ob.y - REF_CLEARANCE
            cand = float(np.clip(cand, -drive_lim, drive_lim))
        else:
            lo, hi = ob.x - 6.0, ob.x + 3.0
            # aim for the middle of the gap between the block and the far wall
            if ob.lo <= -lane_halfwidth + 1e-6:
                gap_lo, gap_hi = ob.hi, lane_halfwidth
            else:
                gap_lo, gap_hi = -lane_halfwidth, ob.lo
            cand = float((gap_lo + gap_hi) / 2.0)
        for i in np.nonzero((xs >= lo) & (xs <= hi))[0]:
            dx = abs(xs[i] - ob.x)
            if dx < owner_dx[i]:
                owner_dx[i] = dx
                targets[i] = cand

    # forward/backward slope limit for a drivable line
    ys = targets.copy()
    max_dy = REF_SLOPE * REF_STEP
    for i in range(1, n):
        ys[i] = float(np.clip(ys[i], ys[i - 1] - max_dy, ys[i - 1] + max_dy))
    for i in range(n - 2, -1, -1):
        ys[i] = float(np.clip(ys[i], ys[i + 1] - max_dy, ys[i + 1] + max_dy))
    return ys


def _reference_clears(ys: np.ndarray, obstacles, lane_halfwidth: float) -> bool:
    for i in range(len(ys) - 1):
        ax, ay, bx, by = i * REF_STEP, ys[i], (i + 1) * REF_STEP, ys[i + 1]
        if abs(ay) > lane_halfwidth - 0.55 or abs(by) > lane_halfwidth - 0.55:
            return False
        for ob in obstacles:
            if abs(ob.x - ax) > 3.0 and abs(ob.x - bx) > 3.0:
                continue
            if _segment_obstacle_dist(ob, ax, ay, bx, by) < REF_MARGIN:
                return False
    return True


@lru_cache(maxsize=512)
def build_layout(seed: int, lane_halfwidth: float, goal_x: float):
    """Deterministic solvable layout: retries derived seeds until the
    reference line passes the clearance audit."""
    attempt = seed
    for _ in range(64):
        obstacles, spawn_y = _try_layout(attempt, lane_halfwidth, goal_x)
        ys = _build_reference(tuple(obstacles), lane_halfwidth, goal_x)
        if _reference_clears(ys, obstacles, lane_halfwidth):
            return tuple(obstacles), spawn_y, ys
        attempt = attempt + 1000003
    raise RuntimeError(f"no solvable corridor layout from seed {seed}")


@lru_cache(maxsize=512)
def _reference_for(obstacles: tuple, lane_halfwidth: float, goal_x: float) -> np.ndarray:
    return _build_reference(obstacles, lane_halfwidth, goal_x)


class CorridorEnv:
    """Continuous corridor with lidar-like rays and a path-following oracle."""

    kind = "corridor"

    def __init__(self, goal_x: float = 80.0, lane_halfwidth: float = 4.0,
                 max_steps: int = 200, n_rays: int = 24, ray_max: float = 10.0):
        self.goal_x = goal_x
        self.lane_halfwidth = lane_halfwidth
        self.max_steps = max_steps
        self.n_rays = n_rays
        self.ray_max = ray_max
        self.space = symmetric_box(2)
        self.obs_dim = 4 + n_rays
        self.state: CorridorState | None = None
        self._done = True
        self._last_obs: np.ndarray | None = None

    # -- episode control -------------------------------------------------

    def reset(self, layout_seed: int) -> np.ndarray:
        obstacles, spawn_y, _ = build_layout(layout_seed, self.lane_halfwidth,
                                             self.goal_x)
        self.state = CorridorState(x=0.0, y=spawn_y, heading=0.0, speed=V_MAX,
                                   obstacles=list(obstacles),
                                   lane_halfwidth=self.lane_halfwidth,
                                   goal_x=self.goal_x, step_count=0,
                                   layout_seed=layout_seed)
        self._done = False
        self._last_obs = self.observe()
        return self._last_obs

    @property
    def done(self) -> bool:
        return self._done

    def step(self, action: np.ndarray, actor: str = AGENT) -> tuple[Transition, float]:
        if self._done or self.state is None:
            raise InvalidStateError("step() after episode end")
        st = self.state
        a = self.space.clamp(np.asarray(action, dtype=np.float64))
        s_before = self._last_obs

        x0, y0 = st.x, st.y
        st.heading = float(np.clip(st.heading + a[0] * THETA_MAX,
                                   -HEADING_LIMIT, HEADING_LIMIT))
        st.speed = float(np.clip(st.speed + a[1] * A_MAX, 0.0, V_MAX))
        st.x = x0 + st.speed * math.cos(st.heading)
        st.y = y0 + st.speed * math.sin(st.heading)
        st.step_count += 1

        # truncate the swept segment at the goal line before collision checks
        bx, by = st.x, st.y
        crossed_goal = st.x >= st.goal_x
        if crossed_goal and st.x > x0:
            t = (st.goal_x - x0) / (st.x - x0)
            bx, by = st.goal_x, y0 + t * (st.y - y0)

        crashed = abs(by) > st.lane_halfwidth or any(
            _segment_obstacle_dist(ob, x0, y0, bx, by) < COLLISION_RADIUS
            for ob in st.obstacles)

        outcome = None
        if crashed:
            outcome = CRASH
        elif crossed_goal:
            outcome = SUCCESS
        elif st.step_count >= self.max_steps:
            outcome = TIMEOUT
        self._done = outcome is not None

        reward = st.x - x0
        if outcome == SUCCESS:
            reward += 10.0
        elif outcome == CRASH:
            reward -= 5.0

        self._last_obs = self.observe()
        t = Transition(s=s_before, a=np.asarray(a), s_next=self._last_obs,
                       actor=actor, done=self._done, outcome=outcome,
                       step_index=st.step_count - 1)
        return t, reward

    # -- observation ------------------------------------------------------

    def observe(self, state: CorridorState | None = None) -> np.ndarray:
        st = state or self.state
        hw = st.lane_halfwidth
        ego = np.array([
            np.clip((st.y + hw) / (2 * hw), 0.0, 1.0),
            (st.heading + HEADING_LIMIT) / (2 * HEADING_LIMIT),
            st.speed / V_MAX,
            np.clip((st.goal_x - st.x) / st.goal_x, 0.0, 1.0),
        ])
        return np.concatenate([ego, self._rays(st)])

    def _rays(self, st: CorridorState) -> np.ndarray:
        angles = st.heading + (2.0 * math.pi * np.arange(self.n_rays) / self.n_rays
                               - math.pi)
        dists = np.full(self.n_rays, self.ray_max)
        cx, cy = st.x, st.y
        dxs, dys = np.cos(angles), np.sin(angles)

        # lane walls y = +-hw
        for wall_y in (st.lane_halfwidth, -st.lane_halfwidth):
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (wall_y - cy) / dys
            hit = (t > 0) & np.isfinite(t)
            dists[hit] = np.minimum(dists[hit], t[hit])

        for ob in st.obstacles:
            if isinstance(ob, Cone):
                # ray-circle: |c + t d - o|^2 = r^2
                ox, oy = ob.x - cx, ob.y - cy
                b = dxs * ox + dys * oy
                disc = b * b - (ox * ox + oy * oy - COLLISION_RADIUS ** 2)
                ok = disc >= 0
                with np.errstate(invalid="ignore"):
                    t = b - np.sqrt(np.where(ok, disc, 0.0))
                hit = ok & (t > 0)
                dists[hit] = np.minimum(dists[hit], t[hit])
            else:
                # ray-vertical segment at x = ob.x, y in [lo, hi]
                with np.errstate(divide="ignore", invalid="ignore"):
                    t = (ob.x - cx) / dxs
                ys = cy + t * dys
                hit = (t > 0) & np.isfinite(t) & (ys >= ob.lo) & (ys <= ob.hi)
                dists[hit] = np.minimum(dists[hit], t[hit])

        return np.clip(dists, 0.0, self.ray_max) / self.ray_max

    # -- oracle -----------------------------------------------------------

    def expert_action(self, state: CorridorState | None = None) -> np.ndarray:
        """Steer toward the reference line; brake in proportion to obstacle
        proximity, full throttle on clear road."""
        st = state or self.state
        if st is None:
            raise InvalidStateError("no active episode")
        ys = _reference_for(tuple(st.obstacles), st.lane_halfwidth, st.goal_x)

        look = max(3.0, st.speed * 2.5)
        xt = st.x + look
        i = min(int(xt / REF_STEP), len(ys) - 2)
        frac = (xt - i * REF_STEP) / REF_STEP
        y_target = float(ys[i] * (1 - frac) + ys[i + 1] * frac)

        desired = math.atan2(y_target - st.y, look)
        steer = float(np.clip((desired - st.heading) / (1.5 * THETA_MAX), -1.0, 1.0))

        ahead = [ob for ob in st.obstacles if -1.0 <= ob.x - st.x <= SLOW_RANGE + 4.0]
        if ahead:
            d = min(_obstacle_distance(ob, st.x, st.y) for ob in ahead)
            frac_v = np.clip((d - COLLISION_RADIUS) / SLOW_RANGE, MIN_SPEED_FRAC, 1.0)
        else:
            frac_v = 1.0
        v_target = V_MAX * float(frac_v)
        throttle = float(np.clip((v_target - st.speed) / A_MAX, -1.0, 1.0))
        return np.array([steer, throttle])

    def is_safety_critical(self, state: CorridorState | None = None) -> bool:
        a = self.expert_action(state)
        return float(np.linalg.norm(a)) > 0.5

    # -- rendering --------------------------------------------------------

    def render_doc(self) -> dict:
        st = self.state
        obstacles = []
        for ob in st.obstacles:
            if isinstance(ob, Cone):
                obstacles.append({"type": "cone", "x": ob.x, "y": ob.y,
                                  "radius": COLLISION_RADIUS})
            else:
                obstacles.append({"type": "roadblock", "x": ob.x, "y": ob.y,
                                  "width": ob.width})
        return {
            "env": self.kind,
            "goal_x": st.goal_x,
            "lane_halfwidth": st.lane_halfwidth,
            "obstacles": obstacles,
            "agent": {"x": st.x, "y": st.y, "heading": st.heading,
                      "speed": st.speed},
            "step": st.step_count,
            "layout_seed": st.layout_seed,
        }
