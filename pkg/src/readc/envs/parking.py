"""Goal-conditioned parking with simplified unicycle kinematics.

The car starts at a fixed point with a random heading and must stop inside
one spot drawn at reset. Actions are (throttle, steer) in [-1, 1]; each
step costs the remaining distance to the goal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .grid import EnvUsageError, InvalidStart

DT = 0.1
SPEED_SCALE = 5.0
TURN_SCALE = 2.0  # rad/s at full steer
STEP_CAP = 100
POS_TOL = 0.5
HEADING_TOL = 0.26
DISTANCE_COST = 1.0
ARENA = 20.0
KEY_RESOLUTION = 0.25


def _wrap(angle):
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


def spot_layout(n_spots, spacing=2.0, row_offset=8.0):
    """Two facing rows of spots, ``n_spots // 2`` per side, nose towards the aisle."""
    if n_spots < 2 or n_spots % 2:
        raise ValueError("n_spots must be an even number >= 2")
    per_row = n_spots // 2
    xs = (np.arange(per_row) - (per_row - 1) / 2.0) * spacing
    spots = [(float(x), row_offset, math.pi / 2) for x in xs]
    spots += [(float(x), -row_offset, -math.pi / 2) for x in xs]
    return tuple(spots)


@dataclass(frozen=True)
class ParkingSpec:
    n_spots: int = 30
    spot_poses: tuple = field(default=None)
    agent_start: tuple = (0.0, 0.0)
    step_cap: int = STEP_CAP
    pos_tol: float = POS_TOL
    heading_tol: float = HEADING_TOL

    def __post_init__(self):
        if self.spot_poses is None:
            object.__setattr__(self, "spot_poses", spot_layout(self.n_spots))
        if len(self.spot_poses) != self.n_spots:
            raise ValueError("spot_poses must list one pose per spot")
        if self.step_cap != STEP_CAP:
            raise ValueError(f"step cap is fixed at {STEP_CAP}")


@dataclass(frozen=True)
class ParkingState:
    x: float
    y: float
    heading: float
    v: float = 0.0
    omega: float = 0.0
    goal: int | None = None


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    terminal: bool
    truncated: bool


class ParkingEnv:
    """Continuous two-action parking task; randomness comes from ``rng`` at reset."""

    obs_dim = 9
    action_dim = 2
    action_kind = "continuous"

    def __init__(self, spec=None, rng=None):
        self.spec = spec or ParkingSpec()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.start_state = None
        self.state = None
        self.t = 0
        self.done = True

    # -- episode protocol ----------------------------------------------------
    def reset(self, start=None):
        """Start from ``start`` (or the configured start) with a fresh goal.

        Without an explicit pose the car sits at the fixed start point with
        a uniformly random heading. A start carrying a goal keeps it.
        """
        s = start if start is not None else self.start_state
        if s is None:
            x, y = self.spec.agent_start
            s = ParkingState(x, y, float(self.rng.uniform(-math.pi, math.pi)))
        self.validate_start(s)
        if s.goal is None:
            s = replace(s, goal=int(self.rng.integers(self.spec.n_spots)))
        self.state = s
        self.t = 0
        self.done = False
        return self.encode_state(s)

    def set_start(self, start=None):
        if start is not None:
            self.validate_start(start)
        self.start_state = start

    def default_state(self):
        x, y = self.spec.agent_start
        return ParkingState(x, y, 0.0)

    def as_start(self, s):
        """Keep the pose of a visited state but let the goal vary per episode."""
        return replace(s, v=0.0, omega=0.0, goal=None)

    def validate_start(self, s):
        vals = (s.x, s.y, s.heading, s.v, s.omega)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidStart("start pose must be finite")
        if abs(s.x) > ARENA or abs(s.y) > ARENA:
            raise InvalidStart("start pose lies outside the arena")
        if s.goal is not None:
            if not 0 <= s.goal < self.spec.n_spots:
                raise InvalidStart("goal index out of range")
            if self.at_goal(s):
                raise InvalidStart("start pose is already parked in its goal")

    def step(self, action):
        if self.done or self.state is None:
            raise EnvUsageError("step() on a finished episode; call reset()")
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(-1), -1.0, 1.0)
        if a.shape != (2,) or not np.all(np.isfinite(a)):
            raise ValueError("parking action must be a finite 2-vector")
        s = self.state
        v = SPEED_SCALE * a[0]
        omega = TURN_SCALE * a[1]
        heading = _wrap(s.heading + omega * DT)
        x = float(np.clip(s.x + v * DT * math.cos(heading), -ARENA, ARENA))
        y = float(np.clip(s.y + v * DT * math.sin(heading), -ARENA, ARENA))
        self.state = ParkingState(x, y, heading, float(v), float(omega), s.goal)
        self.t += 1
        reward = -DISTANCE_COST * self.goal_distance(self.state)
        terminal = self.at_goal(self.state)
        truncated = not terminal and self.t >= self.spec.step_cap
        self.done = terminal or truncated
        return StepResult(self.encode_state(self.state), reward, terminal, truncated)

    # -- geometry ------------------------------------------------------------
    def goal_pose(self, s):
        return self.spec.spot_poses[s.goal]

    def goal_distance(self, s):
        gx, gy, _ = self.goal_pose(s)
        return math.hypot(s.x - gx, s.y - gy)

    def at_goal(self, s):
        _, _, gh = self.goal_pose(s)
        return (
            self.goal_distance(s) <= self.spec.pos_tol
            and abs(_wrap(s.heading - gh)) <= self.spec.heading_tol
        )

    def encode_state(self, s):
        gx, gy, gh = self.goal_pose(s)
        return np.array([
            s.x, s.y, s.v * math.cos(s.heading), s.v * math.sin(s.heading),
            s.heading, s.omega, gx, gy, gh,
        ])

    def position(self, s):
        return np.array([s.x, s.y])

    def obs_key(self, obs):
        return np.round(np.asarray(obs, dtype=np.float64) / KEY_RESOLUTION).astype(np.int64).tobytes()

    def state_key(self, s):
        return self.obs_key(self.encode_state(s))

    def positive_terminals(self):
        """Every spot pose, parked, with that spot as the goal."""
        return [
            ParkingState(x, y, h, goal=i) for i, (x, y, h) in enumerate(self.spec.spot_poses)
        ]

    # -- helpers for the baselines ---------------------------------------------
    def sample_near_goal(self, rng, radius=2.0):
        """Random pose within Chebyshev ``radius`` of a random spot; goal left open."""
        gx, gy, _ = self.spec.spot_poses[int(rng.integers(self.spec.n_spots))]
        return ParkingState(
            float(gx + rng.uniform(-radius, radius)),
            float(gy + rng.uniform(-radius, radius)),
            float(rng.uniform(-math.pi, math.pi)),
        )

    def source_task(self, k, n):
        x, y = self.spec.agent_start
        heading = _wrap(2.0 * math.pi * k / n)
        return ParkingState(x, y, heading, goal=k % self.spec.n_spots)

    def sample_observations(self, n, rng):
        """Observations of random poses and goals, for policy-change probes."""
        out = []
        for _ in range(n):
            s = ParkingState(
                float(rng.uniform(-10, 10)), float(rng.uniform(-10, 10)),
                float(rng.uniform(-math.pi, math.pi)), goal=int(rng.integers(self.spec.n_spots)),
            )
            out.append(self.encode_state(s))
        return np.array(out)
