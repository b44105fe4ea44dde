"""Deterministic grid domains: Key-Lock and Flags.

Boards are plain text, one token per cell::

    .   empty            #   obstacle
    K   key              L   lock
    P   pit              S   agent start
    F0 .. F9  flag with that index

A flag token is two characters; every other token is one. Lines starting
with ``;`` carry metadata, e.g. ``; flag_order = 2 0 1`` gives the (hidden)
capture order of the flag indices. Coordinates are ``(x, y)`` with ``x`` the
column and ``y`` the row, row 0 at the top.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

STEP_CAP = 100
STEP_REWARD = -10.0
KEY_REWARD = 500.0
LOCK_REWARD = 1000.0
PIT_REWARD = -400.0
FLAG_REWARD = 10.0

# action index -> (dx, dy): N, E, S, W
MOVES = ((0, -1), (1, 0), (0, 1), (-1, 0))
N_ACTIONS = 4

_TOKEN = re.compile(r"F\d|[.#KLPS]")


class InvalidStart(ValueError):
    """Requested start state is not a valid non-terminal state."""


class EnvUsageError(RuntimeError):
    """Environment called out of protocol (e.g. stepping a finished episode)."""


@dataclass(frozen=True)
class GridSpec:
    width: int
    height: int
    keys: tuple = ()
    locks: tuple = ()
    flags: tuple = ()
    pits: tuple = ()
    obstacles: tuple = ()
    flag_order: tuple = ()
    default_start: tuple = (0, 0)
    step_cap: int = STEP_CAP
    name: str = ""

    def __post_init__(self):
        cells = [*self.keys, *self.locks, *self.flags, *self.pits, *self.obstacles]
        if len(set(cells)) != len(cells):
            raise ValueError("two board items share a cell")
        for x, y in [*cells, self.default_start]:
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise ValueError(f"cell {(x, y)} lies outside the board")
        if self.default_start in self.pits or self.default_start in self.obstacles:
            raise ValueError("default start is a pit or obstacle")
        if sorted(self.flag_order) != list(range(len(self.flags))):
            raise ValueError("flag_order must be a permutation of flag indices")
        if self.step_cap != STEP_CAP:
            raise ValueError(f"step cap is fixed at {STEP_CAP}")
        object.__setattr__(self, "_obstacle_set", frozenset(self.obstacles))

    def in_bounds(self, cell):
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def blocked(self, cell):
        return not self.in_bounds(cell) or cell in self._obstacle_set


def parse_board(text, name=""):
    """Parse the plain-text board format into a :class:`GridSpec`."""
    meta = {}
    rows = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith(";"):
            key, _, value = line[1:].partition("=")
            meta[key.strip()] = value.strip()
            continue
        tokens = _TOKEN.findall(line)
        if "".join(tokens) != line.replace(" ", ""):
            raise ValueError(f"unrecognised characters in board row {line!r}")
        rows.append(tokens)
    if not rows or len({len(r) for r in rows}) != 1:
        raise ValueError("board rows must be non-empty and of equal width")
    items = {"K": [], "L": [], "P": [], "#": [], "S": []}
    flags = {}
    for y, row in enumerate(rows):
        for x, tok in enumerate(row):
            if tok.startswith("F"):
                idx = int(tok[1])
                if idx in flags:
                    raise ValueError(f"flag F{idx} appears twice")
                flags[idx] = (x, y)
            elif tok != ".":
                items[tok].append((x, y))
    if sorted(flags) != list(range(len(flags))):
        raise ValueError("flag indices must be 0..n-1")
    if len(items["S"]) != 1:
        raise ValueError("board needs exactly one start cell 'S'")
    order = tuple(range(len(flags)))
    if "flag_order" in meta:
        order = tuple(int(v) for v in meta["flag_order"].replace(",", " ").split())
    return GridSpec(
        width=len(rows[0]),
        height=len(rows),
        keys=tuple(items["K"]),
        locks=tuple(items["L"]),
        flags=tuple(flags[i] for i in range(len(flags))),
        pits=tuple(items["P"]),
        obstacles=tuple(items["#"]),
        flag_order=order,
        default_start=items["S"][0],
        name=meta.get("name", name),
    )


def load_board(path):
    """Board from a file path, or by name from the shipped fixtures."""
    path = Path(path)
    if not path.exists():
        for candidate in (board_path(path.stem), Path(__file__).parent / "boards" / path.name):
            if candidate.exists():
                path = candidate
                break
    return parse_board(path.read_text(), name=path.stem)


def board_path(name):
    """Path of a board fixture shipped with the package."""
    return Path(__file__).parent / "boards" / f"{name}.txt"


def _displacement(agent, target):
    """Signed axis displacement split into (+x, -x, +y, -y) slots."""
    dx = target[0] - agent[0]
    dy = target[1] - agent[1]
    return (max(dx, 0), max(-dx, 0), max(dy, 0), max(-dy, 0))


def _nearest(agent, cells):
    best, best_d = None, math.inf
    for c in cells:
        d = math.hypot(c[0] - agent[0], c[1] - agent[1])
        if d < best_d:
            best, best_d = c, d
    return best


@dataclass(frozen=True)
class KeyLockState:
    cell: tuple
    keys: tuple  # collected flag per key
    locks: tuple  # unlocked flag per lock


@dataclass(frozen=True)
class FlagsState:
    cell: tuple
    captured: int


class GridEnv:
    """Shared episode bookkeeping for the grid domains."""

    n_actions = N_ACTIONS
    action_kind = "discrete"

    def __init__(self, spec):
        self.spec = spec
        self._pits = frozenset(spec.pits)
        self.state = None
        self.start_state = self.default_state()
        self.t = 0
        self.done = True

    # -- episode protocol -------------------------------------------------
    def reset(self, start=None):
        s = self.start_state if start is None else start
        self.validate_start(s)
        self.state = s
        self.t = 0
        self.done = False
        return self.encode_state(s)

    def set_start(self, start=None):
        """Change the episode start state; ``None`` restores the board default."""
        s = self.default_state() if start is None else start
        self.validate_start(s)
        self.start_state = s

    def step(self, action):
        if self.done or self.state is None:
            raise EnvUsageError("step() on a finished episode; call reset()")
        action = int(action)
        if not 0 <= action < N_ACTIONS:
            raise ValueError(f"grid action must be in 0..3, got {action}")
        dx, dy = MOVES[action]
        cell = self.state.cell
        nxt = (cell[0] + dx, cell[1] + dy)
        self.t += 1
        if self.spec.blocked(nxt):
            reward, terminal = STEP_REWARD, False
        elif nxt in self._pits:
            self.state = replace(self.state, cell=nxt)
            reward, terminal = PIT_REWARD, True
        else:
            self.state, reward, terminal = self._enter(nxt)
        truncated = not terminal and self.t >= self.spec.step_cap
        self.done = terminal or truncated
        return StepResult(self.encode_state(self.state), reward, terminal, truncated)

    def as_start(self, s):
        """Curriculum start derived from a visited state (the state itself on grids)."""
        return s

    def validate_start(self, s):
        if not self.spec.in_bounds(s.cell):
            raise InvalidStart(f"start cell {s.cell} is off the board")
        if s.cell in self.spec.obstacles:
            raise InvalidStart(f"start cell {s.cell} is an obstacle")
        if s.cell in self._pits:
            raise InvalidStart(f"start cell {s.cell} is a pit")
        if self.is_complete(s):
            raise InvalidStart("start state has already completed the task")
        self._validate_items(s)

    # -- geometry helpers -------------------------------------------------
    def position(self, s):
        return np.array(s.cell, dtype=np.float64)

    def free_cells(self):
        return [
            (x, y)
            for y in range(self.spec.height)
            for x in range(self.spec.width)
            if (x, y) not in self.spec.obstacles and (x, y) not in self._pits
        ]

    def obs_key(self, obs):
        return np.asarray(obs, dtype=np.float64).tobytes()

    def state_key(self, s):
        return self.obs_key(self.encode_state(s))

    def _obstacle_bits(self, cell):
        return [
            1.0 if self.spec.blocked((cell[0] + dx, cell[1] + dy)) else 0.0
            for dx, dy in MOVES
        ]

    def _adjacent_bits(self, cell, targets):
        return [
            1.0 if (cell[0] + dx, cell[1] + dy) in targets else 0.0
            for dx, dy in MOVES
        ]


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    terminal: bool
    truncated: bool


class KeyLockEnv(GridEnv):
    """Collect every key and unlock every lock while avoiding pits.

    A lock only opens while the agent holds an unused key. The observation
    has 26 entries: displacement to the nearest key (4) and lock (4),
    obstacle bits (4), key/lock adjacency bits (4), pit bits one and two
    cells out in each direction (8), and the key and lock counters (2).
    """

    obs_dim = 26

    def default_state(self):
        return KeyLockState(
            self.spec.default_start,
            (False,) * len(self.spec.keys),
            (False,) * len(self.spec.locks),
        )

    def is_complete(self, s):
        return all(s.keys) and all(s.locks)

    def _validate_items(self, s):
        if len(s.keys) != len(self.spec.keys) or len(s.locks) != len(self.spec.locks):
            raise InvalidStart("item flags do not match the board")
        if sum(s.locks) > sum(s.keys):
            raise InvalidStart("more locks opened than keys collected")
        for i, c in enumerate(self.spec.keys):
            if c == s.cell and not s.keys[i]:
                raise InvalidStart("start cell holds an uncollected key")
        for i, c in enumerate(self.spec.locks):
            if c == s.cell and not s.locks[i] and sum(s.keys) > sum(s.locks):
                raise InvalidStart("start cell holds a lock that would open")

    def _enter(self, cell):
        s = self.state
        for i, c in enumerate(self.spec.keys):
            if c == cell and not s.keys[i]:
                keys = s.keys[:i] + (True,) + s.keys[i + 1 :]
                s = KeyLockState(cell, keys, s.locks)
                return s, KEY_REWARD, self.is_complete(s)
        for i, c in enumerate(self.spec.locks):
            if c == cell and not s.locks[i] and sum(s.keys) > sum(s.locks):
                locks = s.locks[:i] + (True,) + s.locks[i + 1 :]
                s = KeyLockState(cell, s.keys, locks)
                return s, LOCK_REWARD, self.is_complete(s)
        return KeyLockState(cell, s.keys, s.locks), STEP_REWARD, False

    def encode_state(self, s):
        cell = s.cell
        keys = [c for c, got in zip(self.spec.keys, s.keys) if not got]
        locks = [c for c, got in zip(self.spec.locks, s.locks) if not got]
        k = _nearest(cell, keys)
        lk = _nearest(cell, locks)
        pit_bits = []
        for dx, dy in MOVES:
            for dist in (1, 2):
                pit_bits.append(
                    1.0 if (cell[0] + dx * dist, cell[1] + dy * dist) in self._pits else 0.0
                )
        vec = [
            *(_displacement(cell, k) if k else (0, 0, 0, 0)),
            *(_displacement(cell, lk) if lk else (0, 0, 0, 0)),
            *self._obstacle_bits(cell),
            *self._adjacent_bits(cell, set(keys) | set(locks)),
            *pit_bits,
            float(sum(s.keys)),
            float(sum(s.locks)),
        ]
        return np.array(vec, dtype=np.float64)

    def positive_terminals(self):
        """Goal cells paired with the item status carried on arrival.

        The final item is always a lock when the board has locks; the
        returned states have every other item collected.
        """
        out = []
        finals = self.spec.locks if self.spec.locks else self.spec.keys
        nk, nl = len(self.spec.keys), len(self.spec.locks)
        for i, c in enumerate(finals):
            if self.spec.locks:
                out.append(KeyLockState(c, (True,) * nk, tuple(j != i for j in range(nl))))
            else:
                out.append(KeyLockState(c, tuple(j != i for j in range(nk)), ()))
        return out

    def optimal_return(self):
        """Best achievable return from the start state (breadth-first search)."""
        return _optimal_return(self)


class FlagsEnv(GridEnv):
    """Capture flags in a hidden order; the k-th capture pays ``10 * k``.

    Stepping onto a flag that is not next in the order is an ordinary -10
    move. Observation: displacement to every flag (4 each, zeros once
    captured), obstacle bits (4), uncaptured-flag adjacency bits (4) and the
    capture counter (1).
    """

    @property
    def obs_dim(self):
        return 4 * len(self.spec.flags) + 9

    def default_state(self):
        return FlagsState(self.spec.default_start, 0)

    def is_complete(self, s):
        return s.captured >= len(self.spec.flags)

    def _validate_items(self, s):
        if not 0 <= s.captured <= len(self.spec.flags):
            raise InvalidStart("capture counter out of range")
        if s.captured < len(self.spec.flags):
            nxt = self.spec.flags[self.spec.flag_order[s.captured]]
            if nxt == s.cell:
                raise InvalidStart("start cell holds the next flag to capture")

    def _captured_set(self, s):
        return {self.spec.flag_order[i] for i in range(s.captured)}

    def _enter(self, cell):
        s = self.state
        if s.captured < len(self.spec.flags):
            nxt = self.spec.flags[self.spec.flag_order[s.captured]]
            if nxt == cell:
                s = FlagsState(cell, s.captured + 1)
                return s, FLAG_REWARD * s.captured, self.is_complete(s)
        return FlagsState(cell, s.captured), STEP_REWARD, False

    def encode_state(self, s):
        done = self._captured_set(s)
        vec = []
        for i, c in enumerate(self.spec.flags):
            vec.extend((0, 0, 0, 0) if i in done else _displacement(s.cell, c))
        remaining = {c for i, c in enumerate(self.spec.flags) if i not in done}
        vec.extend(self._obstacle_bits(s.cell))
        vec.extend(self._adjacent_bits(s.cell, remaining))
        vec.append(float(s.captured))
        return np.array(vec, dtype=np.float64)

    def positive_terminals(self):
        """Final flag cell with every earlier flag already captured."""
        n = len(self.spec.flags)
        if n == 0:
            return []
        return [FlagsState(self.spec.flags[self.spec.flag_order[-1]], n - 1)]

    def optimal_return(self):
        return _optimal_return(self)


def _optimal_return(env):
    """Undiscounted best return from ``env.start_state`` within the step cap.

    Dynamic programming over (state, steps used); exact because the grids
    are deterministic.
    """
    saved = (env.state, env.t, env.done)
    best = {env.start_state: 0.0}
    answer = -math.inf
    frontier = {env.start_state: 0.0}
    for _ in range(env.spec.step_cap):
        nxt = {}
        for s, ret in frontier.items():
            for a in range(N_ACTIONS):
                env.state, env.t, env.done = s, 0, False
                res = env.step(a)
                total = ret + res.reward
                if res.terminal:
                    if env.is_complete(env.state):
                        answer = max(answer, total)
                    continue
                if total > nxt.get(env.state, -math.inf):
                    nxt[env.state] = total
        frontier = {s: r for s, r in nxt.items() if r > best.get(s, -math.inf)}
        best.update(frontier)
        if not frontier:
            break
    env.state, env.t, env.done = saved
    return answer


def make_grid_env(spec):
    if spec.flags and (spec.keys or spec.locks):
        raise ValueError("a board is either Key-Lock or Flags, not both")
    return FlagsEnv(spec) if spec.flags else KeyLockEnv(spec)
