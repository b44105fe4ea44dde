"""Comparison strategies: no curriculum, random near-goal starts, max policy change."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .agents import FixedIterations, HighestReward, StateBuffer, TrainLog, train
from .envs.grid import InvalidStart
from .uncertainty import argmax_lowest

N_SOURCE_TASKS = 15
RANDOM_RADIUS = 2
CHANGE_TOL = 0.05  # continuous greedy actions differing by more count as changed
PARKING_PROBES = 500


def mpc_overhead(n_steps, steps_prior, steps_per_task, n_tasks=N_SOURCE_TASKS):
    """Curriculum-generation steps charged to max policy change.

    The last winning task's training is reused by the learner, so one
    ``steps_per_task`` is not charged.
    """
    return n_steps * (steps_prior + n_tasks * steps_per_task) - steps_per_task


def _default_final(log):
    if log.budget is None:
        raise ValueError("without a final criterion the log needs a step budget")
    return HighestReward(math.inf, stop=False)


# -- no curriculum ------------------------------------------------------------


def run_plain(env, agent, rng, *, final_criterion=None, log=None, sb=None):
    """Train on the target start only."""
    log = TrainLog() if log is None else log
    final_criterion = final_criterion or _default_final(log)
    env.set_start(None)
    train(agent, env, final_criterion, sb if sb is not None else StateBuffer(), rng, log, "target")
    return agent, log


# -- random curriculum near the goal -------------------------------------------


def near_terminal_starts(env, radius=RANDOM_RADIUS):
    """Valid grid start states within Chebyshev ``radius`` of a positive terminal.

    Each start keeps the item status of the terminal it neighbours. Item
    cells and the terminal cells themselves are excluded.
    """
    items = set(env.spec.keys) | set(env.spec.locks) | set(env.spec.flags)
    out, seen = [], set()
    for t in env.positive_terminals():
        tx, ty = t.cell
        for y in range(ty - radius, ty + radius + 1):
            for x in range(tx - radius, tx + radius + 1):
                c = (x, y)
                if c in items or c == t.cell:
                    continue
                s = replace(t, cell=c)
                if s in seen:
                    continue
                try:
                    env.validate_start(s)
                except InvalidStart:
                    continue
                seen.add(s)
                out.append(s)
    return out


def random_curriculum(env, length, rng, radius=RANDOM_RADIUS):
    """``length`` start states drawn uniformly near positive terminals.

    The radius widens one cell at a time until some valid start exists.
    """
    if length < 1:
        raise ValueError("curriculum length must be at least 1")
    if env.action_kind == "continuous":
        return [env.sample_near_goal(rng, radius) for _ in range(length)]
    limit = max(env.spec.width, env.spec.height)
    r = radius
    starts = near_terminal_starts(env, r)
    while not starts and r < limit:
        r += 1
        starts = near_terminal_starts(env, r)
    if not starts:
        raise ValueError("no valid start state near any positive terminal")
    return [starts[i] for i in rng.integers(len(starts), size=length)]


def run_random(
    env, agent, rng, *, length=4, eta=5_000, step_iters=2_000,
    final_criterion=None, log=None, sb=None,
):
    """Warm up on the target, train a fixed number of steps per random start, finish on the target."""
    log = TrainLog() if log is None else log
    sb = StateBuffer() if sb is None else sb
    final_criterion = final_criterion or _default_final(log)
    starts = random_curriculum(env, length, rng)
    env.set_start(None)
    train(agent, env, FixedIterations(eta), sb, rng, log, "warmup")
    for s in starts:
        if log.exhausted:
            break
        env.set_start(s)
        train(agent, env, FixedIterations(step_iters), sb, rng, log, "curriculum")
    env.set_start(None)
    if not log.exhausted:
        train(agent, env, final_criterion, sb, rng, log, "target")
    return agent, starts, log


# -- max policy change -------------------------------------------------------


@dataclass
class SourceTaskSet:
    starts: list

    def __post_init__(self):
        if len(self.starts) != N_SOURCE_TASKS:
            raise ValueError(f"expected {N_SOURCE_TASKS} source tasks")

    def __len__(self):
        return len(self.starts)


def make_source_tasks(env, n=N_SOURCE_TASKS):
    """Source tasks as start states spread evenly over the board.

    Grids: free cells that hold no item, taken in row-major order at evenly
    spaced positions. Parking: evenly spaced start headings paired with
    spots in turn.
    """
    if env.action_kind == "continuous":
        return SourceTaskSet([env.source_task(k, n) for k in range(n)])
    items = set(env.spec.keys) | set(env.spec.locks) | set(env.spec.flags)
    base = env.default_state()
    cells = [c for c in env.free_cells() if c not in items]
    if len(cells) < n:
        raise ValueError("board too small for the source-task set")
    pick = np.linspace(0, len(cells) - 1, n).round().astype(int)
    return SourceTaskSet([replace(base, cell=cells[i]) for i in pick])


def count_changed(before, after, obs, kind):
    """Probe states whose greedy action differs between two policies."""
    if len(obs) == 0:
        return 0
    a, b = before.greedy(obs), after.greedy(obs)
    if kind == "discrete":
        return int(np.sum(np.asarray(a) != np.asarray(b)))
    diff = np.max(np.abs(np.atleast_2d(a) - np.atleast_2d(b)), axis=-1)
    return int(np.sum(diff > CHANGE_TOL))


@dataclass
class MpcResult:
    curriculum: list
    overhead_steps: int
    agent: object
    changes: list = field(default_factory=list)


def max_policy_change_curriculum(
    env, tasks, agent, steps_prior, steps_per_task, n_steps, rng, *, probe_obs=None,
):
    """Sequence source tasks by how much one short round of training changes the policy.

    Each step trains ``agent`` on the target for ``steps_prior``, trains a
    clone on every source task for ``steps_per_task`` and keeps the clone
    whose greedy action changed on the most probe states (lowest task index
    on ties). Probe states are the visited states, or ``probe_obs`` when
    given. The final winner is returned as the learner.
    """
    if steps_prior <= 0 or steps_per_task <= 0 or n_steps < 1:
        raise ValueError("step counts must be positive")
    sb = StateBuffer()
    log = TrainLog()
    chosen, changes = [], []
    for _ in range(n_steps):
        env.set_start(None)
        train(agent, env, FixedIterations(steps_prior), sb, rng, log, "overhead")
        before = agent.snapshot()
        obs = probe_obs if probe_obs is not None else np.array([e.obs for e in sb.entries()])
        counts, clones = [], []
        for start in tasks.starts:
            clone = agent.clone()
            env.set_start(start)
            train(clone, env, FixedIterations(steps_per_task), None, rng, log, "overhead")
            counts.append(count_changed(before, clone, obs, agent.kind))
            clones.append(clone)
        best = argmax_lowest(counts)
        chosen.append(best)
        changes.append(counts)
        agent = clones[best]
    env.set_start(None)
    overhead = mpc_overhead(n_steps, steps_prior, steps_per_task, len(tasks))
    assert log.global_step - steps_per_task == overhead
    return MpcResult(chosen, overhead, agent, changes)


def run_max_policy_change(
    env, agent, rng, *, steps_prior=5_000, steps_per_task=500, n_steps=2,
    tasks=None, probe_obs=None, final_criterion=None, log=None,
):
    """Generate the sequence, then continue the winner on the target.

    The learner's step clock starts at the overhead so its curve is offset
    by the generation cost.
    """
    log = TrainLog() if log is None else log
    final_criterion = final_criterion or _default_final(log)
    tasks = tasks or make_source_tasks(env)
    res = max_policy_change_curriculum(
        env, tasks, agent, steps_prior, steps_per_task, n_steps, rng, probe_obs=probe_obs
    )
    log.global_step = res.overhead_steps
    env.set_start(None)
    if not log.exhausted:
        train(res.agent, env, final_criterion, StateBuffer(), rng, log, "target")
    return res.agent, res, log
