"""Fast invariant checks on the shipped fixtures, used by ``readc validate``."""

from __future__ import annotations

from collections import deque
from dataclasses import replace
from itertools import combinations

import numpy as np

from .baselines import mpc_overhead
from .clustering import ward_cluster, ward_cost
from .envs.grid import MOVES, PIT_REWARD, STEP_REWARD, load_board, make_grid_env
from .nn import Mlp
from .uncertainty import discrete_kl, entropy, q_to_probs

BOARDS = ("keylock_10x10", "source_keylock_10x10", "holdout_keylock_10x10", "flags_10x10")


def shortest_actions(env, start_cell, goal_cell, avoid=()):
    """Breadth-first action sequence between two cells, avoiding pits and ``avoid``."""
    blocked = set(env.spec.pits) | set(avoid)
    prev = {start_cell: None}
    q = deque([start_cell])
    while q:
        c = q.popleft()
        if c == goal_cell:
            break
        for a, (dx, dy) in enumerate(MOVES):
            n = (c[0] + dx, c[1] + dy)
            if n in prev or env.spec.blocked(n) or (n in blocked and n != goal_cell):
                continue
            prev[n] = (c, a)
            q.append(n)
    if goal_cell not in prev:
        raise ValueError(f"{goal_cell} unreachable from {start_cell}")
    actions = []
    c = goal_cell
    while prev[c] is not None:
        c, a = prev[c]
        actions.append(a)
    return actions[::-1]


def rollout(env, actions, start=None):
    env.reset(start)
    out = []
    for a in actions:
        r = env.step(a)
        out.append(r)
        if r.terminal or r.truncated:
            break
    return out


def brute_force_ward(points, cutoff=None, n_clusters=None):
    """Merge sequence from recomputing every pairwise Ward cost at each step."""
    X = np.asarray(points, dtype=np.float64)
    clusters = [[i] for i in range(len(X))]
    merges = []
    while len(clusters) > 1:
        if n_clusters is not None and len(clusters) <= n_clusters:
            break
        best = None
        for a, b in combinations(range(len(clusters)), 2):
            ca, cb = clusters[a], clusters[b]
            c = ward_cost(len(ca), len(cb), X[ca].mean(axis=0), X[cb].mean(axis=0))
            if best is None or c < best[0]:
                best = (c, a, b)
        c, a, b = best
        if n_clusters is None and c > cutoff:
            break
        merges.append((min(clusters[a]), min(clusters[b]), c))
        clusters[a] = sorted(clusters[a] + clusters[b])
        del clusters[b]
    return merges, sorted(clusters)


def finite_difference_grad(net, x, upstream, h=1e-6):
    g = np.empty_like(net.params)
    for i in range(net.params.size):
        old = net.params[i]
        net.params[i] = old + h
        up = float(np.sum(upstream * net.forward(x)))
        net.params[i] = old - h
        down = float(np.sum(upstream * net.forward(x)))
        net.params[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def _check_keylock_rewards():
    env = make_grid_env(load_board("keylock_10x10"))
    (key,), (lock,) = env.spec.keys, env.spec.locks
    to_key = shortest_actions(env, env.spec.default_start, key, avoid=[lock])
    to_lock = shortest_actions(env, key, lock)
    res = rollout(env, to_key + to_lock)
    rewards = [r.reward for r in res]
    expected = [STEP_REWARD] * (len(to_key) - 1) + [500.0] + [STEP_REWARD] * (len(to_lock) - 1) + [1000.0]
    return rewards == expected and res[-1].terminal


def _check_pit_and_cap():
    env = make_grid_env(load_board("keylock_10x10"))
    pit = env.spec.pits[0]
    path = shortest_actions(env, env.spec.default_start, pit,
                            avoid=list(env.spec.keys) + list(env.spec.locks))
    res = rollout(env, path)
    ok = res[-1].reward == PIT_REWARD and res[-1].terminal
    corner = (env.spec.width - 1, 0)
    env.reset(replace(env.default_state(), cell=corner))
    rewards = []
    for _ in range(100):
        r = env.step(0)  # north into the wall
        rewards.append(r.reward)
    return ok and rewards == [STEP_REWARD] * 100 and r.truncated and env.state.cell == corner


def _check_flag_rewards():
    env = make_grid_env(load_board("flags_10x10"))
    cell = env.spec.default_start
    actions = []
    flags = [env.spec.flags[i] for i in env.spec.flag_order]
    for k, f in enumerate(flags):
        others = [g for g in env.spec.flags if g != f]
        actions += shortest_actions(env, cell, f, avoid=others)
        cell = f
    rewards = [r.reward for r in rollout(env, actions)]
    return [r for r in rewards if r > 0] == [10.0, 20.0, 30.0]


def _check_ward():
    rng = np.random.default_rng(0)
    for _ in range(20):
        X = rng.normal(size=(int(rng.integers(2, 9)), 2)) * 2
        part = ward_cluster(X, cutoff=3.0)
        merges, clusters = brute_force_ward(X, cutoff=3.0)
        if [(m.keep, m.absorbed) for m in part.merges] != [(a, b) for a, b, _ in merges]:
            return False
        if [c.tolist() for c in part.clusters] != clusters:
            return False
    return True


def _check_gradients():
    rng = np.random.default_rng(0)
    net = Mlp([3, 5, 4, 2], rng)
    x = rng.normal(size=(4, 3))
    up = rng.normal(size=(4, 2))
    g = net.backward(x, up)
    fd = finite_difference_grad(net, x, up)
    return np.allclose(g, fd, rtol=1e-4, atol=1e-7)


def _check_divergences():
    p = q_to_probs(np.array([1.0, 2.0, 3.0]))
    return (
        abs(p.sum() - 1.0) < 1e-12
        and discrete_kl(p, p) == 0.0
        and abs(entropy(np.full(4, 0.25)) - np.log(4)) < 1e-12
    )


def _check_boards():
    for name in BOARDS:
        env = make_grid_env(load_board(name))
        if not env.positive_terminals():
            return False
    return True


CHECKS = (
    ("boards load with positive terminals", _check_boards),
    ("key-lock rewards 500 / 1000 / -10", _check_keylock_rewards),
    ("pit -400 and 100-step cap", _check_pit_and_cap),
    ("flag rewards 10 / 20 / 30", _check_flag_rewards),
    ("Ward merges match brute force", _check_ward),
    ("MLP gradients match finite differences", _check_gradients),
    ("divergence identities", _check_divergences),
    ("overhead identity at 245,000", lambda: mpc_overhead(2, 50_000, 5_000, 15) == 245_000),
)


def run_checks():
    """List of ``(name, passed)`` for every fixture check."""
    out = []
    for name, fn in CHECKS:
        try:
            ok = bool(fn())
        except Exception:  # a crashing check is a failed check
            ok = False
        out.append((name, ok))
    return out
