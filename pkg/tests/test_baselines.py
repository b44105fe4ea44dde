import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from readc.agents import DqnAgent, TrainLog
from readc.baselines import (
    N_SOURCE_TASKS,
    SourceTaskSet,
    count_changed,
    make_source_tasks,
    max_policy_change_curriculum,
    mpc_overhead,
    near_terminal_starts,
    random_curriculum,
    run_max_policy_change,
    run_plain,
    run_random,
)
from readc.envs import ParkingEnv, load_board, make_grid_env, parse_board


@given(st.integers(1, 100_000), st.integers(1, 10_000), st.integers(1, 10), st.integers(1, 30))
def test_overhead_identity(prior, per_task, n_steps, n_tasks):
    assert mpc_overhead(n_steps, prior, per_task, n_tasks) == n_steps * (prior + n_tasks * per_task) - per_task


def test_overhead_paper_and_desk_scale():
    assert mpc_overhead(2, 50_000, 5_000, 15) == 245_000
    assert mpc_overhead(2, 5_000, 500, 15) == 24_500


def test_random_curriculum_support(keylock, rng):
    starts = random_curriculum(keylock, 1000, rng)
    (goal,) = keylock.positive_terminals()
    for s in starts:
        assert max(abs(s.cell[0] - goal.cell[0]), abs(s.cell[1] - goal.cell[1])) <= 2
        assert s.cell != goal.cell and s.keys == (True,) and s.locks == (False,)
        keylock.validate_start(s)


def test_random_curriculum_forced_cell(rng):
    env = make_grid_env(parse_board("S.K###\n#####L\n####.#"))
    starts = random_curriculum(env, 50, rng, radius=1)
    assert {s.cell for s in starts} == {(4, 2)}


def test_random_curriculum_widens_radius(rng):
    env = make_grid_env(parse_board("S.K..\n#####\n###PL"))
    assert near_terminal_starts(env, 1) == []
    starts = random_curriculum(env, 5, rng, radius=1)
    assert all(s.cell[1] == 0 for s in starts)


def test_random_curriculum_seeded(keylock):
    a = random_curriculum(keylock, 10, np.random.default_rng(4))
    b = random_curriculum(keylock, 10, np.random.default_rng(4))
    assert a == b
    with pytest.raises(ValueError):
        random_curriculum(keylock, 0, np.random.default_rng(0))


def test_source_tasks(keylock):
    tasks = make_source_tasks(keylock)
    assert len(tasks) == N_SOURCE_TASKS
    assert len({s.cell for s in tasks.starts}) == 15
    for s in tasks.starts:
        keylock.validate_start(s)
    with pytest.raises(ValueError):
        SourceTaskSet(tasks.starts[:3])
    park = make_source_tasks(ParkingEnv(rng=np.random.default_rng(0)))
    assert len(park) == 15 and len({s.goal for s in park.starts}) == 15


class Frozen:
    kind = "discrete"

    def __init__(self, actions):
        self.actions = np.asarray(actions)

    def greedy(self, obs):
        return self.actions[: len(obs)]


def test_count_changed():
    obs = np.zeros((4, 1))
    assert count_changed(Frozen([0, 1, 2, 3]), Frozen([0, 1, 3, 3]), obs, "discrete") == 1
    assert count_changed(Frozen([0]), Frozen([0]), np.zeros((0, 1)), "discrete") == 0


def test_unchanged_policies_pick_task_zero(keylock, rng, monkeypatch):
    import readc.baselines as bl

    agent = DqnAgent(keylock.obs_dim, 4, hidden=(8,), rng=rng)
    monkeypatch.setattr(bl, "count_changed", lambda *a: 0)
    res = max_policy_change_curriculum(keylock, make_source_tasks(keylock), agent, 50, 10, 2, rng)
    assert res.curriculum == [0, 0]
    assert res.overhead_steps == 2 * (50 + 15 * 10) - 10


def test_mpc_picks_most_changed_and_offsets_curve(keylock, rng):
    agent = DqnAgent(keylock.obs_dim, 4, hidden=(8,), rng=rng)
    log = TrainLog(budget=3_000)
    learner, res, log = run_max_policy_change(
        keylock, agent, rng, steps_prior=100, steps_per_task=20, n_steps=2, log=log
    )
    for step, counts in zip(res.curriculum, res.changes):
        assert counts[step] == max(counts) and counts.index(max(counts)) == step
    assert res.overhead_steps == 2 * (100 + 15 * 20) - 20
    assert log.episodes and log.episodes[0].global_step > res.overhead_steps
    assert {e.phase for e in log.episodes} == {"target"}
    assert log.global_step == 3_000


def test_plain_and_random_runs(keylock, rng):
    agent = DqnAgent(keylock.obs_dim, 4, hidden=(8,), rng=rng)
    _, log = run_plain(keylock, agent, rng, log=TrainLog(budget=500))
    assert log.global_step == 500 and {e.phase for e in log.episodes} == {"target"}
    agent = DqnAgent(keylock.obs_dim, 4, hidden=(8,), rng=rng)
    _, starts, log = run_random(keylock, agent, rng, length=3, eta=200, step_iters=100,
                                log=TrainLog(budget=1_000))
    assert len(starts) == 3 and log.global_step == 1_000
    assert keylock.start_state == keylock.default_state()
