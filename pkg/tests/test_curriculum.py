import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import readc.curriculum as cur
from readc.agents import DqnAgent, HighestReward, TrainLog
from readc.curriculum import (
    CurriculumConfig,
    heuristic_filter,
    run_readc,
    select_start,
)
from readc.envs import load_board, make_grid_env, parse_board
from readc.regressor import fit_linear
from readc.uncertainty import td_uncertainties

SMALL = "S....\n.....\n..K..\n.....\n....L"

# Fig.-1-style layout on keylock_10x10 (goal = lock at (0, 9)):
# three equally uncertain regions, one beside the goal but next to a calm
# region, one far away and isolated, one in the middle beside a calm region.
FIG1_REGIONS = {
    "near_goal": ((1, 7), 10.0),
    "isolated": ((9, 0), 10.0),
    "middle": ((5, 5), 10.0),
    "low_a": ((3, 7), 0.0),
    "low_b": ((6, 5), 0.0),
    "low_c": ((4, 9), 0.0),
    "mid_a": ((9, 9), 5.0),
    "mid_b": ((8, 8), 5.0),
    "mid_c": ((0, 0), 5.0),
    "mid_d": ((1, 1), 5.0),
    "mid_e": ((7, 2), 5.0),
    "mid_f": ((2, 3), 5.0),
}


def fig1():
    names = list(FIG1_REGIONS)
    regions = [np.array([FIG1_REGIONS[n][0]], float) for n in names]
    scores = np.array([FIG1_REGIONS[n][1] for n in names])
    return names, regions, scores


def test_fig1_proximity_picks_goal_nearest(keylock):
    names, regions, scores = fig1()
    filt = heuristic_filter(regions, scores, keylock, "proximity")
    best = filt.kept[int(np.argmax(scores[filt.kept]))]
    assert names[best] == "near_goal"


def test_fig1_max_distance_picks_isolated(keylock):
    names, regions, scores = fig1()
    filt = heuristic_filter(regions, scores, keylock, "max-distance")
    assert [names[i] for i in filt.kept] == ["isolated"] and not filt.fallback


def test_max_entropy_is_identity(keylock):
    _, regions, scores = fig1()
    assert heuristic_filter(regions, scores, keylock, "max-entropy").kept == list(range(12))


@given(st.integers(1, 60))
def test_proximity_cardinality(n):
    env = make_grid_env(load_board("keylock_10x10"))
    rng = np.random.default_rng(n)
    regions = [rng.integers(0, 10, size=(int(rng.integers(1, 4)), 2)).astype(float) for _ in range(n)]
    kept = heuristic_filter(regions, rng.normal(size=n), env, "proximity").kept
    assert len(kept) == math.ceil(0.2 * n)
    assert set(kept) <= set(range(n))


def test_proximity_on_ten_keeps_two(keylock):
    regions = [np.array([[i, 0.0]]) for i in range(10)]
    assert len(heuristic_filter(regions, np.zeros(10), keylock, "proximity").kept) == 2


def test_max_distance_falls_back_when_flat(keylock):
    regions = [np.array([[i, 0.0]]) for i in range(5)]
    filt = heuristic_filter(regions, np.ones(5), keylock, "max-distance")
    assert filt.fallback and filt.kept == list(range(5))


@given(st.integers(0, 2**31 - 1), st.sampled_from(cur.HEURISTICS), st.booleans())
def test_selection_always_in_filtered_set(seed, heuristic, clustering):
    env = make_grid_env(load_board("keylock_10x10"))
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 30))
    pos = rng.integers(0, 10, size=(n, 2)).astype(float)
    u = rng.exponential(size=n)
    cfg = CurriculumConfig(heuristic=heuristic, clustering=clustering, cutoff=2.0)
    idx, region, part, filt, score = select_start(pos, pos, u, env, cfg, rng)
    assert region in filt.kept
    assert idx in part.clusters[region]
    assert score == max(part.scores(u)[filt.kept])


def test_config_validation():
    with pytest.raises(ValueError):
        CurriculumConfig(variant="xx")
    with pytest.raises(ValueError):
        CurriculumConfig(heuristic="nearest")
    with pytest.raises(ValueError):
        CurriculumConfig(eta=0)


# -- orchestration ----------------------------------------------------------


def small_setup(seed=0):
    env = make_grid_env(parse_board(SMALL))
    rng = np.random.default_rng(seed)
    agent = DqnAgent(env.obs_dim, 4, hidden=(16, 16), rng=rng)
    teacher = DqnAgent(env.obs_dim, 4, hidden=(16, 16), rng=np.random.default_rng(99)).snapshot()
    cfg = CurriculumConfig(eta=300, beta=100, max_length=2, step_max_steps=300)
    return env, rng, agent, teacher, cfg


def test_td_run_audit_selects_max_kl():
    env, rng, agent, teacher, cfg = small_setup()
    _, plan, log = run_readc(env, agent, cfg, rng, teacher=teacher, log=TrainLog(budget=5_000))
    assert len(plan) == 2 and len(plan.audits) == 2
    for audit in plan.audits:
        kl = td_uncertainties(audit.policy, teacher, audit.obs)
        assert np.array_equal(kl, audit.uncertainties)
        assert np.all(kl[audit.chosen] >= kl)
    for step in plan.steps:
        assert len(step.trace) == step.episodes + 1  # one probe per episode plus the initial one
    assert log.global_step == 5_000
    assert env.start_state == env.default_state()
    phases = [e.phase for e in log.episodes]
    assert phases[0] == "warmup" and phases[-1] == "target"


def test_zero_length_is_plain_training():
    env, rng, agent, teacher, cfg = small_setup()
    cfg = CurriculumConfig(eta=300, max_length=0)
    _, plan, log = run_readc(env, agent, cfg, rng, teacher=teacher, log=TrainLog(budget=1_000))
    assert len(plan) == 0
    assert {e.phase for e in log.episodes} <= {"warmup", "target"}


def test_network_never_reinitialised(monkeypatch):
    env, rng, agent, teacher, cfg = small_setup()
    digests = []
    real_train = cur.train

    def spy(a, *args, **kw):
        digests.append(("in", a.net.digest()))
        res = real_train(a, *args, **kw)
        digests.append(("out", a.net.digest()))
        return res

    monkeypatch.setattr(cur, "train", spy)
    net = agent.net
    run_readc(env, agent, cfg, rng, teacher=teacher, log=TrainLog(budget=4_000))
    assert agent.net is net
    for (k1, d1), (k2, d2) in zip(digests[1::2], digests[2::2]):
        assert (k1, k2) == ("out", "in") and d1 == d2


def test_sa_run_with_regressor():
    env, rng, agent, _, cfg = small_setup(1)
    X = rng.normal(size=(40, 10))
    reg = fit_linear(X, np.abs(X[:, 0]))
    cfg = CurriculumConfig(variant="sa", eta=300, beta=100, max_length=2, step_max_steps=300)
    _, plan, log = run_readc(env, agent, cfg, rng, regressor=reg, log=TrainLog(budget=4_000))
    assert len(plan) == 2
    assert all(np.all(a.uncertainties >= 0) for a in plan.audits)


def test_final_criterion_stops_early():
    env, rng, agent, teacher, cfg = small_setup()
    crit = HighestReward(-1e9, window=1)
    _, _, log = run_readc(env, agent, cfg, rng, teacher=teacher, final_criterion=crit,
                          log=TrainLog(budget=50_000))
    assert crit.converged and log.global_step < 50_000


def test_missing_teacher_or_regressor():
    env, rng, agent, _, cfg = small_setup()
    with pytest.raises(ValueError):
        run_readc(env, agent, cfg, rng, log=TrainLog(budget=10))
    with pytest.raises(ValueError):
        run_readc(env, agent, CurriculumConfig(variant="sa"), rng, log=TrainLog(budget=10))


def test_plan_csv(tmp_path):
    env, rng, agent, teacher, cfg = small_setup()
    _, plan, _ = run_readc(env, agent, cfg, rng, teacher=teacher, log=TrainLog(budget=3_000))
    plan.to_csv(tmp_path / "plan.csv")
    lines = (tmp_path / "plan.csv").read_text().splitlines()
    assert len(lines) == len(plan) + 1 and lines[0].startswith("step,start")
