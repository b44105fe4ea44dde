import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate

from readc.agents import DqnAgent, StateBuffer, TrainLog
from readc.envs import load_board, make_grid_env
from readc.regressor import fit_linear
from readc.uncertainty import (
    UncertaintyRecord,
    argmax_lowest,
    discrete_kl,
    entropy,
    extract_features,
    feature_matrix,
    gaussian_entropy,
    gaussian_kl,
    q_to_probs,
    sa_select,
    sa_uncertainties,
    td_select,
    td_uncertainties,
)

# -- independent oracles -------------------------------------------------


def softmax_oracle(q):
    norm = math.sqrt(sum(v * v for v in q))
    if norm == 0:
        return [1.0 / len(q)] * len(q)
    z = [v / norm for v in q]
    m = max(z)
    e = [math.exp(v - m) for v in z]
    return [v / sum(e) for v in e]


def kl_oracle(p, q):
    return sum(a * math.log(a / b) for a, b in zip(p, q) if a > 0)


def entropy_oracle(p):
    return -sum(a * math.log(a) for a in p if a > 0)


def gaussian_kl_quadrature(mt, st_, ml, sl):
    total = 0.0
    for a, s, b, r in zip(mt, st_, ml, sl):
        def integrand(x):
            lp = -0.5 * ((x - a) / s) ** 2 - math.log(s)
            lq = -0.5 * ((x - b) / r) ** 2 - math.log(r)
            return math.exp(lp) / math.sqrt(2 * math.pi) * (lp - lq)
        lo, hi = a - 12 * s, a + 12 * s
        total += integrate.quad(integrand, lo, hi, limit=200, epsabs=1e-12, epsrel=1e-12)[0]
    return total


def random_simplex(rng, n):
    p = rng.dirichlet(np.ones(n))
    return np.maximum(p, 1e-6) / np.maximum(p, 1e-6).sum()


def test_softmax_against_oracle(rng):
    for _ in range(100):
        q = rng.normal(scale=rng.uniform(0.1, 50), size=rng.integers(2, 8))
        assert np.allclose(q_to_probs(q), softmax_oracle(q.tolist()), rtol=0, atol=1e-9)


def test_softmax_of_zero_is_uniform():
    assert np.array_equal(q_to_probs(np.zeros(4)), np.full(4, 0.25))


def test_discrete_kl_and_entropy_against_oracle(rng):
    for _ in range(100):
        n = int(rng.integers(2, 8))
        p, q = random_simplex(rng, n), random_simplex(rng, n)
        assert abs(discrete_kl(p, q) - kl_oracle(p, q)) <= 1e-12
        assert abs(entropy(p) - entropy_oracle(p)) <= 1e-12


def test_gaussian_kl_against_quadrature(rng):
    for _ in range(100):
        d = int(rng.integers(1, 3))
        mt, ml = rng.normal(size=d), rng.normal(size=d)
        s_t, s_l = rng.uniform(0.3, 2.0, d), rng.uniform(0.3, 2.0, d)
        assert abs(gaussian_kl(mt, s_t, ml, s_l) - gaussian_kl_quadrature(mt, s_t, ml, s_l)) <= 1e-6


def test_gaussian_kl_drop_half_is_constant_shift(rng):
    mt, ml = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    st_, sl = rng.uniform(0.5, 2, (5, 2)), rng.uniform(0.5, 2, (5, 2))
    shift = gaussian_kl(mt, st_, ml, sl, drop_half=True) - gaussian_kl(mt, st_, ml, sl)
    assert np.allclose(shift, 1.0)  # 0.5 per dimension, 2 dimensions


def test_gaussian_entropy_closed_form():
    assert gaussian_entropy(np.array([1.0])) == pytest.approx(0.5 * math.log(2 * math.pi * math.e))


@given(arrays(np.float64, 4, elements=st.floats(-100, 100)), arrays(np.float64, 4, elements=st.floats(-100, 100)))
def test_kl_properties(a, b):
    p, q = q_to_probs(a), q_to_probs(b)
    assert discrete_kl(p, q) >= 0
    assert discrete_kl(p, p) == 0
    assert 0 <= entropy(p) <= math.log(4) + 1e-12
    assert abs(p.sum() - 1) < 1e-12


def test_kl_shape_mismatch():
    with pytest.raises(ValueError):
        discrete_kl(np.ones(3) / 3, np.ones(4) / 4)


# -- features ------------------------------------------------------------


def test_extract_features_by_hand():
    qp, qc = np.array([1.0, 0.0, 0.0, 0.0]), np.array([0.0, 3.0, 4.0, 0.0])
    rec = extract_features(qp, qc, 7)
    pp, pc = softmax_oracle(qp.tolist()), softmax_oracle(qc.tolist())
    assert rec.rel_entropy == pytest.approx(kl_oracle(pc, pp), abs=1e-12)
    assert rec.entropy_cur == pytest.approx(entropy_oracle(pc), abs=1e-12)
    assert rec.entropy_past == pytest.approx(entropy_oracle(pp), abs=1e-12)
    assert (rec.q_past_max, rec.q_past_mean) == pytest.approx((1.0, 0.25))
    u = np.array([0, 0.6, 0.8, 0])
    assert (rec.q_cur_max, rec.q_cur_mean, rec.q_cur_std) == pytest.approx((0.8, 0.35, u.std()))
    assert rec.visit_count == 7
    assert rec.to_array().shape == (len(UncertaintyRecord.FEATURES),)


def test_identical_policies_have_zero_divergence(rng):
    q = rng.normal(size=(5, 4))
    X = feature_matrix(q, q, np.ones(5))
    assert np.all(X[:, 0] == 0) and np.allclose(X[:, 1], X[:, 2])


# -- selection -------------------------------------------------------------


class FixedQ:
    kind = "discrete"

    def __init__(self, table):
        self.table = np.asarray(table, dtype=float)

    def policy_outputs(self, obs):
        return self.table[np.asarray(obs, dtype=int)[:, 0]]


def test_argmax_lowest_tie_rule():
    assert argmax_lowest([1.0, 3.0, 3.0]) == 1
    assert argmax_lowest([2.0, 2.0 - 1e-14, 0.0]) == 0
    with pytest.raises(ValueError):
        argmax_lowest([])


def test_td_select_by_hand():
    teacher = FixedQ([[1, 0], [5, 0], [0, 1]])
    agent = FixedQ([[1, 0], [0, 5], [0, 1]])
    idx, u = td_select(agent, teacher, np.array([[0], [1], [2]]))
    assert idx == 1 and u[0] == 0 and u[2] == 0


def test_td_select_equal_policies_pick_first():
    t = FixedQ([[1, 2], [3, 4], [5, 6]])
    idx, u = td_select(t, t, np.array([[2], [0], [1]]))
    assert idx == 0 and np.all(u == 0)


def test_td_select_direction_is_teacher_first():
    teacher = FixedQ([[4, 0, 0]])
    agent = FixedQ([[1, 1, 0]])
    u = td_uncertainties(agent, teacher, np.array([[0]]))
    assert u[0] == pytest.approx(kl_oracle(softmax_oracle([4, 0, 0]), softmax_oracle([1, 1, 0])))


@given(st.integers(0, 2**31 - 1), st.floats(-1e3, 1e3))
def test_argmax_invariant_to_constant_shift(seed, c):
    rng = np.random.default_rng(seed)
    u = rng.exponential(size=int(rng.integers(1, 30)))
    assert argmax_lowest(u) == argmax_lowest(u + c)


def test_sa_requires_fitted_regressor(rng):
    q = FixedQ([[1, 0]])
    with pytest.raises(RuntimeError):
        sa_uncertainties(q, q, np.array([[0]]), np.ones(1), None)


def test_sa_select_trains_beta_and_scores(rng):
    env = make_grid_env(load_board("source_keylock_10x10"))
    agent = DqnAgent(env.obs_dim, 4, hidden=(8,), rng=rng)
    sb = StateBuffer()
    env.reset()
    for a in (1, 2, 1):
        obs = env.encode_state(env.state)
        sb.add(env.obs_key(obs), env.state, obs)
        env.step(a)
    X = rng.normal(size=(30, 10))
    reg = fit_linear(X, X[:, 0])
    log = TrainLog()
    entries, u, past = sa_select(agent, env, sb, reg, 40, rng, log)
    assert log.global_step == 40 and len(u) == len(entries) >= 3
    assert np.all(u >= 0)
    obs = np.array([e.obs for e in entries])
    visits = np.array([e.count for e in entries], float)
    assert np.array_equal(u, sa_uncertainties(past, agent, obs, visits, reg))
