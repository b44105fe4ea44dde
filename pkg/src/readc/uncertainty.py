"""Policy divergence measures and the two start-state uncertainty scorers.

Discrete policies come from Q-values through a softmax over the
L2-normalised Q vector; continuous policies are diagonal Gaussians.
"""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass

import numpy as np

from .agents import FixedIterations, train

PROB_FLOOR = 1e-12
TIE_TOL = 1e-12
SUBSET_SIZE = 2000


def q_to_probs(q):
    """Softmax of ``q / ||q||_2`` along the last axis; uniform when ``q == 0``."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] == 0:
        raise ValueError("empty Q vector")
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    safe = np.where(norm > 0.0, norm, 1.0)
    z = q / safe
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def discrete_kl(p_true, p_learnt):
    """``sum p_true * log(p_true / p_learnt)`` along the last axis."""
    p = np.asarray(p_true, dtype=np.float64)
    q = np.asarray(p_learnt, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    p = np.maximum(p, PROB_FLOOR)
    q = np.maximum(q, PROB_FLOOR)
    return np.maximum(np.sum(p * (np.log(p) - np.log(q)), axis=-1), 0.0)


def entropy(p):
    p = np.maximum(np.asarray(p, dtype=np.float64), PROB_FLOOR)
    return np.maximum(-np.sum(p * np.log(p), axis=-1), 0.0)


def gaussian_kl(mu_true, sigma_true, mu_learnt, sigma_learnt, drop_half=False):
    """KL between diagonal Gaussians, summed over the last axis.

    ``drop_half=True`` omits the constant ``-1/2`` per dimension; that form
    is shifted by a constant and so ranks states identically.
    """
    mt, st = np.asarray(mu_true, float), np.asarray(sigma_true, float)
    ml, sl = np.asarray(mu_learnt, float), np.asarray(sigma_learnt, float)
    per_dim = np.log(sl / st) + (st**2 + (mt - ml) ** 2) / (2.0 * sl**2)
    if not drop_half:
        per_dim = per_dim - 0.5
        return np.maximum(np.sum(per_dim, axis=-1), 0.0)
    return np.sum(per_dim, axis=-1)


def gaussian_entropy(sigma):
    s = np.asarray(sigma, dtype=np.float64)
    return np.sum(0.5 * np.log(2.0 * math.pi * math.e * s**2), axis=-1)


def _summaries(v):
    """(max, mean, std) of the L2-normalised rows of ``v``."""
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    u = v / np.where(norm > 0.0, norm, 1.0)
    return np.stack([u.max(axis=-1), u.mean(axis=-1), u.std(axis=-1)], axis=-1)


@dataclass(frozen=True)
class UncertaintyRecord:
    rel_entropy: float
    entropy_cur: float
    entropy_past: float
    q_past_max: float
    q_past_mean: float
    q_past_std: float
    q_cur_max: float
    q_cur_mean: float
    q_cur_std: float
    visit_count: int

    FEATURES = (
        "rel_entropy", "entropy_cur", "entropy_past",
        "q_past_max", "q_past_mean", "q_past_std",
        "q_cur_max", "q_cur_mean", "q_cur_std", "visit_count",
    )

    def to_array(self):
        return np.array(astuple(self), dtype=np.float64)


def feature_matrix(q_past, q_cur, visits):
    """Batch version of :func:`extract_features` returning an (n, 10) array."""
    q_past = np.atleast_2d(np.asarray(q_past, dtype=np.float64))
    q_cur = np.atleast_2d(np.asarray(q_cur, dtype=np.float64))
    if q_past.shape != q_cur.shape:
        raise ValueError("past and current Q arrays differ in shape")
    p_past, p_cur = q_to_probs(q_past), q_to_probs(q_cur)
    return np.column_stack([
        discrete_kl(p_cur, p_past),
        entropy(p_cur),
        entropy(p_past),
        _summaries(q_past),
        _summaries(q_cur),
        np.asarray(visits, dtype=np.float64).reshape(-1),
    ])


def extract_features(q_past, q_cur, visits):
    """Regressor inputs for one state from its past and current Q vectors."""
    row = feature_matrix(q_past, q_cur, [visits])[0]
    return UncertaintyRecord(*row[:-1].tolist(), int(visits))


def gaussian_feature_matrix(past, cur, visits):
    """Feature rows for Gaussian policies given ``(mu, sigma)`` pairs.

    The divergence and entropy slots hold their Gaussian counterparts and
    the value summaries are taken over the concatenated ``(mu, sigma)``
    outputs.
    """
    (mp, sp), (mc, sc) = past, cur
    return np.column_stack([
        gaussian_kl(mc, sc, mp, sp),
        gaussian_entropy(sc),
        gaussian_entropy(sp),
        _summaries(np.concatenate([mp, sp], axis=-1)),
        _summaries(np.concatenate([mc, sc], axis=-1)),
        np.asarray(visits, dtype=np.float64).reshape(-1),
    ])


def policy_divergence(true_outputs, learnt_outputs, kind, drop_half=False):
    """KL(true || learnt) per row for raw policy outputs of either kind."""
    if kind == "discrete":
        return discrete_kl(q_to_probs(true_outputs), q_to_probs(learnt_outputs))
    (mt, st), (ml, sl) = true_outputs, learnt_outputs
    return gaussian_kl(mt, st, ml, sl, drop_half=drop_half)


def agent_features(past_outputs, cur_outputs, visits, kind):
    if kind == "discrete":
        return feature_matrix(past_outputs, cur_outputs, visits)
    return gaussian_feature_matrix(past_outputs, cur_outputs, visits)


def argmax_lowest(values, tol=TIE_TOL):
    """Index of the maximum; values within ``tol`` of it resolve to the lowest index."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no candidates to choose from")
    return int(np.flatnonzero(v >= v.max() - tol)[0])


def td_uncertainties(agent, teacher, obs, drop_half=False):
    """KL(teacher policy || agent policy) for each observation row."""
    obs = np.atleast_2d(obs)
    return policy_divergence(
        teacher.policy_outputs(obs), agent.policy_outputs(obs), agent.kind, drop_half
    )


def td_select(agent, teacher, candidates):
    """Start-state choice by teacher divergence over candidate observations.

    Returns ``(index, uncertainties)``; ties resolve to the lowest index.
    """
    if len(candidates) == 0:
        raise ValueError("td_select needs at least one candidate")
    u = td_uncertainties(agent, teacher, np.asarray(candidates, dtype=np.float64))
    return argmax_lowest(u), u


def sa_uncertainties(past, agent, obs, visits, regressor):
    """Regressor-predicted divergence from past-vs-current policy features."""
    if regressor is None or not getattr(regressor, "fitted", False):
        raise RuntimeError("self-assessed scoring needs a fitted regressor")
    obs = np.atleast_2d(obs)
    feats = agent_features(
        past.policy_outputs(obs), agent.policy_outputs(obs), visits, agent.kind
    )
    return regressor.predict_matrix(feats)


def sa_select(
    agent, env, sb, regressor, beta, rng, log, subset_size=SUBSET_SIZE, phase="beta"
):
    """Self-assessed scoring of a state subset.

    Samples the candidates, snapshots the policy, trains ``beta`` more steps
    on ``env`` (logged under ``phase``) and scores every candidate with
    the regressor. Returns ``(entries, uncertainties, past_policy)``.
    """
    if regressor is None or not getattr(regressor, "fitted", False):
        raise RuntimeError("self-assessed scoring needs a fitted regressor")
    if beta <= 0:
        raise ValueError("beta must be positive")
    entries = sb.sample(subset_size, rng)
    past = agent.snapshot()
    train(agent, env, FixedIterations(beta), sb, rng, log, phase=phase)
    obs = np.array([e.obs for e in entries])
    visits = np.array([e.count for e in entries], dtype=np.float64)
    return entries, sa_uncertainties(past, agent, obs, visits, regressor), past
