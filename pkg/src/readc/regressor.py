"""Gradient-boosted regression trees (and a ridge baseline) for divergence prediction.

The model maps the ten policy features of a state (divergence between
past and current policy, both entropies, value summaries, visit count) to
the divergence from a converged teacher. It is trained once on a small
source board and reused on larger targets, so the features never depend on
the state or action dimensions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agents import (
    DqnAgent,
    FixedIterations,
    HighestReward,
    StateBuffer,
    TrainLog,
    train,
)
from .uncertainty import UncertaintyRecord, agent_features, policy_divergence

GAIN_TOL = 1e-12


class FitError(ValueError):
    """Training data too small or degenerate for the requested model."""


class BuildError(RuntimeError):
    """The source-board teacher failed to converge within its budget."""


# -- trees ----------------------------------------------------------------


@dataclass
class Node:
    value: float = 0.0
    feature: int = -1
    threshold: float = 0.0
    left: "Node | None" = None
    right: "Node | None" = None
    n_samples: int = 0

    @property
    def is_leaf(self):
        return self.left is None


def _best_split(X, y, min_leaf):
    """Exact greedy split maximising the squared-error reduction.

    Ties go to the lowest feature index, then the lowest threshold.
    Returns ``(feature, threshold)`` or ``None`` when nothing improves.
    """
    n, d = X.shape
    total = y.sum()
    base = total * total / n
    best = None
    best_gain = GAIN_TOL
    for j in range(d):
        order = np.argsort(X[:, j], kind="stable")
        xs, ys = X[order, j], y[order]
        csum = np.cumsum(ys)
        i = np.arange(min_leaf - 1, n - min_leaf)
        if i.size == 0:
            continue
        ok = xs[i] < xs[i + 1]
        if not ok.any():
            continue
        i = i[ok]
        nl = i + 1.0
        sl = csum[i]
        sr = total - sl
        gain = sl * sl / nl + sr * sr / (n - nl) - base
        top = gain.max()
        if top > best_gain * (1.0 + GAIN_TOL) + GAIN_TOL:
            k = int(np.flatnonzero(gain >= top - GAIN_TOL * max(1.0, abs(top)))[0])
            best_gain = top
            best = (j, 0.5 * (xs[i[k]] + xs[i[k] + 1]))
    return best


def fit_tree(X, y, max_depth=3, min_samples_leaf=5):
    """Least-squares regression tree; every leaf keeps ``min_samples_leaf`` rows."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return _grow(X, y, max_depth, min_samples_leaf)


def _grow(X, y, depth, min_leaf):
    node = Node(value=float(np.mean(y)), n_samples=len(y))
    if depth == 0 or len(y) < 2 * min_leaf:
        return node
    split = _best_split(X, y, min_leaf)
    if split is None:
        return node
    j, thr = split
    mask = X[:, j] <= thr
    node.feature, node.threshold = j, float(thr)
    node.left = _grow(X[mask], y[mask], depth - 1, min_leaf)
    node.right = _grow(X[~mask], y[~mask], depth - 1, min_leaf)
    return node


def tree_predict(node, X):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out = np.empty(len(X))
    _fill(node, X, np.arange(len(X)), out)
    return out


def _fill(node, X, idx, out):
    if node.is_leaf:
        out[idx] = node.value
        return
    go_left = X[idx, node.feature] <= node.threshold
    _fill(node.left, X, idx[go_left], out)
    _fill(node.right, X, idx[~go_left], out)


def tree_walk(node, x):
    """Single-row prediction by explicit descent."""
    while not node.is_leaf:
        node = node.left if x[node.feature] <= node.threshold else node.right
    return node.value


# -- boosting -------------------------------------------------------------


@dataclass
class GbmModel:
    base_prediction: float
    shrinkage: float
    trees: list = field(default_factory=list)
    train_mse: list = field(default_factory=list)
    n_features: int = len(UncertaintyRecord.FEATURES)
    fitted: bool = True

    def predict_raw(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.full(len(X), self.base_prediction)
        for t in self.trees:
            out += self.shrinkage * tree_predict(t, X)
        return out

    def predict_matrix(self, X):
        return np.maximum(self.predict_raw(X), 0.0)

    def predict(self, rec):
        """Predicted divergence for one record (or feature row), floored at 0."""
        x = rec.to_array() if isinstance(rec, UncertaintyRecord) else rec
        return float(self.predict_matrix(x)[0])

    def save(self, path):
        lines = [
            "gbm 1",
            f"base {self.base_prediction!r}",
            f"shrinkage {self.shrinkage!r}",
            f"n_features {self.n_features}",
            f"trees {len(self.trees)}",
        ]
        for t in self.trees:
            lines.append("tree")
            _dump(t, lines)
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"regressor model not found: {path}")
        it = iter(path.read_text().split("\n"))
        if next(it).strip() != "gbm 1":
            raise ValueError(f"{path} is not a saved GBM model")
        base = float(next(it).split()[1])
        shrink = float(next(it).split()[1])
        nfeat = int(next(it).split()[1])
        ntrees = int(next(it).split()[1])
        trees = []
        for _ in range(ntrees):
            if next(it).strip() != "tree":
                raise ValueError("corrupt model file: expected 'tree'")
            trees.append(_parse(it))
        return cls(base, shrink, trees, n_features=nfeat)


def _dump(node, lines):
    if node.is_leaf:
        lines.append(f"L {node.value!r}")
    else:
        lines.append(f"S {node.feature} {node.threshold!r}")
        _dump(node.left, lines)
        _dump(node.right, lines)


def _parse(it):
    parts = next(it).split()
    if parts[0] == "L":
        return Node(value=float(parts[1]))
    node = Node(feature=int(parts[1]), threshold=float(parts[2]))
    node.left = _parse(it)
    node.right = _parse(it)
    return node


def fit_gbm(X, y, n_trees=200, max_depth=3, shrinkage=0.1, min_samples_leaf=5):
    """Least-squares gradient boosting: each tree fits the current residuals."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise FitError("X must be 2-D with one row per target")
    if len(y) < 2 * min_samples_leaf:
        raise FitError(f"need at least {2 * min_samples_leaf} rows, got {len(y)}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise FitError("non-finite training data")
    if not 0.0 < shrinkage <= 1.0:
        raise ValueError("shrinkage must lie in (0, 1]")
    model = GbmModel(float(np.mean(y)), shrinkage, n_features=X.shape[1])
    pred = np.full(len(y), model.base_prediction)
    mse = float(np.mean((y - pred) ** 2))
    model.train_mse.append(mse)
    for _ in range(n_trees):
        resid = y - pred
        if float(np.mean(resid * resid)) <= 1e-24:
            break
        tree = fit_tree(X, resid, max_depth, min_samples_leaf)
        step = shrinkage * tree_predict(tree, X)
        new_mse = float(np.mean((y - pred - step) ** 2))
        if new_mse > mse * (1.0 + 1e-12) + 1e-15:
            raise FitError("boosting step increased the training error")
        pred = pred + step
        mse = new_mse
        model.trees.append(tree)
        model.train_mse.append(mse)
    return model


# -- linear baseline ------------------------------------------------------


@dataclass
class LinearModel:
    intercept: float
    coef: np.ndarray
    fitted: bool = True

    def predict_raw(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return self.intercept + X @ self.coef

    def predict_matrix(self, X):
        return np.maximum(self.predict_raw(X), 0.0)

    def predict(self, rec):
        x = rec.to_array() if isinstance(rec, UncertaintyRecord) else rec
        return float(self.predict_matrix(x)[0])


def fit_linear(X, y, ridge=1e-6, refine=3):
    """Least squares with an unpenalised intercept, solved through a ridge system.

    The ridge term keeps singular designs (e.g. a constant column)
    solvable; ``refine`` rounds of iterated Tikhonov then remove the
    ridge shrinkage along well-determined directions.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] != len(y):
        raise FitError("X and y disagree on the number of rows")
    xm, ym = X.mean(axis=0), y.mean()
    Xc, yc = X - xm, y - ym
    G = Xc.T @ Xc
    b = Xc.T @ yc
    A = G + ridge * np.eye(X.shape[1])
    coef = np.linalg.solve(A, b)
    for _ in range(refine):
        coef = coef + np.linalg.solve(A, b - G @ coef)
    return LinearModel(float(ym - xm @ coef), coef)


# -- training data from a source board ------------------------------------


@dataclass
class RegressionDataset:
    X: np.ndarray
    y: np.ndarray
    snapshot: np.ndarray

    def __len__(self):
        return len(self.y)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["snapshot", *UncertaintyRecord.FEATURES, "target"])
            for s, x, t in zip(self.snapshot, self.X, self.y):
                w.writerow([int(s), *(repr(float(v)) for v in x), repr(float(t))])

    @classmethod
    def from_csv(cls, path):
        rows = list(csv.reader(open(path, newline="")))[1:]
        arr = np.array([[float(v) for v in r] for r in rows])
        return cls(arr[:, 1:-1], arr[:, -1], arr[:, 0].astype(int))


def dataset_rows(teacher, past, current, entries):
    """Features and teacher-divergence targets for a list of state entries."""
    obs = np.array([e.obs for e in entries])
    visits = np.array([e.count for e in entries], dtype=np.float64)
    X = agent_features(
        past.policy_outputs(obs), current.policy_outputs(obs), visits, current.kind
    )
    y = policy_divergence(teacher.policy_outputs(obs), current.policy_outputs(obs), current.kind)
    return X, y


@dataclass
class SourceConfig:
    teacher_budget: int = 150_000
    teacher_threshold: float | None = None
    snapshot_every: int = 5_000
    n_snapshots: int = 6
    beta: int = 1_500
    hidden: tuple = (64, 64, 64)


def train_teacher(env, rng, threshold, budget, hidden=(64, 64, 64), agent_factory=None):
    """Train a learner without any curriculum until it reaches ``threshold``.

    Returns ``(agent, log)``; raises :class:`BuildError` when the reward
    criterion is not met within ``budget`` steps.
    """
    agent = (
        agent_factory(rng)
        if agent_factory is not None
        else DqnAgent(env.obs_dim, env.n_actions, hidden=hidden, rng=rng)
    )
    log = TrainLog(budget=budget)
    env.set_start(None)
    crit = HighestReward(threshold)
    train(agent, env, crit, StateBuffer(), rng, log, phase="teacher")
    if not crit.converged:
        raise BuildError(
            f"teacher did not reach return {threshold} within {budget} steps"
        )
    return agent, log


def build_training_set(env, rng, config=None, teacher=None, agent_factory=None):
    """Regression data from a fresh learner on a (simpler) source board.

    A teacher is trained to convergence unless one is supplied. The learner
    then trains from scratch; at each of ``n_snapshots`` checkpoints the
    policy is frozen, trained ``beta`` more steps, and one row is emitted per
    visited state with past-vs-current features and the teacher divergence
    of the current policy as target.
    """
    config = config or SourceConfig()
    if config.beta >= config.snapshot_every:
        raise ValueError("beta must be shorter than the snapshot spacing")
    if teacher is None:
        threshold = config.teacher_threshold
        if threshold is None:
            threshold = env.optimal_return() - 30.0
        teacher_agent, _ = train_teacher(
            env, rng, threshold, config.teacher_budget, config.hidden, agent_factory
        )
        teacher = teacher_agent.snapshot()
    env.set_start(None)
    agent = (
        agent_factory(rng)
        if agent_factory is not None
        else DqnAgent(env.obs_dim, env.n_actions, hidden=config.hidden, rng=rng)
    )
    sb = StateBuffer()
    log = TrainLog()
    xs, ys, snaps = [], [], []
    for k in range(config.n_snapshots):
        train(agent, env, FixedIterations(config.snapshot_every - config.beta), sb, rng, log, "source")
        past = agent.snapshot()
        train(agent, env, FixedIterations(config.beta), sb, rng, log, "source-beta")
        X, y = dataset_rows(teacher, past, agent, sb.entries())
        xs.append(X)
        ys.append(y)
        snaps.append(np.full(len(y), k))
    return RegressionDataset(np.vstack(xs), np.concatenate(ys), np.concatenate(snaps))
