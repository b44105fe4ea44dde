import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from readc.agents import StateEntry
from readc.regressor import (
    FitError,
    GbmModel,
    LinearModel,
    Node,
    RegressionDataset,
    dataset_rows,
    fit_gbm,
    fit_linear,
    fit_tree,
    tree_predict,
    tree_walk,
)
from readc.uncertainty import UncertaintyRecord, extract_features, discrete_kl, q_to_probs


def leaves(node):
    if node.is_leaf:
        return [node]
    return leaves(node.left) + leaves(node.right)


def test_constant_target_needs_no_trees(rng):
    X = rng.normal(size=(40, 3))
    m = fit_gbm(X, np.full(40, 3.0))
    assert len(m.trees) == 0
    assert np.allclose(m.predict_matrix(rng.normal(size=(5, 3))), 3.0)


def test_linear_target_fit_quality(rng):
    X = rng.normal(size=(500, 4))
    y = 2 * X[:, 0]
    m = fit_gbm(X, y, n_trees=200, max_depth=3, shrinkage=0.1)
    assert m.train_mse[-1] < 0.01 * y.var()
    assert np.all(np.diff(m.train_mse) <= 1e-15)


def test_single_split_recovers_step(rng):
    X = rng.normal(size=(100, 3))
    y = (X[:, 0] > 0).astype(float)
    tree = fit_tree(X, y, max_depth=1, min_samples_leaf=1)
    assert tree.feature == 0
    assert np.array_equal(tree_predict(tree, X), y)


def test_brute_force_best_split(rng):
    X = rng.normal(size=(30, 2))
    y = rng.normal(size=30)
    tree = fit_tree(X, y, max_depth=1, min_samples_leaf=3)
    best = None
    for j in range(2):
        xs = np.sort(np.unique(X[:, j]))
        for a, b in zip(xs[:-1], xs[1:]):
            t = (a + b) / 2
            left = X[:, j] <= t
            if left.sum() < 3 or (~left).sum() < 3:
                continue
            sse = ((y[left] - y[left].mean()) ** 2).sum() + ((y[~left] - y[~left].mean()) ** 2).sum()
            if best is None or sse < best[0] - 1e-12:
                best = (sse, j, t)
    assert (tree.feature, tree.threshold) == (best[1], pytest.approx(best[2]))


@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_leaves_respect_min_samples(seed, min_leaf):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(50, 3))
    y = rng.normal(size=50)
    tree = fit_tree(X, y, max_depth=4, min_samples_leaf=min_leaf)
    assert all(l.n_samples >= min_leaf for l in leaves(tree))
    assert sum(l.n_samples for l in leaves(tree)) == 50


@given(st.integers(0, 2**31 - 1))
def test_row_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 5, size=(60, 3)).astype(float)
    y = X[:, 0] - X[:, 2] + rng.normal(scale=0.1, size=60)
    perm = rng.permutation(60)
    a = fit_gbm(X, y, n_trees=10)
    b = fit_gbm(X[perm], y[perm], n_trees=10)
    probe = rng.integers(0, 5, size=(20, 3)) + rng.uniform(-0.5, 0.5, (20, 3))
    assert np.allclose(a.predict_raw(probe), b.predict_raw(probe), atol=1e-9)


def test_ensemble_equals_manual_tree_walk(rng):
    X = rng.normal(size=(80, 4))
    y = np.sin(X[:, 0]) + X[:, 1] ** 2
    m = fit_gbm(X, y, n_trees=15)
    for x in rng.normal(size=(10, 4)):
        manual = m.base_prediction + sum(m.shrinkage * tree_walk(t, x) for t in m.trees)
        assert m.predict_raw(x)[0] == pytest.approx(manual, abs=1e-12)


def test_base_only_and_clamp():
    rec = UncertaintyRecord(*([0.0] * 9), 1)
    assert GbmModel(0.4, 0.1).predict(rec) == 0.4
    neg = GbmModel(-2.0, 0.1)
    assert neg.predict(rec) == 0.0 and neg.predict_raw(rec.to_array())[0] == -2.0


@given(st.integers(0, 2**31 - 1))
def test_predictions_never_negative(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(30, 2))
    m = fit_gbm(X, X[:, 0] * 3, n_trees=5)
    assert np.all(m.predict_matrix(rng.normal(scale=10, size=(50, 2))) >= 0)


def test_save_load_roundtrip(tmp_path, rng):
    X = rng.normal(size=(60, 10))
    m = fit_gbm(X, X[:, 0] ** 2, n_trees=12)
    m.save(tmp_path / "m.txt")
    back = GbmModel.load(tmp_path / "m.txt")
    assert np.array_equal(back.predict_raw(X), m.predict_raw(X))
    text = (tmp_path / "m.txt").read_text().splitlines()
    assert text[:2] == ["gbm 1", f"base {m.base_prediction!r}"]
    with pytest.raises(FileNotFoundError):
        GbmModel.load(tmp_path / "missing.txt")


def test_fit_errors():
    with pytest.raises(FitError):
        fit_gbm(np.zeros((5, 2)), np.zeros(5))
    with pytest.raises(FitError):
        fit_gbm(np.full((20, 2), np.nan), np.zeros(20))


# -- linear -----------------------------------------------------------------


def test_linear_recovers_exact_line():
    x = np.linspace(-3, 3, 50)[:, None]
    lin = fit_linear(x, 1 + 2 * x[:, 0])
    assert lin.intercept == pytest.approx(1, abs=1e-8)
    assert lin.coef[0] == pytest.approx(2, abs=1e-8)


def test_linear_orthogonal_design(rng):
    x1 = np.tile([1.0, -1.0], 20)
    x2 = np.repeat([1.0, -1.0], 20)
    X = np.column_stack([x1, x2])
    y = rng.normal(size=40)
    lin = fit_linear(X, y)
    for j in range(2):
        xc = X[:, j] - X[:, j].mean()
        expected = (xc @ (y - y.mean())) / (xc @ xc)
        assert lin.coef[j] == pytest.approx(expected, abs=1e-6)


def test_linear_constant_column(rng):
    X = np.column_stack([rng.normal(size=20), np.ones(20)])
    lin = fit_linear(X, 3 * X[:, 0])
    assert np.all(np.isfinite(lin.coef)) and lin.coef[0] == pytest.approx(3, abs=1e-6)
    assert isinstance(lin, LinearModel)


# -- dataset construction -------------------------------------------------


class Table:
    kind = "discrete"

    def __init__(self, q):
        self.q = np.asarray(q, float)

    def policy_outputs(self, obs):
        return self.q[np.asarray(obs, dtype=int)[:, 0]]


def test_dataset_rows_match_hand_built_oracle():
    teacher = Table([[3, 0, 0, 0], [0, 0, 2, 0], [1, 1, 1, 1]])
    past = Table([[0, 1, 0, 0], [1, 0, 0, 0], [0, 0, 0, 0]])
    cur = Table([[1, 1, 0, 0], [0, 0, 1, 1], [2, 0, 0, 0]])
    entries = [StateEntry(f"s{i}", np.array([float(i)]), count=i + 2) for i in range(3)]
    X, y = dataset_rows(teacher, past, cur, entries)
    for i in range(3):
        rec = extract_features(past.q[i], cur.q[i], i + 2)
        assert np.allclose(X[i], rec.to_array(), atol=1e-12)
        assert y[i] == pytest.approx(discrete_kl(q_to_probs(teacher.q[i]), q_to_probs(cur.q[i])))


def test_agent_equal_to_teacher_gives_zero_targets(rng):
    t = Table(rng.normal(size=(4, 4)))
    entries = [StateEntry(i, np.array([float(i)])) for i in range(4)]
    _, y = dataset_rows(t, t, t, entries)
    assert np.all(y == 0)


def test_dataset_csv_roundtrip(tmp_path, rng):
    d = RegressionDataset(rng.normal(size=(6, 10)), rng.uniform(size=6), np.arange(6) // 3)
    d.to_csv(tmp_path / "d.csv")
    back = RegressionDataset.from_csv(tmp_path / "d.csv")
    assert np.array_equal(back.X, d.X) and np.array_equal(back.y, d.y)
    assert back.snapshot.tolist() == [0, 0, 0, 1, 1, 1]


def test_tree_node_default_is_leaf():
    assert Node().is_leaf
