import numpy as np
import pytest
from hypothesis import given, strategies as st

from mixedforest.cart import TreeError, fit_tree
from mixedforest.forest import (Forest, bootstrap_counts, default_mtry, fit_forest,
                                importance_ranking, oob_error, oob_predictions,
                                select_by_threshold, variable_importance)


def _data(seed, N=100, p=4):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(N, p))
    return X, X[:, 0] + 0.5 * rng.normal(size=N)


def test_default_mtry():
    assert [default_mtry(p) for p in (1, 4, 6, 800)] == [1, 3, 5, 600]


def test_singleton_forest_is_its_tree():
    X, y = _data(0)
    forest = fit_forest(X, y, n_trees=1, mtry=4, bootstrap=False, seed=3)
    np.testing.assert_array_equal(forest.predict(X), forest.tree(0).predict(X))
    # with mtry = p the tree is fully determined by the data
    np.testing.assert_array_equal(forest.predict(X), fit_tree(X, y, mtry=4, seed=99).predict(X))


def test_constant_response():
    X, _ = _data(1)
    forest = fit_forest(X, np.full(100, -1.25), n_trees=10, seed=0)
    np.testing.assert_array_equal(forest.predict(X), -1.25)


def test_same_seed_same_forest():
    X, y = _data(2)
    a = fit_forest(X, y, n_trees=20, mtry=2, seed=11)
    b = fit_forest(X, y, n_trees=20, mtry=2, seed=11)
    np.testing.assert_array_equal(a.predict(X), b.predict(X))
    np.testing.assert_array_equal(a.inbag, b.inbag)
    c = fit_forest(X, y, n_trees=20, mtry=2, seed=12)
    assert not np.array_equal(a.predict(X), c.predict(X))


def test_threads_do_not_change_results():
    X, y = _data(3)
    a = fit_forest(X, y, n_trees=25, mtry=2, seed=5, threads=1)
    b = fit_forest(X, y, n_trees=25, mtry=2, seed=5, threads=3)
    for f in ("feature", "threshold", "value", "inbag"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


def _stump(value):
    return fit_tree(np.array([[0.0], [1.0]]), np.array([value, value]), seed=0)


def test_mean_of_two_trees():
    forest = Forest.from_trees([_stump(1.0), _stump(3.0)])
    assert forest.predict(np.array([[0.3]]))[0] == 2.0


def test_identical_trees_equal_single_tree():
    X, y = _data(4)
    tree = fit_tree(X, y, mtry=2, seed=1)
    forest = Forest.from_trees([tree] * 7)
    np.testing.assert_array_equal(forest.predict(X), tree.predict(X))


def test_aggregation_matches_brute_force_mean():
    X, y = _data(5)
    forest = fit_forest(X, y, n_trees=50, mtry=3, seed=8)
    brute = np.array([np.mean([t.predict(x[None, :])[0] for t in forest.trees]) for x in X])
    np.testing.assert_allclose(forest.predict(X), brute, rtol=0, atol=1e-12)


@given(seed=st.integers(0, 2**32 - 1))
def test_prediction_invariant_to_tree_order(seed):
    X, y = _data(seed % 1000, N=40)
    forest = fit_forest(X, y, n_trees=15, mtry=2, seed=seed)
    trees = forest.trees
    order = np.random.default_rng(seed).permutation(len(trees))
    shuffled = Forest.from_trees([trees[k] for k in order])
    np.testing.assert_array_equal(shuffled.predict(X), forest.predict(X))


def test_oob_needs_bootstrap():
    X, y = _data(6)
    forest = fit_forest(X, y, n_trees=5, bootstrap=False, seed=0)
    with pytest.raises(TreeError):
        oob_error(forest, X, y)


def test_oob_zero_for_memorizing_forest():
    x = np.repeat(np.arange(4.0), 10)[:, None]
    y = 5.0 * x[:, 0]
    forest = fit_forest(x, y, n_trees=30, mtry=1, min_node_size=1, seed=2)
    assert oob_error(forest, x, y) == 0.0


def test_oob_replay_oracle():
    X, y = _data(7, N=10, p=3)
    forest = fit_forest(X, y, n_trees=5, mtry=2, min_node_size=1, seed=4)
    errs = []
    for i in range(10):
        preds = [t.predict(X[i])[0] for t, bag in zip(forest.trees, forest.inbag) if bag[i] == 0]
        if preds:
            errs.append((y[i] - sum(preds) / len(preds)) ** 2)
    assert oob_error(forest, X, y) == pytest.approx(sum(errs) / len(errs), rel=1e-12)
    assert oob_error(forest, X, y) == oob_error(forest, X, y)
    _, counts = oob_predictions(forest, X)
    np.testing.assert_array_equal(counts, (forest.inbag == 0).sum(axis=0))


def test_bootstrap_counts():
    rng = np.random.default_rng(0)
    c = bootstrap_counts(rng, 50)
    assert c.sum() == 50 and c.min() >= 0
    groups = np.repeat(np.arange(5), 3)
    g = bootstrap_counts(rng, 15, groups, "individual")
    assert g.sum() == 15
    for k in range(5):
        assert len(set(g[groups == k])) == 1


def test_vi_constant_and_unused_columns_are_zero():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(80, 4))
    X[:, 2] = 3.0
    y = X[:, 0] * 2
    forest = fit_forest(X, y, n_trees=30, mtry=4, seed=1)
    vi = variable_importance(forest, X, y, rng=0)
    assert vi[2] == 0.0
    used = np.zeros(4, bool)
    for t in forest.trees:
        used[t.split_features] = True
    assert np.all(vi[~used] == 0.0)


def test_vi_identifies_signal_variable():
    wins = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(100, 6))
        forest = fit_forest(X, X[:, 0], n_trees=30, mtry=3, seed=seed)
        vi = variable_importance(forest, X, X[:, 0], rng=seed)
        wins += int(np.argmax(vi) == 0 and np.sum(vi == vi.max()) == 1)
    assert wins >= 95


def test_ranking_and_threshold():
    vi = np.array([0.1, 0.5, -0.2, 0.5, 0.0])
    np.testing.assert_array_equal(importance_ranking(vi), [1, 3, 0, 4, 2])
    np.testing.assert_array_equal(select_by_threshold(vi), [1, 3, 0])
