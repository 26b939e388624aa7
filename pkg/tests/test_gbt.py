import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bttf import gbt
from bttf.errors import ConfigError, ContractError, DataError, ShapeError
from bttf.gbt import GBTConfig, RegressionTree

from oracles import brute_force_split, grid_leaf_weight


def test_grad_hess():
    g, h = gbt.grad_hess_squared([1.0, 3.0], [1.0, 1.0])
    assert list(g) == [0.0, 2.0]
    assert list(h) == [1.0, 1.0]
    with pytest.raises(ShapeError):
        gbt.grad_hess_squared([1.0], [1.0, 2.0])


def test_leaf_weight_examples():
    assert gbt.leaf_weight(0.0, 3.0, 1.0, 0.5) == 0.0
    assert gbt.leaf_weight(-8.0, 2.0) == 4.0
    assert gbt.leaf_weight(-8.0, 2.0, reg_l1=1.0) == 3.5
    assert abs(grid_leaf_weight(-8.0, 2.0, 0.0, 0.0) - 4.0) < 1e-3
    assert abs(grid_leaf_weight(-8.0, 2.0, 1.0, 0.0) - 3.5) < 1e-3
    with pytest.raises(ContractError):
        gbt.leaf_weight(1.0, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(-50, 50), st.floats(0.1, 30), st.floats(0, 20), st.floats(0, 5))
def test_leaf_weight_matches_grid(G, H, l1, l2):
    assert abs(gbt.leaf_weight(G, H, l1, l2) - grid_leaf_weight(G, H, l1, l2)) < 1e-3


def test_split_gain_examples():
    X = np.array([[0.0], [0.0], [1.0], [1.0]])
    g = -np.array([0.0, 0.0, 10.0, 10.0])
    gain, f, t = gbt.best_split(X, g, np.ones(4), GBTConfig(reg_l1=0.0))
    assert (f, t) == (0, 0.5) and gain > 0
    assert gbt.best_split(X, np.zeros(4), np.ones(4), GBTConfig()) is None
    with pytest.raises(ContractError):
        gbt.split_gain((1.0, 2.0), (0.5, 1.0), (0.0, 1.0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_gain_is_order_invariant(seed):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 5, size=(20, 2)).astype(float)
    g = rng.normal(size=20)
    h = np.ones(20)
    perm = rng.permutation(20)
    cfg = GBTConfig(reg_l1=0.3)
    a, b = gbt.best_split(X, g, h, cfg), gbt.best_split(X[perm], g[perm], h[perm], cfg)
    if a is None:
        assert b is None
    else:
        assert a[1:] == b[1:] and abs(a[0] - b[0]) < 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 64), st.integers(1, 4), st.booleans())
def test_root_split_matches_brute_force(seed, n, D, discrete):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 4, size=(n, D)).astype(float) if discrete else rng.normal(size=(n, D))
    y = rng.normal(size=n) + 2 * (X[:, 0] > 0)
    cfg = GBTConfig(n_rounds=1, max_depth=1, eta=1.0, reg_l1=float(rng.uniform(0, 2)), reg_l2=float(rng.uniform(0, 1)))
    model = gbt.fit_gbt(X, y, cfg)
    g, h = gbt.grad_hess_squared(np.full(n, y.mean()), y)
    want = brute_force_split(X, g, h, cfg.reg_l1, cfg.reg_l2)
    tree = model.trees[0]
    if want is None:
        assert tree.n_internal == 0
    else:
        assert (int(tree.feature[0]), float(tree.threshold[0])) == want[1:]


def test_unlimited_tree_memorizes():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(40, 3))
    y = rng.normal(size=40)
    model = gbt.fit_gbt(X, y, GBTConfig(n_rounds=1, max_depth=64, eta=1.0, reg_l1=0.0))
    np.testing.assert_allclose(model.predict(X), y, atol=1e-12)


def test_depth_one_reproduces_group_means():
    rng = np.random.default_rng(2)
    X = rng.uniform(size=(30, 1))
    y = np.where(X[:, 0] > 0.5, 3.0, -1.0) + rng.normal(0, 0.1, 30)
    model = gbt.fit_gbt(X, y, GBTConfig(n_rounds=1, max_depth=1, eta=1.0, reg_l1=0.0))
    t = model.trees[0].threshold[0]
    left = X[:, 0] <= t
    pred = model.predict(X)
    np.testing.assert_allclose(pred[left], y[left].mean(), atol=1e-12)
    np.testing.assert_allclose(pred[~left], y[~left].mean(), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.05, 1.0))
def test_objective_non_increasing(seed, eta):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(50, 3))
    y = np.sin(X[:, 0]) + rng.normal(0, 0.3, 50)
    trace = []
    cfg = GBTConfig(n_rounds=15, max_depth=3, eta=eta, reg_l1=float(rng.uniform(0, 3)))
    gbt.fit_gbt(X, y, cfg, on_round=lambda r, m, p: trace.append(gbt.training_objective(m, X, y)))
    start = 0.5 * np.sum((y - y.mean()) ** 2)
    seq = [start] + trace
    assert all(b <= a + 1e-9 * max(1.0, a) for a, b in zip(seq, seq[1:]))


def hand_tree():
    # x0 <= 1 ? (x1 <= 0 ? 5 : 7) : -2
    return RegressionTree(np.array([0, 1, -1, -1, -1]), np.array([1.0, 0.0, 0, 0, 0]),
                          np.array([1, 3, -1, -1, -1]), np.array([2, 4, -1, -1, -1]),
                          np.array([0.0, 0.0, -2.0, 5.0, 7.0]))


def test_predict_hand_trace():
    model = gbt.BoostedTreeModel(10.0, [hand_tree()], GBTConfig(eta=0.5), ["a", "b"])
    assert gbt.predict_gbt(model, [1.0, 0.0]) == 10.0 + 0.5 * 5  # ties route left twice
    assert gbt.predict_gbt(model, [0.0, 0.1]) == 10.0 + 0.5 * 7
    assert gbt.predict_gbt(model, [1.5, -9.0]) == 10.0 - 0.5 * 2
    with pytest.raises(ShapeError):
        gbt.predict_gbt(model, [1.0])


def test_single_leaf_and_zero_leaves():
    leaf = RegressionTree(np.array([-1]), np.zeros(1), np.array([-1]), np.array([-1]), np.array([4.0]))
    m = gbt.BoostedTreeModel(1.0, [leaf], GBTConfig(eta=0.25), ["x"])
    assert gbt.predict_gbt(m, [3.0]) == 2.0
    zero = gbt.BoostedTreeModel(1.5, [RegressionTree(**{**hand_tree().__dict__, "value": np.zeros(5)})],
                                GBTConfig(), ["a", "b"])
    assert gbt.predict_gbt(zero, [0.0, 0.0]) == 1.5


def test_importance_counts():
    m = gbt.BoostedTreeModel(0.0, [RegressionTree(np.array([2, -1, -1]), np.zeros(3), np.array([1, -1, -1]),
                                                  np.array([2, -1, -1]), np.zeros(3))], GBTConfig(),
                             ["f0", "f1", "f2"])
    assert gbt.feature_importance(m) == {"f0": 0, "f1": 0, "f2": 1}
    rng = np.random.default_rng(0)
    X = rng.normal(size=(60, 4))
    stumps = gbt.fit_gbt(X, X[:, 1] + rng.normal(0, 0.1, 60), GBTConfig(n_rounds=12, max_depth=1, reg_l1=0.0))
    imp = gbt.feature_importance(stumps)
    assert sum(imp.values()) == 12 == sum(t.n_internal for t in stumps.trees)
    ranked = gbt.ranked_importance({"a": 1, "b": 3, "c": 1}, ["a", "b", "c"])
    assert ranked == [("b", 3), ("a", 1), ("c", 1)]


def test_fit_rejects_bad_input():
    with pytest.raises(DataError):
        gbt.fit_gbt([[np.nan], [1.0]], [0.0, 1.0])
    with pytest.raises(DataError):
        gbt.fit_gbt([[1.0]], [0.0])
    with pytest.raises(ConfigError) as err:
        gbt.fit_gbt([[0.0], [1.0]], [0.0, 1.0], GBTConfig(eta=0.0, n_rounds=0))
    assert set(err.value.fields) == {"eta", "n_rounds"}


def test_min_leaf_respected():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(40, 2))
    model = gbt.fit_gbt(X, rng.normal(size=40), GBTConfig(n_rounds=3, max_depth=8, min_leaf=5, reg_l1=0.0))
    for tree in model.trees:
        counts = np.bincount(tree.apply(X), minlength=len(tree.feature))
        assert np.all(counts[tree.feature < 0] >= 5)


def test_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    X = rng.normal(size=(80, 3))
    model = gbt.fit_gbt(X, X @ [1.0, -2.0, 0.5], GBTConfig(n_rounds=10), feature_names=["a", "b", "c"])
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    gbt.save_gbt(model, p1)
    back = gbt.load_gbt(p1)
    gbt.save_gbt(back, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert np.array_equal(back.predict(X), model.predict(X))
    assert json.loads(p1.read_text())["format"] == gbt.FORMAT_TAG
