import numpy as np
import pytest

from csseg.forest import (
    ForestConfig, ForestFormatError, ForestModel, Tree, best_split, class_weights,
    deserialize_forest, predict_proba, serialize_forest, train_forest,
)


def brute_force_splits(X, y, w):
    """Enumerate every (feature, midpoint) split and compute the weighted
    Gini gain by direct set arithmetic. Returns {(f, thr): gain} plus the
    winner under the lowest-feature/lowest-threshold tie rule."""
    n, d = X.shape
    wp, wn = (w * y).sum(), (w * (1 - y)).sum()
    W = wp + wn
    parent = 1.0 - (wp / W) ** 2 - (wn / W) ** 2
    gains = {}
    for f in range(d):
        vals = np.unique(X[:, f].astype(np.float32))
        for a, b in zip(vals[:-1], vals[1:]):
            thr = np.float32((np.float64(a) + np.float64(b)) / 2.0)
            if thr >= b:
                continue
            left = X[:, f].astype(np.float32) <= thr
            wl_p, wl_n = (w * y)[left].sum(), (w * (1 - y))[left].sum()
            wr_p, wr_n = wp - wl_p, wn - wl_n
            wl, wr = wl_p + wl_n, wr_p + wr_n
            if wl == 0 or wr == 0:
                continue
            gl = 1.0 - (wl_p / wl) ** 2 - (wl_n / wl) ** 2
            gr = 1.0 - (wr_p / wr) ** 2 - (wr_n / wr) ** 2
            gains[(f, float(thr))] = parent - (wl * gl + wr * gr) / W
    best = None
    for (f, thr), g in gains.items():
        if best is None or g > gains[best] or (
                g == gains[best] and (f, thr) < best):
            best = (f, thr)
    return gains, best


HAND_X = np.array([[1], [2], [3], [4], [5], [6], [7], [8], [9], [10]], dtype=np.float32)
HAND_Y = np.array([0, 0, 1, 0, 0, 0, 0, 1, 1, 1], dtype=np.int8)


def test_weighted_gini_stump_matches_enumerator():
    # criterion: hand-built 10-sample imbalanced set, exact agreement
    w = class_weights(HAND_Y)
    assert (w * HAND_Y).sum() == pytest.approx(0.5)
    assert (w * (1 - HAND_Y)).sum() == pytest.approx(0.5)
    gains, winner = brute_force_splits(HAND_X, HAND_Y, w)
    got = best_split(HAND_X, HAND_Y, w, np.array([0]), min_leaf_eff=1.0, n_total=10)
    assert got is not None
    f, thr, gain = got
    assert (f, float(thr)) == winner
    assert gain == pytest.approx(gains[winner], abs=1e-15)

    # a full stump built by train_forest picks the same split
    cfg = ForestConfig(n_trees=1, bootstrap=False, max_features=1, max_depth=1,
                       min_leaf=1.0, seed=0)
    m = train_forest(HAND_X, HAND_Y, cfg)
    tree = m.trees[0]
    assert tree.feature[0] == winner[0]
    assert float(tree.threshold[0]) == winner[1]
    # leaf probabilities are the weighted class fractions on each side
    left = HAND_X[:, 0] <= tree.threshold[0]
    for side, node in ((left, tree.left[0]), (~left, tree.right[0])):
        expect = (w * HAND_Y)[side].sum() / w[side].sum()
        assert tree.prob[node] == pytest.approx(expect, rel=1e-6)


def test_duplicating_negatives_leaves_gains_unchanged():
    # class-balanced weighting: every split's weighted Gini gain is invariant
    # to duplicating all negatives k times
    X = np.array([[1], [2], [3], [4]], dtype=np.float32)
    y = np.array([0, 1, 0, 1], dtype=np.int8)
    gains1, best1 = brute_force_splits(X, y, class_weights(y))
    k = 3
    Xd = np.concatenate([X] + [X[y == 0]] * (k - 1))
    yd = np.concatenate([y] + [y[y == 0]] * (k - 1))
    gains2, best2 = brute_force_splits(Xd, yd, class_weights(yd))
    assert set(gains1) == set(gains2)
    for key, g in gains1.items():
        assert gains2[key] == pytest.approx(g, abs=1e-12)
    assert gains2[best2] == pytest.approx(gains1[best1], abs=1e-12)
    # the implementation's winning gain agrees on both datasets
    for XX, yy, expect, win in ((X, y, gains1, best1), (Xd, yd, gains2, best2)):
        got = best_split(XX.astype(np.float32), yy, class_weights(yy),
                         np.array([0]), 1.0, len(yy))
        assert got[2] == pytest.approx(expect[win], abs=1e-12)


def test_balanced_vs_duplicated_leaf_probs():
    # duplicated 9:1 set gives the same stump leaf probabilities as the
    # balanced set it was duplicated from
    Xb = np.array([[1], [2], [9], [10]], dtype=np.float32)
    yb = np.array([0, 0, 1, 1], dtype=np.int8)
    Xd = np.concatenate([np.repeat(Xb[:2], 9, axis=0), Xb[2:]])
    yd = np.concatenate([np.repeat(yb[:2], 9), yb[2:]])
    cfg = ForestConfig(n_trees=1, bootstrap=False, max_features=1, max_depth=1,
                       min_leaf=0.5, seed=0)
    mb = train_forest(Xb, yb, cfg)
    md = train_forest(Xd, yd, cfg)
    for node in (0,):
        assert mb.trees[0].threshold[node] == md.trees[0].threshold[node]
    probs_b = sorted(mb.trees[0].prob[mb.trees[0].feature < 0].tolist())
    probs_d = sorted(md.trees[0].prob[md.trees[0].feature < 0].tolist())
    assert probs_b == pytest.approx(probs_d, abs=1e-7)


def test_identical_features_single_leaf():
    X = np.ones((10, 3), dtype=np.float32)
    y = np.array([1] + [0] * 9, dtype=np.int8)
    m = train_forest(X, y, ForestConfig(n_trees=1, bootstrap=False, seed=1))
    tree = m.trees[0]
    assert len(tree.feature) == 1 and tree.feature[0] == -1
    assert tree.prob[0] == pytest.approx(0.5)  # weighted fraction under balancing
    assert predict_proba(m, X[0]) == pytest.approx(0.5)


def test_separable_blobs_high_accuracy():
    rng = np.random.default_rng(2)
    a = rng.normal([-2, -2], 0.5, size=(100, 2))
    b = rng.normal([2, 2], 0.5, size=(100, 2))
    X = np.vstack([a, b]).astype(np.float32)
    y = np.repeat([0, 1], 100).astype(np.int8)
    m = train_forest(X, y, ForestConfig(n_trees=20, seed=3))
    acc = ((predict_proba(m, X) >= 0.5).astype(int) == y).mean()
    assert acc >= 0.99


def test_predict_semantics():
    leaf = lambda p: Tree(feature=np.array([-1], np.int32), threshold=np.zeros(1, np.float32),
                          left=np.array([-1], np.int32), right=np.array([-1], np.int32),
                          prob=np.array([p], np.float32))
    m = ForestModel(config=ForestConfig(n_trees=1), n_features=4, trees=[leaf(0.3)])
    assert predict_proba(m, np.zeros(4)) == pytest.approx(0.3, abs=1e-7)
    m2 = ForestModel(config=ForestConfig(n_trees=2), n_features=4,
                     trees=[leaf(0.2), leaf(0.8)])
    assert predict_proba(m2, np.zeros(4)) == pytest.approx(0.5, abs=1e-7)
    stump = Tree(feature=np.array([1, -1, -1], np.int32),
                 threshold=np.array([5.0, 0, 0], np.float32),
                 left=np.array([1, -1, -1], np.int32),
                 right=np.array([2, -1, -1], np.int32),
                 prob=np.array([0, 0.1, 0.9], np.float32))
    m3 = ForestModel(config=ForestConfig(n_trees=1), n_features=3, trees=[stump])
    out = predict_proba(m3, np.array([[0, 4, 0], [0, 6, 0]], dtype=np.float32))
    assert out == pytest.approx([0.1, 0.9], abs=1e-7)


def test_pure_positive_model_predicts_one():
    rng = np.random.default_rng(4)
    X = np.vstack([rng.normal(-3, 0.1, (50, 1)), rng.normal(3, 0.1, (50, 1))]).astype(np.float32)
    y = np.repeat([0, 1], 50).astype(np.int8)
    m = train_forest(X, y, ForestConfig(n_trees=10, seed=5))
    assert predict_proba(m, np.array([3.0])) == pytest.approx(1.0)


def test_predict_dim_mismatch():
    m = train_forest(HAND_X, HAND_Y, ForestConfig(n_trees=2, seed=0))
    with pytest.raises(ValueError):
        predict_proba(m, np.zeros(5))


def test_single_class_and_empty_errors():
    with pytest.raises(ValueError):
        train_forest(np.ones((3, 2), np.float32), np.array([1, 1, 1]))
    with pytest.raises(ValueError):
        train_forest(np.empty((0, 2), np.float32), np.array([], dtype=np.int8))


def test_bounds_property():
    rng = np.random.default_rng(6)
    X = rng.random((200, 5)).astype(np.float32)
    y = (rng.random(200) < 0.3).astype(np.int8)
    m = train_forest(X, y, ForestConfig(n_trees=15, seed=7))
    out = predict_proba(m, rng.random((300, 5)).astype(np.float32))
    assert out.min() >= 0.0 and out.max() <= 1.0
    # equals the mean of per-tree outputs
    per_tree = []
    for t in m.trees:
        m1 = ForestModel(config=ForestConfig(n_trees=1), n_features=5, trees=[t])
        per_tree.append(predict_proba(m1, X[:10]))
    assert np.allclose(np.mean(per_tree, axis=0), predict_proba(m, X[:10]), atol=1e-12)


def test_serialization_roundtrip_bit_exact():
    rng = np.random.default_rng(8)
    X = rng.random((150, 7)).astype(np.float32)
    y = (X[:, 0] + 0.2 * rng.random(150) > 0.6).astype(np.int8)
    m = train_forest(X, y, ForestConfig(n_trees=12, seed=9))
    blob = serialize_forest(m)
    back = deserialize_forest(blob)
    probes = rng.random((100, 7)).astype(np.float32)
    p1 = predict_proba(m, probes)
    p2 = predict_proba(back, probes)
    assert np.array_equal(p1, p2)  # bit-exact
    assert serialize_forest(back) == blob


def test_training_determinism():
    rng = np.random.default_rng(10)
    X = rng.random((100, 4)).astype(np.float32)
    y = (rng.random(100) < 0.5).astype(np.int8)
    b1 = serialize_forest(train_forest(X, y, ForestConfig(n_trees=8, seed=11)))
    b2 = serialize_forest(train_forest(X, y, ForestConfig(n_trees=8, seed=11)))
    assert b1 == b2


def test_deserialize_errors():
    with pytest.raises(ForestFormatError):
        deserialize_forest(b"")
    with pytest.raises(ForestFormatError):
        deserialize_forest(b"XXXX" + bytes(20))
    m = train_forest(HAND_X, HAND_Y, ForestConfig(n_trees=2, seed=0))
    blob = serialize_forest(m)
    with pytest.raises(ForestFormatError):
        deserialize_forest(blob[:-5])  # truncation
    with pytest.raises(ForestFormatError):
        deserialize_forest(blob + b"\x00")  # trailing garbage


def test_min_leaf_limits_depth():
    rng = np.random.default_rng(12)
    X = rng.random((64, 3)).astype(np.float32)
    y = (rng.random(64) < 0.5).astype(np.int8)
    big = train_forest(X, y, ForestConfig(n_trees=1, bootstrap=False, min_leaf=32.0, seed=0))
    small = train_forest(X, y, ForestConfig(n_trees=1, bootstrap=False, min_leaf=1.0, seed=0))
    assert len(big.trees[0].feature) < len(small.trees[0].feature)
    # every leaf respects the effective-count floor
    def leaf_weights(tree, X, w):
        node = np.zeros(len(X), dtype=np.int32)
        while (tree.feature[node] >= 0).any():
            live = tree.feature[node] >= 0
            f = tree.feature[node[live]]
            go = X[np.nonzero(live)[0], f] <= tree.threshold[node[live]]
            node[np.nonzero(live)[0]] = np.where(go, tree.left[node[live]], tree.right[node[live]])
        return node
    w = class_weights(y)
    nodes = leaf_weights(big.trees[0], X, w)
    for leaf_id in np.unique(nodes):
        assert w[nodes == leaf_id].sum() * 64 >= 32.0 - 1e-9
