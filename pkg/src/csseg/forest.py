"""Random forest binary classifier with class-balanced sample weighting.

Both classes are reweighted so each class's total weight is the same
constant, which makes leaf probabilities invariant to class imbalance.
Used for the patch labeler and for every superpixel-level classifier.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"CSRF"
VERSION = 1
LEAF = 0xFFFF

_NODE_DTYPE = np.dtype([("feature", "<u2"), ("value", "<f4"),
                        ("left", "<u4"), ("right", "<u4")])


class ForestFormatError(ValueError):
    """Raised on bad magic, version mismatch or truncated model bytes."""


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 50
    min_leaf: float | None = None      # effective-count units; None -> max(1, 0.2% of n)
    max_features: int | None = None    # None -> ceil(sqrt(d))
    max_depth: int | None = None
    bootstrap: bool = True
    seed: int = 0


@dataclass
class Tree:
    feature: np.ndarray    # int32; -1 marks a leaf
    threshold: np.ndarray  # float32 split values (0 at leaves)
    left: np.ndarray       # int32 child ids
    right: np.ndarray
    prob: np.ndarray       # float32 positive-class probability (0 at internals)


@dataclass
class ForestModel:
    config: ForestConfig
    n_features: int
    trees: list[Tree] = field(default_factory=list)


def class_weights(y: np.ndarray) -> np.ndarray:
    """Per-sample weights 1/(2 * class count): each class sums to 0.5."""
    y = np.asarray(y)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present")
    w = np.where(y == 1, 1.0 / (2.0 * n_pos), 1.0 / (2.0 * n_neg))
    return w


def best_split(X: np.ndarray, y: np.ndarray, w: np.ndarray,
               feature_indices: np.ndarray, min_leaf_eff: float, n_total: int):
    """Best weighted-Gini split over the given features.

    Thresholds are float32 midpoints of consecutive distinct values; ties in
    gain resolve to the lowest feature index, then the lowest threshold.
    Returns (feature, threshold, gain) or None if no valid split exists.
    """
    w_pos_tot = float((w * y).sum())
    w_neg_tot = float((w * (1 - y)).sum())
    w_tot = w_pos_tot + w_neg_tot
    parent_gini = 1.0 - (w_pos_tot / w_tot) ** 2 - (w_neg_tot / w_tot) ** 2
    best = None
    for f in np.sort(feature_indices):
        v = X[:, f]
        order = np.argsort(v, kind="stable")
        vs = v[order].astype(np.float32)
        wy = (w * y)[order]
        wn = (w * (1 - y))[order]
        cut = np.nonzero(vs[:-1] < vs[1:])[0]
        if cut.size == 0:
            continue
        thr = ((vs[cut].astype(np.float64) + vs[cut + 1]) / 2.0).astype(np.float32)
        valid = thr < vs[cut + 1]  # float32 rounding may collapse onto the right value
        cum_p = np.cumsum(wy)
        cum_n = np.cumsum(wn)
        wl_p, wl_n = cum_p[cut], cum_n[cut]
        wr_p, wr_n = w_pos_tot - wl_p, w_neg_tot - wl_n
        wl, wr = wl_p + wl_n, wr_p + wr_n
        valid &= (wl * n_total >= min_leaf_eff) & (wr * n_total >= min_leaf_eff)
        if not valid.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            gl = 1.0 - (wl_p / wl) ** 2 - (wl_n / wl) ** 2
            gr = 1.0 - (wr_p / wr) ** 2 - (wr_n / wr) ** 2
        impurity = (wl * gl + wr * gr) / w_tot
        gain = np.where(valid, parent_gini - impurity, -np.inf)
        j = int(np.argmax(gain))  # first max -> lowest threshold
        if gain[j] > 0 and (best is None or gain[j] > best[2]):
            best = (int(f), np.float32(thr[j]), float(gain[j]))
    return best


def _leaf_prob(y, w) -> np.float32:
    return np.float32(float((w * y).sum() / w.sum()))


def _build_tree(X, y, w, rng, config: ForestConfig, min_leaf_eff: float, n_total: int) -> Tree:
    d = X.shape[1]
    mtry = config.max_features or int(np.ceil(np.sqrt(d)))
    mtry = min(mtry, d)
    feature, threshold, left, right, prob = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(np.float32(0))
        left.append(-1)
        right.append(-1)
        prob.append(np.float32(0))
        return len(feature) - 1

    # Preorder build: the left branch is fully expanded before the right, so
    # the per-node feature draws are reproducible.
    stack = [(new_node(), np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        ys, ws = y[idx], w[idx]
        pure = ys.min() == ys.max()
        depth_stop = config.max_depth is not None and depth >= config.max_depth
        too_small = ws.sum() * n_total < 2.0 * min_leaf_eff
        split = None
        if not (pure or depth_stop or too_small):
            feats = np.sort(rng.choice(d, size=mtry, replace=False))
            split = best_split(X[idx], ys, ws, feats, min_leaf_eff, n_total)
        if split is None:
            prob[node] = _leaf_prob(ys, ws)
            continue
        f, thr, _ = split
        go_left = X[idx, f] <= thr
        feature[node] = f
        threshold[node] = thr
        l_id, r_id = new_node(), new_node()
        left[node], right[node] = l_id, r_id
        stack.append((r_id, idx[~go_left], depth + 1))
        stack.append((l_id, idx[go_left], depth + 1))
    return Tree(feature=np.array(feature, dtype=np.int32),
                threshold=np.array(threshold, dtype=np.float32),
                left=np.array(left, dtype=np.int32),
                right=np.array(right, dtype=np.int32),
                prob=np.array(prob, dtype=np.float32))


def train_forest(X: np.ndarray, y: np.ndarray, config: ForestConfig = ForestConfig()) -> ForestModel:
    """Bootstrap-aggregated weighted-Gini trees; deterministic for a seed.

    The seed controls both the per-tree bootstrap draws and the per-split
    feature subsets. Class weights come from the full training set, so
    bootstrap copies of a sample carry its original class weight.
    """
    X = np.ascontiguousarray(X, dtype=np.float32)
    y = np.asarray(y).astype(np.int8)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("X must be a non-empty 2-D matrix")
    if len(X) != len(y):
        raise ValueError("X and y length mismatch")
    if config.n_trees < 1:
        raise ValueError("need at least one tree")
    n, d = X.shape
    w = class_weights(y)  # raises on single-class input
    min_leaf_eff = config.min_leaf if config.min_leaf is not None else max(1.0, 0.002 * n)

    seeds = np.random.SeedSequence(config.seed).spawn(config.n_trees)
    trees = []
    for t in range(config.n_trees):
        rng = np.random.default_rng(seeds[t])
        idx = rng.integers(0, n, size=n) if config.bootstrap else np.arange(n)
        trees.append(_build_tree(X[idx], y[idx], w[idx], rng, config, min_leaf_eff, n))
    return ForestModel(config=config, n_features=d, trees=trees)


def predict_proba(model: ForestModel, x: np.ndarray) -> np.ndarray | float:
    """Mean over trees of the leaf positive-class probability."""
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got {X.shape[1]}")
    n = len(X)
    acc = np.zeros(n, dtype=np.float64)
    rows = np.arange(n)
    for tree in model.trees:
        node = np.zeros(n, dtype=np.int32)
        while True:
            f = tree.feature[node]
            live = f >= 0
            if not live.any():
                break
            r = rows[live]
            nf = f[live]
            go_left = X[r, nf] <= tree.threshold[node[live]]
            node[r] = np.where(go_left, tree.left[node[live]], tree.right[node[live]])
        acc += tree.prob[node].astype(np.float64)
    out = acc / len(model.trees)
    return float(out[0]) if single else out


def serialize_forest(model: ForestModel) -> bytes:
    cfg = {
        "n_trees": model.config.n_trees,
        "min_leaf": model.config.min_leaf,
        "max_features": model.config.max_features,
        "max_depth": model.config.max_depth,
        "bootstrap": model.config.bootstrap,
        "seed": model.config.seed,
        "n_features": model.n_features,
    }
    blob = json.dumps(cfg, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    for tree in model.trees:
        n = len(tree.feature)
        rec = np.empty(n, dtype=_NODE_DTYPE)
        is_leaf = tree.feature < 0
        rec["feature"] = np.where(is_leaf, LEAF, tree.feature).astype(np.uint16)
        rec["value"] = np.where(is_leaf, tree.prob, tree.threshold)
        rec["left"] = np.where(is_leaf, 0, tree.left).astype(np.uint32)
        rec["right"] = np.where(is_leaf, 0, tree.right).astype(np.uint32)
        parts.append(struct.pack("<I", n))
        parts.append(rec.tobytes())
    return b"".join(parts)


def deserialize_forest(data: bytes) -> ForestModel:
    if len(data) < 12 or data[:4] != MAGIC:
        raise ForestFormatError("bad magic: not a forest model")
    version, blob_len = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ForestFormatError(f"unsupported version {version}")
    off = 12
    if off + blob_len > len(data):
        raise ForestFormatError("truncated config block")
    cfg = json.loads(data[off:off + blob_len])
    off += blob_len
    config = ForestConfig(n_trees=cfg["n_trees"], min_leaf=cfg["min_leaf"],
                          max_features=cfg["max_features"], max_depth=cfg["max_depth"],
                          bootstrap=cfg["bootstrap"], seed=cfg["seed"])
    trees = []
    for _ in range(config.n_trees):
        if off + 4 > len(data):
            raise ForestFormatError("truncated tree header")
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        nbytes = n * _NODE_DTYPE.itemsize
        if off + nbytes > len(data):
            raise ForestFormatError("truncated tree nodes")
        rec = np.frombuffer(data[off:off + nbytes], dtype=_NODE_DTYPE)
        off += nbytes
        is_leaf = rec["feature"] == LEAF
        trees.append(Tree(
            feature=np.where(is_leaf, -1, rec["feature"].astype(np.int32)),
            threshold=np.where(is_leaf, 0, rec["value"]).astype(np.float32),
            left=rec["left"].astype(np.int32),
            right=rec["right"].astype(np.int32),
            prob=np.where(is_leaf, rec["value"], 0).astype(np.float32)))
    if off != len(data):
        raise ForestFormatError("trailing bytes after last tree")
    return ForestModel(config=config, n_features=cfg["n_features"], trees=trees)


def save_forest(model: ForestModel, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_forest(model))


def load_forest(path) -> ForestModel:
    with open(path, "rb") as f:
        return deserialize_forest(f.read())
