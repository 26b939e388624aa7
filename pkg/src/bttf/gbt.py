"""Newton-boosted regression trees with an L1 penalty on leaf weights.

Squared loss uses the per-sample convention ``0.5 * (pred - y)**2`` so the
gradient is ``pred - y`` and the Hessian is 1. Each leaf weight minimizes

    G*w + 0.5*(H + reg_l2)*w**2 + reg_l1*|w|

whose solution is a soft-thresholded Newton step. Trees are grown depth-first
by exact greedy search over midpoints of sorted distinct feature values.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError, ContractError, DataError, ShapeError

FORMAT_TAG = "bttf-gbt-v1"
TIE_RTOL = 1e-12


@dataclass
class GBTConfig:
    n_rounds: int = 100
    max_depth: int = 6
    eta: float = 0.3
    reg_l1: float = 1.0
    reg_l2: float = 0.0
    min_gain: float = 0.0
    min_leaf: int = 1
    seed: int = 0

    def validate(self):
        bad = []
        if not isinstance(self.n_rounds, int) or self.n_rounds < 1:
            bad.append("n_rounds")
        if not isinstance(self.max_depth, int) or self.max_depth < 0:
            bad.append("max_depth")
        if not 0.0 < self.eta <= 1.0:
            bad.append("eta")
        if not self.reg_l1 >= 0:
            bad.append("reg_l1")
        if not self.reg_l2 >= 0:
            bad.append("reg_l2")
        if not self.min_gain >= 0:
            bad.append("min_gain")
        if not isinstance(self.min_leaf, int) or self.min_leaf < 1:
            bad.append("min_leaf")
        if bad:
            raise ConfigError(f"invalid gbt config fields: {', '.join(bad)}", bad)
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown gbt config fields: {', '.join(unknown)}", unknown)
        return cls(**d)


@dataclass
class RegressionTree:
    """Flat node arrays; ``feature[i] == -1`` marks a leaf holding ``value[i]``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_leaves(self):
        return int(np.sum(self.feature < 0))

    @property
    def n_internal(self):
        return int(np.sum(self.feature >= 0))

    def leaf_weights(self):
        return self.value[self.feature < 0]

    def apply(self, X):
        """Leaf node index for every row of ``X`` (``x <= threshold`` goes left)."""
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while np.any(active):
            rows = np.flatnonzero(active)
            cur = node[rows]
            go_left = X[rows, self.feature[cur]] <= self.threshold[cur]
            node[rows] = np.where(go_left, self.left[cur], self.right[cur])
            active = self.feature[node] >= 0
        return node

    def predict(self, X):
        return self.value[self.apply(X)]

    def to_dict(self):
        nodes = []
        for i in range(len(self.feature)):
            if self.feature[i] < 0:
                nodes.append({"leaf": float(self.value[i])})
            else:
                nodes.append({"feature": int(self.feature[i]), "threshold": float(self.threshold[i]),
                              "left": int(self.left[i]), "right": int(self.right[i])})
        return {"nodes": nodes}

    @classmethod
    def from_dict(cls, d):
        n = len(d["nodes"])
        feature = np.full(n, -1, dtype=np.int64)
        threshold = np.zeros(n)
        left = np.full(n, -1, dtype=np.int64)
        right = np.full(n, -1, dtype=np.int64)
        value = np.zeros(n)
        for i, node in enumerate(d["nodes"]):
            if "leaf" in node:
                value[i] = node["leaf"]
            else:
                feature[i] = node["feature"]
                threshold[i] = node["threshold"]
                left[i] = node["left"]
                right[i] = node["right"]
        return cls(feature, threshold, left, right, value)


@dataclass
class BoostedTreeModel:
    base_score: float
    trees: list
    config: GBTConfig
    feature_names: list = field(default_factory=list)

    @property
    def n_features(self):
        return len(self.feature_names)

    def predict(self, X):
        return predict_gbt_matrix(self, X)


# --------------------------------------------------------------------------
# Newton statistics
# --------------------------------------------------------------------------


def grad_hess_squared(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} differ")
    return pred - target, np.ones_like(pred)


def _soft(G, reg_l1):
    return np.sign(G) * np.maximum(np.abs(G) - reg_l1, 0.0)


def leaf_weight(G, H, reg_l1=0.0, reg_l2=0.0):
    if not H > 0:
        raise ContractError(f"degenerate leaf: Hessian sum {H} <= 0")
    return float(-_soft(G, reg_l1) / (H + reg_l2))


def leaf_score(G, H, reg_l1=0.0, reg_l2=0.0):
    """Negated optimal leaf objective: ``soft(G)**2 / (2 (H + reg_l2))``."""
    s = _soft(G, reg_l1)
    return s * s / (2.0 * (H + reg_l2))


def split_gain(parent, left, right, reg_l1=0.0, reg_l2=0.0, min_gain=0.0):
    """Objective reduction from splitting ``parent`` into ``left``/``right``.

    Returns ``(gain, accepted)`` with ``accepted = gain > min_gain``.
    """
    (Gp, Hp), (Gl, Hl), (Gr, Hr) = parent, left, right
    scale = max(1.0, abs(Gp), abs(Hp))
    if abs(Gl + Gr - Gp) > 1e-9 * scale or abs(Hl + Hr - Hp) > 1e-9 * scale:
        raise ContractError("left and right statistics do not sum to the parent")
    gain = float(leaf_score(Gl, Hl, reg_l1, reg_l2) + leaf_score(Gr, Hr, reg_l1, reg_l2)
                 - leaf_score(Gp, Hp, reg_l1, reg_l2))
    return gain, gain > min_gain


def _midpoint(a, b):
    mid = a + (b - a) / 2.0
    return np.where(mid < b, mid, a)


def best_split(X, g, h, cfg: GBTConfig):
    """Exact greedy search. Returns ``(gain, feature, threshold)`` or None.

    Ties go to the lowest feature index, then the lowest threshold.
    """
    n, D = X.shape
    if n < 2 * cfg.min_leaf:
        return None
    order = np.argsort(X, axis=0, kind="stable")
    xs = np.take_along_axis(X, order, axis=0)
    gs = g[order]
    hs = h[order]
    GL = np.cumsum(gs, axis=0)[:-1]
    HL = np.cumsum(hs, axis=0)[:-1]
    G, H = g.sum(), h.sum()
    GR = G - GL
    HR = H - HL
    valid = xs[1:] > xs[:-1]
    left_n = np.arange(1, n)[:, None]
    valid &= (left_n >= cfg.min_leaf) & (n - left_n >= cfg.min_leaf)
    if not np.any(valid):
        return None
    gain = (leaf_score(GL, HL, cfg.reg_l1, cfg.reg_l2) + leaf_score(GR, HR, cfg.reg_l1, cfg.reg_l2)
            - leaf_score(G, H, cfg.reg_l1, cfg.reg_l2))
    gain = np.where(valid, gain, -np.inf)
    top = np.max(gain)
    # equal partitions reached via different sort orders differ by rounding only
    tied = gain >= top - TIE_RTOL * max(1.0, abs(top))
    f = int(np.flatnonzero(tied.any(axis=0))[0])
    i = int(np.flatnonzero(tied[:, f])[0])
    best = gain[i, f]
    if not best > cfg.min_gain:
        return None
    return float(best), f, float(_midpoint(xs[i, f], xs[i + 1, f]))


def build_tree(X, g, h, cfg: GBTConfig):
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(len(X)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        gi, hi = g[idx], h[idx]
        split = best_split(X[idx], gi, hi, cfg) if depth < cfg.max_depth else None
        if split is None:
            value[node] = leaf_weight(gi.sum(), hi.sum(), cfg.reg_l1, cfg.reg_l2)
            continue
        _, f, t = split
        mask = X[idx, f] <= t
        lnode, rnode = new_node(), new_node()
        feature[node], threshold[node], left[node], right[node] = f, t, lnode, rnode
        # right pushed first so the left subtree is expanded (and numbered) first
        stack.append((rnode, idx[~mask], depth + 1))
        stack.append((lnode, idx[mask], depth + 1))
    return RegressionTree(np.array(feature, dtype=np.int64), np.array(threshold),
                          np.array(left, dtype=np.int64), np.array(right, dtype=np.int64), np.array(value))


def _check_matrix(X, y=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"features must be a matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite feature values")
    if y is not None:
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if len(y) != len(X):
            raise ShapeError(f"{len(X)} feature rows but {len(y)} targets")
        if not np.all(np.isfinite(y)):
            raise DataError("non-finite target values")
    return X, y


def fit_gbt(features, targets, cfg: GBTConfig = GBTConfig(), feature_names=None, on_round=None):
    """Fit ``cfg.n_rounds`` trees on squared loss.

    ``on_round(round_index, model_so_far, train_pred)`` is called after each
    tree, mainly for objective tracing.
    """
    cfg.validate()
    X, y = _check_matrix(features, targets)
    if len(X) < 2:
        raise DataError("need at least 2 training rows")
    names = list(feature_names) if feature_names is not None else [f"f{i}" for i in range(X.shape[1])]
    if len(names) != X.shape[1]:
        raise ShapeError("feature_names length does not match feature count")
    base = float(np.mean(y))
    pred = np.full(len(y), base)
    model = BoostedTreeModel(base, [], cfg, names)
    for r in range(cfg.n_rounds):
        g, h = grad_hess_squared(pred, y)
        tree = build_tree(X, g, h, cfg)
        model.trees.append(tree)
        pred = pred + cfg.eta * tree.predict(X)
        if on_round is not None:
            on_round(r, model, pred)
    return model


def predict_gbt_matrix(model: BoostedTreeModel, X):
    X, _ = _check_matrix(X)
    if X.shape[1] != model.n_features:
        raise ShapeError(f"model expects {model.n_features} features, got {X.shape[1]}")
    pred = np.full(len(X), model.base_score)
    for tree in model.trees:
        pred = pred + model.config.eta * tree.predict(X)
    return pred


def predict_gbt(model: BoostedTreeModel, x):
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return float(predict_gbt_matrix(model, x)[0])


def training_objective(model: BoostedTreeModel, X, y):
    """Squared-error loss plus L1/L2 penalties on every applied leaf value.

    ``sum 0.5*(pred - y)**2 + reg_l1 * sum|eta*w| + 0.5*reg_l2 * sum (eta*w)**2``.
    Dividing by ``N/2`` gives the mean-squared-error form with an L1 weight of
    ``2*reg_l1/N``.
    """
    pred = predict_gbt_matrix(model, X)
    y = np.asarray(y, dtype=np.float64)
    eta = model.config.eta
    leaves = np.concatenate([t.leaf_weights() for t in model.trees]) * eta if model.trees else np.zeros(0)
    return float(0.5 * np.sum((pred - y) ** 2) + model.config.reg_l1 * np.sum(np.abs(leaves))
                 + 0.5 * model.config.reg_l2 * np.sum(leaves ** 2))


def feature_importance(model: BoostedTreeModel):
    """Split count per feature name (the F-score)."""
    counts = np.zeros(model.n_features, dtype=np.int64)
    for tree in model.trees:
        f = tree.feature[tree.feature >= 0]
        counts += np.bincount(f, minlength=model.n_features)
    return {name: int(c) for name, c in zip(model.feature_names, counts)}


def ranked_importance(importance: dict, feature_names=None):
    """``(name, score)`` sorted by score descending, ties by feature position."""
    names = list(feature_names) if feature_names is not None else list(importance)
    pos = {n: i for i, n in enumerate(names)}
    return sorted(importance.items(), key=lambda kv: (-kv[1], pos[kv[0]]))


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------


def gbt_to_dict(model: BoostedTreeModel):
    return {
        "format": FORMAT_TAG,
        "config": asdict(model.config),
        "base_score": model.base_score,
        "feature_names": list(model.feature_names),
        "trees": [t.to_dict() for t in model.trees],
    }


def gbt_from_dict(d):
    if d.get("format") != FORMAT_TAG:
        raise ContractError(f"not a {FORMAT_TAG} document")
    return BoostedTreeModel(float(d["base_score"]), [RegressionTree.from_dict(t) for t in d["trees"]],
                            GBTConfig.from_dict(d["config"]), list(d["feature_names"]))


def save_gbt(model: BoostedTreeModel, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(gbt_to_dict(model), fh, sort_keys=True)
        fh.write("\n")


def load_gbt(path):
    with open(path, encoding="utf-8") as fh:
        return gbt_from_dict(json.load(fh))
