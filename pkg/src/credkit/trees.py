"""Bagged regression trees for the latent-parameter regressor h(.).

Small array-based CART: variance-reduction splits, bootstrap resampling,
per-node feature subsampling. Written against numpy only so that fitted
ensembles serialize to plain lists and round-trip bit for bit; the seed and
a fixed traversal order make refits reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError

N_TREES = 200
MAX_DEPTH = 8
MIN_LEAF = 5


@dataclass
class _Tree:
    # parallel node arrays; feature == -1 marks a leaf
    feature: list = field(default_factory=list)
    threshold: list = field(default_factory=list)
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)
    value: list = field(default_factory=list)

    def add_leaf(self, mean: float) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(float(mean))
        return len(self.feature) - 1

    def add_split(self, feat: int, thr: float) -> int:
        self.feature.append(int(feat))
        self.threshold.append(float(thr))
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        return len(self.feature) - 1


def _best_split(X, y, rows, feats, min_leaf):
    """(feature, threshold, score) with max SSE reduction, or None."""
    n = rows.size
    ysub = y[rows]
    total = float(np.sum(ysub))
    total_sq = float(np.sum(ysub * ysub))
    sse_all = total_sq - total * total / n
    best = None
    best_score = 1e-12  # require a strictly positive reduction
    for f in feats:
        xs = X[rows, f]
        order = np.argsort(xs, kind="stable")
        xv = xs[order]
        yv = ysub[order]
        csum = np.cumsum(yv)
        csq = np.cumsum(yv * yv)
        idx = np.arange(min_leaf, n - min_leaf + 1)
        if idx.size == 0:
            continue
        valid = xv[idx] > xv[idx - 1]
        idx = idx[valid]
        if idx.size == 0:
            continue
        left_n = idx.astype(float)
        left_sum = csum[idx - 1]
        left_sq = csq[idx - 1]
        sse_left = left_sq - left_sum * left_sum / left_n
        right_n = n - left_n
        right_sum = total - left_sum
        sse_right = (total_sq - left_sq) - right_sum * right_sum / right_n
        score = sse_all - (sse_left + sse_right)
        k = int(np.argmax(score))
        if score[k] > best_score:
            best_score = float(score[k])
            cut = 0.5 * (xv[idx[k] - 1] + xv[idx[k]])
            best = (int(f), float(cut), best_score)
    return best


def _grow(tree, X, y, rows, depth, max_depth, min_leaf, k_feats, rng):
    n = rows.size
    if depth >= max_depth or n < 2 * min_leaf:
        return tree.add_leaf(np.mean(y[rows]))
    feats = rng.choice(X.shape[1], size=k_feats, replace=False)
    split = _best_split(X, y, rows, feats, min_leaf)
    if split is None:
        return tree.add_leaf(np.mean(y[rows]))
    f, thr, _ = split
    node = tree.add_split(f, thr)
    mask = X[rows, f] <= thr
    tree.left[node] = _grow(tree, X, y, rows[mask], depth + 1,
                            max_depth, min_leaf, k_feats, rng)
    tree.right[node] = _grow(tree, X, y, rows[~mask], depth + 1,
                             max_depth, min_leaf, k_feats, rng)
    return node


def _tree_predict(tree, X):
    feature = np.asarray(tree.feature)
    threshold = np.asarray(tree.threshold)
    left = np.asarray(tree.left)
    right = np.asarray(tree.right)
    value = np.asarray(tree.value)
    idx = np.zeros(X.shape[0], dtype=np.int64)
    active = feature[idx] >= 0
    while np.any(active):
        rows = np.nonzero(active)[0]
        nodes = idx[rows]
        go_left = X[rows, feature[nodes]] <= threshold[nodes]
        idx[rows[go_left]] = left[nodes[go_left]]
        idx[rows[~go_left]] = right[nodes[~go_left]]
        active = feature[idx] >= 0
    return value[idx]


@dataclass
class BaggedTrees:
    """Bootstrap-aggregated regression trees; predict = mean over trees."""

    n_trees: int = N_TREES
    max_depth: int = MAX_DEPTH
    min_leaf: int = MIN_LEAF
    feature_subsample: str = "sqrt"  # "sqrt" or "all"
    seed: int = 0
    trees: list = field(default_factory=list)
    n_features: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.min_leaf < 1:
            raise ParameterError("tree hyperparameters must be positive")
        if self.feature_subsample not in ("sqrt", "all"):
            raise ParameterError("feature_subsample must be 'sqrt' or 'all'")

    def _k_feats(self, p: int) -> int:
        if self.feature_subsample == "all":
            return p
        return max(1, int(round(np.sqrt(p))))

    def fit(self, X, y) -> "BaggedTrees":
        X = np.ascontiguousarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise ParameterError("X must be (n, p) with matching y")
        if X.shape[0] < 2:
            raise ParameterError("need at least 2 rows to fit")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ParameterError("training data must be finite")
        n, p = X.shape
        self.n_features = p
        k = self._k_feats(p)
        self.trees = []
        children = np.random.SeedSequence(self.seed).spawn(self.n_trees)
        for child in children:
            rng = np.random.default_rng(child)
            rows = rng.integers(0, n, size=n)
            tree = _Tree()
            _grow(tree, X, y, rows, 0, self.max_depth, self.min_leaf, k, rng)
            self.trees.append(tree)
        return self

    def predict(self, X) -> np.ndarray:
        if not self.trees:
            raise ParameterError("ensemble is not fitted")
        X = np.ascontiguousarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ParameterError("feature count mismatch")
        out = np.zeros(X.shape[0])
        for tree in self.trees:
            out += _tree_predict(tree, X)
        return out / len(self.trees)

    def to_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "min_leaf": self.min_leaf,
            "feature_subsample": self.feature_subsample,
            "seed": self.seed,
            "n_features": self.n_features,
            "trees": [
                {
                    "feature": list(t.feature),
                    "threshold": [float(v) for v in t.threshold],
                    "left": list(t.left),
                    "right": list(t.right),
                    "value": [float(v) for v in t.value],
                }
                for t in self.trees
            ],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "BaggedTrees":
        out = cls(
            n_trees=int(payload["n_trees"]),
            max_depth=int(payload["max_depth"]),
            min_leaf=int(payload["min_leaf"]),
            feature_subsample=str(payload["feature_subsample"]),
            seed=int(payload["seed"]),
        )
        out.n_features = int(payload["n_features"])
        for spec in payload["trees"]:
            tree = _Tree(
                feature=[int(v) for v in spec["feature"]],
                threshold=[float(v) for v in spec["threshold"]],
                left=[int(v) for v in spec["left"]],
                right=[int(v) for v in spec["right"]],
                value=[float(v) for v in spec["value"]],
            )
            out.trees.append(tree)
        return out
