"""Random forest (bagged CART) used as reward scorer and evaluation learner."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels

_SEED_BOUND = 2**63


@dataclass(frozen=True)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self):
        return int(self.feature.shape[0])

    def apply(self, X, backend=None):
        kern = kernels.get_backend(backend)
        return kern.apply_tree(X, self.feature, self.threshold, self.left, self.right)


class TreeEnsemble:
    """Bootstrap ensemble of unpruned trees.

    Args:
        n_trees: number of trees (100 matches the scorer configuration).
        criterion: ``"gini"`` for classification, ``"mse"`` for regression.
        max_features: ``"sqrt"``, ``"all"`` or an int.
        max_depth: ``None`` grows until leaves are pure.
        seed: root seed; fixes bootstrap draws and per-node feature sampling.
        backend: force ``"compiled"`` or ``"python"`` kernels (default: auto).
    """

    def __init__(self, n_trees=100, criterion="gini", max_features="sqrt",
                 max_depth=None, min_samples_split=2, bootstrap=True, seed=0,
                 backend=None):
        if criterion not in ("gini", "mse"):
            raise ValueError(f"unknown criterion {criterion!r}")
        if n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        self.n_trees = n_trees
        self.criterion = criterion
        self.max_features = max_features
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.bootstrap = bootstrap
        self.seed = seed
        self.backend = backend
        self.trees: list[Tree] = []
        self.classes_ = None

    def _n_features(self, p):
        if self.max_features == "sqrt":
            return max(1, int(math.sqrt(p)))
        if self.max_features in ("all", None):
            return p
        return max(1, min(p, int(self.max_features)))

    def fit(self, X, y):
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ValueError("X must be a non-empty 2-d array")
        if not np.all(np.isfinite(X)):
            raise ValueError("X contains non-finite values")
        y = np.asarray(y)
        if y.shape[0] != X.shape[0]:
            raise ValueError("X and y lengths differ")
        if self.criterion == "gini":
            self.classes_, codes = np.unique(y, return_inverse=True)
            if self.classes_.shape[0] < 2:
                raise ValueError("classification needs at least two classes")
            target = codes.astype(np.float64)
            n_classes = int(self.classes_.shape[0])
        else:
            target = np.ascontiguousarray(y, dtype=np.float64)
            n_classes = 0

        kern = kernels.get_backend(self.backend)
        rng = np.random.default_rng(self.seed)
        n = X.shape[0]
        mf = self._n_features(X.shape[1])
        depth = -1 if self.max_depth is None else int(self.max_depth)
        self.trees = []
        for _ in range(self.n_trees):
            tree_seed = int(rng.integers(0, _SEED_BOUND))
            if self.bootstrap:
                samples = rng.integers(0, n, size=n).astype(np.int64)
            else:
                samples = np.arange(n, dtype=np.int64)
            parts = kern.build_tree(X, target, samples, n_classes, mf,
                                    tree_seed, self.min_samples_split, depth)
            self.trees.append(Tree(*parts))
        return self

    def _leaf_values(self, X):
        if not self.trees:
            raise RuntimeError("ensemble is not fitted")
        X = np.ascontiguousarray(X, dtype=np.float64)
        out = np.zeros((X.shape[0], self.trees[0].value.shape[1]))
        for tree in self.trees:
            out += tree.value[tree.apply(X, self.backend)]
        return out / len(self.trees)

    def predict_proba(self, X):
        """Class-probability matrix, columns ordered as ``classes_``."""
        if self.criterion != "gini":
            raise RuntimeError("predict_proba needs a classification ensemble")
        return self._leaf_values(X)

    def predict(self, X):
        vals = self._leaf_values(X)
        if self.criterion == "gini":
            return self.classes_[np.argmax(vals, axis=1)]
        return vals[:, 0]


def roc_auc(y_true, scores):
    """Area under the ROC curve via the rank-sum statistic (ties get half credit)."""
    from scipy.stats import rankdata

    y_true = np.asarray(y_true).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(y_true.sum())
    n_neg = int(y_true.shape[0] - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative examples")
    ranks = rankdata(scores)
    return float((ranks[y_true].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
