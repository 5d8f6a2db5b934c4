"""Isolation forest, from scratch.

Trees are grown on subsamples drawn without replacement: each node picks a
random feature with spread and a uniform split between that feature's
min and max, down to a height limit of ceil(log2(subsample)). Scoring uses
the standard path-length normalisation c(n) = 2*H(n-1) - 2*(n-1)/n with the
harmonic number approximated by ln(n) + Euler-Mascheroni, and maps the
average path length E[h(x)] to s(x) = 2^(-E[h(x)]/c(subsample)) in (0, 1).

The anomaly threshold is calibrated as a quantile (default 0.995) of the
training scores on clean data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from aquachain.ids.features import Normalizer

EULER_GAMMA = 0.5772156649015329


def average_path_correction(n: int) -> float:
    """Expected unsuccessful-search path length in a random binary tree."""
    if n <= 1:
        return 0.0
    if n == 2:
        return 1.0
    harmonic = math.log(n - 1) + EULER_GAMMA
    return 2.0 * harmonic - 2.0 * (n - 1) / n


@dataclass
class TreeNode:
    size: int
    feature: Optional[int] = None
    threshold: Optional[float] = None
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"size": self.size}
        return {"size": self.size, "feature": self.feature,
                "threshold": self.threshold,
                "left": self.left.to_dict(), "right": self.right.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "TreeNode":
        if "feature" not in doc:
            return cls(size=doc["size"])
        return cls(size=doc["size"], feature=doc["feature"],
                   threshold=doc["threshold"],
                   left=cls.from_dict(doc["left"]),
                   right=cls.from_dict(doc["right"]))


@dataclass
class IsolationForestModel:
    trees: list[TreeNode]
    n_trees: int
    subsample_size: int
    theta: float
    normalization: Normalizer

    def path_length(self, x: np.ndarray, tree: TreeNode) -> float:
        depth = 0
        node = tree
        while not node.is_leaf:
            node = node.left if x[node.feature] < node.threshold else node.right
            depth += 1
        return depth + average_path_correction(node.size)

    def score(self, x_raw: np.ndarray) -> float:
        """Anomaly score for one raw feature vector."""
        x = np.asarray(x_raw, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise ValueError("feature vector contains non-finite values")
        z = self.normalization.transform(x.reshape(1, -1))[0]
        mean_path = sum(self.path_length(z, t) for t in self.trees) / len(self.trees)
        return 2.0 ** (-mean_path / average_path_correction(self.subsample_size))

    def score_many(self, X_raw: np.ndarray) -> np.ndarray:
        return np.array([self.score(x) for x in np.asarray(X_raw, dtype=np.float64)])

    def to_dict(self) -> dict:
        return {
            "kind": "isolation_forest",
            "n_trees": self.n_trees,
            "subsample_size": self.subsample_size,
            "theta": self.theta,
            "normalization": self.normalization.to_dict(),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "IsolationForestModel":
        return cls(trees=[TreeNode.from_dict(t) for t in doc["trees"]],
                   n_trees=doc["n_trees"], subsample_size=doc["subsample_size"],
                   theta=doc["theta"],
                   normalization=Normalizer.from_dict(doc["normalization"]))


def _grow_tree(X: np.ndarray, rng: np.random.Generator, depth: int,
               limit: int) -> TreeNode:
    n = len(X)
    if n <= 1 or depth >= limit:
        return TreeNode(size=n)
    lo = X.min(axis=0)
    hi = X.max(axis=0)
    splittable = np.flatnonzero(hi > lo)
    if splittable.size == 0:  # all points identical
        return TreeNode(size=n)
    feature = int(splittable[rng.integers(0, splittable.size)])
    threshold = float(rng.uniform(lo[feature], hi[feature]))
    mask = X[:, feature] < threshold
    if not mask.any() or mask.all():
        # draw landed exactly on the boundary; cut below the max instead
        threshold = float(hi[feature])
        mask = X[:, feature] < threshold
    return TreeNode(size=n, feature=feature, threshold=threshold,
                    left=_grow_tree(X[mask], rng, depth + 1, limit),
                    right=_grow_tree(X[~mask], rng, depth + 1, limit))


def train_iforest(training: np.ndarray, n_trees: int = 100, subsample: int = 256,
                  quantile: float = 0.995, seed: int = 0) -> IsolationForestModel:
    """Fit the forest on clean data and calibrate theta.

    ``subsample`` falls back to the dataset size when the data is smaller.
    """
    X = np.asarray(training, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("training set must be a nonempty 2-d array")
    if not np.all(np.isfinite(X)):
        raise ValueError("training set contains non-finite values")
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")

    normalization = Normalizer.fit(X)
    Z = normalization.transform(X)
    psi = min(subsample, len(Z))
    limit = max(1, math.ceil(math.log2(psi))) if psi > 1 else 1
    rng = np.random.default_rng([seed, 0x1F0557])

    trees = []
    for _ in range(n_trees):
        idx = rng.choice(len(Z), size=psi, replace=False)
        trees.append(_grow_tree(Z[idx], rng, depth=0, limit=limit))

    model = IsolationForestModel(trees=trees, n_trees=n_trees,
                                 subsample_size=psi, theta=1.0,
                                 normalization=normalization)
    scores = model.score_many(X)
    model.theta = float(np.quantile(scores, quantile))
    return model


def if_score(model: IsolationForestModel, x: Sequence[float] | np.ndarray) -> float:
    return model.score(np.asarray(x, dtype=np.float64))
