"""Breiman random forest over the compiled CART trees.

Per-tree randomness comes from ``SeedSequence(master_seed).spawn(n_trees)``,
so a forest is a pure function of its inputs and seed, and results do not
depend on the number of worker threads.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import cart
from .cart import RegressionTree, TreeError, _as_seed_sequence, _check_rows

log = logging.getLogger(__name__)

NODE_FIELDS = ("feature", "threshold", "left", "right", "value", "leaf_id", "gain")


def default_mtry(p: int) -> int:
    return max(1, math.ceil(3 * p / 4))


@dataclass(frozen=True, eq=False)
class Forest:
    """Trees packed as (n_trees, max_nodes) arrays plus in-bag counts."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    leaf_id: np.ndarray
    gain: np.ndarray
    n_nodes: np.ndarray
    n_leaves: np.ndarray
    inbag: np.ndarray
    p: int
    mtry: int
    master_seed: int | None = None

    @property
    def n_trees(self) -> int:
        return self.feature.shape[0]

    def tree(self, k: int) -> RegressionTree:
        n = int(self.n_nodes[k])
        return RegressionTree(*(getattr(self, f)[k, :n] for f in NODE_FIELDS),
                              n_leaves=int(self.n_leaves[k]), p=self.p, mtry=self.mtry,
                              inbag=self.inbag[k])

    @property
    def trees(self) -> list[RegressionTree]:
        return [self.tree(k) for k in range(self.n_trees)]

    @classmethod
    def from_trees(cls, trees: list[RegressionTree], master_seed=None) -> "Forest":
        if not trees:
            raise TreeError("a forest needs at least one tree")
        C = max(t.n_nodes for t in trees)
        T = len(trees)
        arrs = {}
        for f in NODE_FIELDS:
            dtype = getattr(trees[0], f).dtype
            fill = -1 if f in ("feature", "left", "right", "leaf_id") else 0
            a = np.full((T, C), fill, dtype=dtype)
            for k, t in enumerate(trees):
                a[k, :t.n_nodes] = getattr(t, f)
            arrs[f] = a
        return cls(**arrs, n_nodes=np.array([t.n_nodes for t in trees], np.int64),
                   n_leaves=np.array([t.n_leaves for t in trees], np.int64),
                   inbag=np.vstack([t.inbag for t in trees]),
                   p=trees[0].p, mtry=trees[0].mtry, master_seed=master_seed)

    def tree_predictions(self, X) -> np.ndarray:
        X = _check_rows(X, self.p)
        return cart._forest_values(self.feature, self.threshold, self.left, self.right,
                                   self.value, X)

    def predict(self, X) -> np.ndarray:
        vals = self.tree_predictions(X)
        out, _ = cart._ordered_mean(vals, np.ones(vals.shape, dtype=np.bool_))
        return out

    def with_values(self, value: np.ndarray) -> "Forest":
        return Forest(self.feature, self.threshold, self.left, self.right, value,
                      self.leaf_id, self.gain, self.n_nodes, self.n_leaves, self.inbag,
                      self.p, self.mtry, self.master_seed)

    def packed(self) -> dict:
        d = {f: getattr(self, f) for f in NODE_FIELDS}
        d["n_nodes"] = self.n_nodes
        d["n_leaves"] = self.n_leaves
        return d


def bootstrap_counts(rng: np.random.Generator, N: int, groups=None,
                     unit: str = "observation") -> np.ndarray:
    """In-bag multiplicities of one bootstrap draw of size N (or n individuals)."""
    if unit == "observation":
        return np.bincount(rng.integers(0, N, N), minlength=N)
    if unit == "individual":
        if groups is None:
            raise TreeError("individual-level bootstrap needs group labels")
        groups = np.asarray(groups)
        n = int(groups.max()) + 1
        picks = np.bincount(rng.integers(0, n, n), minlength=n)
        return picks[groups]
    raise TreeError(f"unknown bootstrap unit {unit!r}")


def fit_forest(X, y, n_trees: int = 500, mtry: int | None = None, min_node_size: int = 5,
               seed=None, bootstrap: bool = True, groups=None,
               bootstrap_unit: str = "observation", threads: int = 1) -> Forest:
    if int(n_trees) < 1:
        raise TreeError("n_trees must be >= 1")
    X, y, _, min_node_size = cart.check_fit_inputs(X, y, 1, min_node_size)
    mtry = default_mtry(X.shape[1]) if mtry is None else mtry
    X, y, mtry, min_node_size = cart.check_fit_inputs(X, y, mtry, min_node_size)
    N = X.shape[0]
    ss = _as_seed_sequence(seed)
    inbag = np.ones((n_trees, N), np.int64)
    seeds = np.empty(n_trees, np.int64)
    for k, child in enumerate(ss.spawn(n_trees)):
        rng = np.random.default_rng(child)
        if bootstrap:
            inbag[k] = bootstrap_counts(rng, N, groups, bootstrap_unit)
        seeds[k] = cart.draw_tree_seed(rng)
    packed = cart.grow_packed(X, y, inbag, mtry, min_node_size, seeds, threads=threads)
    master = seed if isinstance(seed, (int, np.integer)) else None
    return Forest(**packed, inbag=inbag, p=X.shape[1], mtry=mtry, master_seed=master)


def predict_forest(forest: Forest, X_rows) -> np.ndarray:
    return forest.predict(X_rows)


def oob_predictions(forest: Forest, X) -> tuple[np.ndarray, np.ndarray]:
    """OOB-aggregated predictions and the number of OOB trees per row.

    Rows that are in-bag for every tree get NaN.
    """
    vals = forest.tree_predictions(X)
    if vals.shape[1] != forest.inbag.shape[1]:
        raise TreeError("OOB quantities need the training rows the forest was fit on")
    return cart._ordered_mean(vals, forest.inbag == 0)


def oob_error(forest: Forest, X, y) -> float:
    """Mean squared OOB error over rows having at least one OOB tree."""
    y = np.asarray(y, dtype=float)
    pred, cnt = oob_predictions(forest, X)
    used = cnt > 0
    if not used.any():
        raise TreeError("no out-of-bag observations (bootstrap disabled or too few trees)")
    skipped = int((~used).sum())
    if skipped:
        log.info("oob_error: %d observation(s) without OOB trees skipped", skipped)
    r = y[used] - pred[used]
    return float(np.mean(r * r))


def variable_importance(forest: Forest, X, y, rng=None) -> np.ndarray:
    """Permutation importance on each tree's OOB sample, averaged over trees.

    Variables a tree never splits on contribute exactly zero for that tree.
    Trees with an empty OOB sample are left out of the average.
    """
    X = _check_rows(X, forest.p)
    y = np.asarray(y, dtype=float)
    if X.shape[0] != forest.inbag.shape[1]:
        raise TreeError("importance needs the training rows the forest was fit on")
    rng = np.random.default_rng(rng)
    vi = np.zeros(forest.p)
    n_used = 0
    for k in range(forest.n_trees):
        oob = np.flatnonzero(forest.inbag[k] == 0)
        if oob.size == 0:
            continue
        n_used += 1
        tree = forest.tree(k)
        Xo = X[oob].copy()
        yo = y[oob]
        base = np.mean((yo - tree.predict(Xo)) ** 2)
        for j in tree.split_features:
            col = Xo[:, j].copy()
            Xo[:, j] = col[rng.permutation(oob.size)]
            vi[j] += np.mean((yo - tree.predict(Xo)) ** 2) - base
            Xo[:, j] = col
    if n_used == 0:
        raise TreeError("no tree has an out-of-bag sample")
    return vi / n_used


def importance_ranking(vi) -> np.ndarray:
    """Variable indices by decreasing importance (ties by index)."""
    vi = np.asarray(vi)
    return np.lexsort((np.arange(vi.size), -vi))


def select_by_threshold(vi, threshold: float = 0.0) -> np.ndarray:
    """Indices with importance above ``threshold``, most important first."""
    order = importance_ranking(vi)
    return order[np.asarray(vi)[order] > threshold]
