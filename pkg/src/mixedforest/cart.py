"""Randomized maximal regression trees and GLS refitting of their leaves.

Trees are stored as flat node arrays so that whole forests can be grown,
routed and refit inside compiled loops. Node 0 is the root; ``left[k] == -1``
marks a leaf, whose index among the leaves is ``leaf_id[k]`` (0..L-1 in
depth-first, left-to-right order). A row goes left when
``x[feature] <= threshold``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .data import IndividualBlock, LongitudinalDataset, MarginalCovariance


class TreeError(ValueError):
    pass


# --------------------------------------------------------------------------
# compiled kernels
# --------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _grow_one(Xt, y, order, inbag, mtry, min_node_size, seed,
              feature, threshold, left, right, value, leaf_id, gain):
    # ``order[f]`` sorts all rows by feature f. Every feature keeps its own
    # sorted list of in-bag rows; a node owns the same [start, end) range in
    # each list, and splits partition all lists stably.
    np.random.seed(seed)
    p, N = Xt.shape
    S = 0
    for i in range(N):
        S += inbag[i]
    sidx = np.empty((p, S), np.int32)
    for f in range(p):
        k = 0
        for u in range(N):
            i = order[f, u]
            for _ in range(inbag[i]):
                sidx[f, k] = i
                k += 1
    buf = np.empty(S, np.int32)
    goes_left = np.zeros(N, np.int64)
    perm = np.arange(p)
    st_node = np.empty(S + 1, np.int64)
    st_start = np.empty(S + 1, np.int64)
    st_end = np.empty(S + 1, np.int64)
    top = 1
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = S
    n_nodes = 1
    n_leaves = 0
    while top > 0:
        top -= 1
        node = st_node[top]
        start = st_start[top]
        end = st_end[top]
        m = end - start
        s = 0.0
        ymin = np.inf
        ymax = -np.inf
        for k in range(start, end):
            v = y[sidx[0, k]]
            s += v
            if v < ymin:
                ymin = v
            if v > ymax:
                ymax = v
        value[node] = s / m
        best_f = -1
        best_thr = 0.0
        best_score = -1.0
        if m >= 2 * min_node_size and ymax > ymin:
            for j in range(mtry):
                r = j + np.random.randint(0, p - j)
                tmp = perm[j]
                perm[j] = perm[r]
                perm[r] = tmp
                f = perm[j]
                row = sidx[f]
                xr = Xt[f]
                if xr[row[start]] == xr[row[end - 1]]:
                    continue
                lo = start + min_node_size - 1
                hi = end - min_node_size
                sl = 0.0
                for k in range(start, lo):
                    sl += y[row[k]]
                xa = xr[row[lo]]
                for k in range(lo, hi):
                    sl += y[row[k]]
                    xb = xr[row[k + 1]]
                    if xa < xb:
                        nl = k - start + 1
                        nr = m - nl
                        d = sl / nl - (s - sl) / nr
                        # SSE reduction, nonnegative by construction
                        score = nl * nr * d * d / m
                        if score > best_score:
                            best_score = score
                            best_f = f
                            thr = xa + 0.5 * (xb - xa)
                            if not thr < xb:
                                thr = xa
                            best_thr = thr
                    xa = xb
        if best_f < 0:
            leaf_id[node] = n_leaves
            n_leaves += 1
            continue
        n_left = 0
        for k in range(start, end):
            i = sidx[best_f, k]
            gl = Xt[best_f, i] <= best_thr
            goes_left[i] = gl
            if gl:
                n_left += 1
        for f in range(p):
            row = sidx[f]
            nl = start
            nr = 0
            for k in range(start, end):
                i = row[k]
                g = goes_left[i]
                row[nl] = i
                buf[nr] = i
                nl += g
                nr += 1 - g
            for k in range(nr):
                row[nl + k] = buf[k]
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = lnode
        right[node] = rnode
        gain[node] = best_score
        # right pushed first so the left subtree is numbered first
        st_node[top] = rnode
        st_start[top] = start + n_left
        st_end[top] = end
        top += 1
        st_node[top] = lnode
        st_start[top] = start
        st_end[top] = start + n_left
        top += 1
    return n_nodes, n_leaves


@njit(cache=True, nogil=True)
def _grow_trees(Xt, y, order, inbag, mtry, min_node_size, seeds,
                feature, threshold, left, right, value, leaf_id, gain, n_nodes, n_leaves):
    for t in range(inbag.shape[0]):
        nn, nl = _grow_one(Xt, y, order, inbag[t], mtry, min_node_size, seeds[t],
                           feature[t], threshold[t], left[t], right[t],
                           value[t], leaf_id[t], gain[t])
        n_nodes[t] = nn
        n_leaves[t] = nl


@njit(cache=True, nogil=True)
def _route(feature, threshold, left, right, X):
    out = np.empty(X.shape[0], np.int64)
    for i in range(X.shape[0]):
        node = 0
        while left[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@njit(cache=True, nogil=True)
def _forest_values(feature, threshold, left, right, value, X):
    """Per-tree predictions, shape (T, n_rows)."""
    T = feature.shape[0]
    out = np.empty((T, X.shape[0]))
    for t in range(T):
        nodes = _route(feature[t], threshold[t], left[t], right[t], X)
        for i in range(X.shape[0]):
            out[t, i] = value[t, nodes[i]]
    return out


@njit(cache=True)
def _ordered_mean(vals, mask):
    """Mean over columns of the selected rows, summed in sorted order.

    Sorting first makes the result independent of tree order; summing
    offsets from the smallest value makes the mean of equal values exact.
    """
    T, n = vals.shape
    out = np.full(n, np.nan)
    cnt = np.zeros(n, np.int64)
    col = np.empty(T)
    for i in range(n):
        c = 0
        for t in range(T):
            if mask[t, i]:
                col[c] = vals[t, i]
                c += 1
        cnt[i] = c
        if c > 0:
            srt = np.sort(col[:c])
            acc = 0.0
            for k in range(1, c):
                acc += srt[k] - srt[0]
            out[i] = srt[0] + acc / c
    return out, cnt


@njit(cache=True, nogil=True)
def _gls_refit(feature, threshold, left, right, value, leaf_id, n_leaves,
               X, offsets, vinv_flat, vinv_off, vinv_y, mu_out, solved_out):
    """Replace leaf values by the GLS solution, tree by tree, in place."""
    T = feature.shape[0]
    n = offsets.shape[0] - 1
    for t in range(T):
        L = n_leaves[t]
        nodes = _route(feature[t], threshold[t], left[t], right[t], X)
        lid = np.empty(nodes.shape[0], np.int64)
        for k in range(nodes.shape[0]):
            lid[k] = leaf_id[t, nodes[k]]
        gram = np.zeros((L, L))
        rhs = np.zeros(L)
        for i in range(n):
            a = offsets[i]
            ni = offsets[i + 1] - a
            base = vinv_off[i]
            for j in range(ni):
                lj = lid[a + j]
                rhs[lj] += vinv_y[a + j]
                for k in range(ni):
                    gram[lj, lid[a + k]] += vinv_flat[base + j * ni + k]
        active = np.empty(L, np.int64)
        na = 0
        for l in range(L):
            if gram[l, l] > 0.0:
                active[na] = l
                na += 1
        leaf_node = np.empty(L, np.int64)
        for k in range(leaf_id.shape[1]):
            if left[t, k] < 0 and leaf_id[t, k] >= 0:
                leaf_node[leaf_id[t, k]] = k
        for l in range(L):
            mu_out[t, l] = value[t, leaf_node[l]]
            solved_out[t, l] = False
        if na == 0:
            continue
        g = np.empty((na, na))
        r = np.empty(na)
        for u in range(na):
            r[u] = rhs[active[u]]
            for v in range(na):
                g[u, v] = gram[active[u], active[v]]
        ok = True
        try:
            sol = np.linalg.solve(g, r)
        except Exception:  # noqa: BLE001
            ok = False
            sol = r
        if not ok:
            continue
        for u in range(na):
            if not np.isfinite(sol[u]):
                ok = False
        if not ok:
            continue
        for u in range(na):
            l = active[u]
            mu_out[t, l] = sol[u]
            solved_out[t, l] = True
            value[t, leaf_node[l]] = sol[u]


# --------------------------------------------------------------------------
# python surface
# --------------------------------------------------------------------------


def _as_seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def draw_tree_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**32 - 1))


def check_fit_inputs(X, y, mtry, min_node_size):
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise TreeError("empty input")
    if y.shape != (X.shape[0],):
        raise TreeError("X and y lengths differ")
    if X.shape[0] < 2:
        raise TreeError("need at least two observations")
    p = X.shape[1]
    mtry = p if mtry is None else int(mtry)
    if not 1 <= mtry <= p:
        raise TreeError(f"mtry must lie in [1, {p}], got {mtry}")
    if int(min_node_size) < 1:
        raise TreeError("min_node_size must be >= 1")
    return X, y, mtry, int(min_node_size)


def grow_packed(X, y, inbag, mtry, min_node_size, seeds, threads=1):
    """Grow ``len(seeds)`` trees; returns trimmed (T, C) node arrays."""
    T, _ = inbag.shape
    cap = 2 * int(inbag.sum(axis=1).max()) + 1
    feature = np.full((T, cap), -1, np.int64)
    threshold = np.zeros((T, cap))
    left = np.full((T, cap), -1, np.int64)
    right = np.full((T, cap), -1, np.int64)
    value = np.zeros((T, cap))
    leaf_id = np.full((T, cap), -1, np.int64)
    gain = np.zeros((T, cap))
    n_nodes = np.zeros(T, np.int64)
    n_leaves = np.zeros(T, np.int64)
    seeds = np.asarray(seeds, dtype=np.int64)
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)
    Xt = np.ascontiguousarray(X.T)
    arrays = (feature, threshold, left, right, value, leaf_id, gain, n_nodes, n_leaves)
    if threads > 1 and T > 1:
        from concurrent.futures import ThreadPoolExecutor

        bounds = np.linspace(0, T, min(threads, T) + 1).astype(int)

        def work(lo, hi):
            _grow_trees(Xt, y, order, inbag[lo:hi], mtry, min_node_size, seeds[lo:hi],
                        *(a[lo:hi] for a in arrays))

        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(work, bounds[:-1], bounds[1:]))
    else:
        _grow_trees(Xt, y, order, inbag, mtry, min_node_size, seeds, *arrays)
    C = int(n_nodes.max())
    return dict(feature=feature[:, :C].copy(), threshold=threshold[:, :C].copy(),
                left=left[:, :C].copy(), right=right[:, :C].copy(),
                value=value[:, :C].copy(), leaf_id=leaf_id[:, :C].copy(),
                gain=gain[:, :C].copy(), n_nodes=n_nodes, n_leaves=n_leaves)


@dataclass(frozen=True, eq=False)
class RegressionTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    leaf_id: np.ndarray
    gain: np.ndarray
    n_leaves: int
    p: int
    mtry: int
    inbag: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def leaf_nodes(self) -> np.ndarray:
        """Node index of every leaf, ordered by leaf id."""
        nodes = np.flatnonzero(self.left < 0)
        return nodes[np.argsort(self.leaf_id[nodes])]

    @property
    def leaf_values(self) -> np.ndarray:
        return self.value[self.leaf_nodes]

    @property
    def split_features(self) -> np.ndarray:
        return np.unique(self.feature[self.left >= 0])

    def with_leaf_values(self, mu) -> "RegressionTree":
        value = self.value.copy()
        value[self.leaf_nodes] = mu
        return RegressionTree(self.feature, self.threshold, self.left, self.right, value,
                              self.leaf_id, self.gain, self.n_leaves, self.p, self.mtry, self.inbag)

    def apply(self, X) -> np.ndarray:
        """Leaf id of every row."""
        X = _check_rows(X, self.p)
        return self.leaf_id[_route(self.feature, self.threshold, self.left, self.right, X)]

    def predict(self, X) -> np.ndarray:
        X = _check_rows(X, self.p)
        return self.value[_route(self.feature, self.threshold, self.left, self.right, X)]


def _check_rows(X, p):
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != p:
        raise TreeError(f"expected {p} covariate columns, got {X.shape[1]}")
    return X


def fit_tree(X, y, mtry=None, min_node_size=5, seed=None, bootstrap=False) -> RegressionTree:
    """Grow one maximal CART tree.

    Splitting stops when a node holds fewer than ``2 * min_node_size`` in-bag
    observations or a constant response; each child keeps at least
    ``min_node_size``. ``mtry`` candidate variables (default: all) are drawn
    without replacement at every node.
    """
    X, y, mtry, min_node_size = check_fit_inputs(X, y, mtry, min_node_size)
    N = X.shape[0]
    rng = np.random.default_rng(_as_seed_sequence(seed))
    if bootstrap:
        inbag = np.bincount(rng.integers(0, N, N), minlength=N).astype(np.int64)
    else:
        inbag = np.ones(N, np.int64)
    packed = grow_packed(X, y, inbag[None, :], mtry, min_node_size, [draw_tree_seed(rng)])
    n = int(packed["n_nodes"][0])
    return RegressionTree(*(packed[k][0, :n] for k in
                            ("feature", "threshold", "left", "right", "value", "leaf_id", "gain")),
                          n_leaves=int(packed["n_leaves"][0]), p=X.shape[1], mtry=mtry, inbag=inbag)


def predict_tree(tree: RegressionTree, X_rows) -> np.ndarray:
    return tree.predict(X_rows)


def leaf_indicator(tree: RegressionTree, block: IndividualBlock) -> np.ndarray:
    """n_i x L matrix with a single 1 per row at the row's leaf."""
    ids = tree.apply(block.X)
    phi = np.zeros((ids.shape[0], tree.n_leaves))
    phi[np.arange(ids.shape[0]), ids] = 1.0
    return phi


@dataclass(frozen=True, eq=False)
class GLSSystem:
    """Per-dataset inputs of the leaf refit, shared by every tree."""

    X: np.ndarray
    offsets: np.ndarray
    vinv_flat: np.ndarray
    vinv_off: np.ndarray
    vinv_y: np.ndarray


def gls_system(dataset: LongitudinalDataset, covs: list[MarginalCovariance], y=None) -> GLSSystem:
    """Pack V_i^-1 and V_i^-1 y_i for the refit; ``y`` defaults to the response."""
    ys = dataset.blocks_of(dataset.y if y is None else np.asarray(y, dtype=float))
    flat = [c.inverse.ravel() for c in covs]
    vinv_off = np.concatenate([[0], np.cumsum([f.size for f in flat])]).astype(np.int64)
    vinv_y = np.concatenate([c.solve(yi) for c, yi in zip(covs, ys)])
    return GLSSystem(dataset.X, dataset.offsets, np.concatenate(flat), vinv_off, vinv_y)


def refit_packed(packed: dict, system: GLSSystem):
    """GLS-refit the leaves of packed trees in place; returns (mu, solved)."""
    T = packed["feature"].shape[0]
    L = int(packed["n_leaves"].max())
    mu = np.zeros((T, L))
    solved = np.zeros((T, L), dtype=np.bool_)
    _gls_refit(packed["feature"], packed["threshold"], packed["left"], packed["right"],
               packed["value"], packed["leaf_id"], packed["n_leaves"],
               system.X, system.offsets, system.vinv_flat, system.vinv_off, system.vinv_y,
               mu, solved)
    return mu, solved


def gls_refit_leaves(tree: RegressionTree, dataset: LongitudinalDataset,
                     covs: list[MarginalCovariance]) -> np.ndarray:
    """Leaf values solving  (sum Phi_i' V_i^-1 Phi_i) mu = sum Phi_i' V_i^-1 y_i.

    Leaves that receive no row of ``dataset`` keep their in-bag mean. Use
    ``tree.with_leaf_values(mu)`` to obtain the refit tree.
    """
    _check_rows(dataset.X[:1], tree.p)
    packed = {k: getattr(tree, k)[None, :].copy() for k in
              ("feature", "threshold", "left", "right", "value", "leaf_id")}
    packed["n_leaves"] = np.array([tree.n_leaves], np.int64)
    mu, _ = refit_packed(packed, gls_system(dataset, covs))
    return mu[0, :tree.n_leaves]
