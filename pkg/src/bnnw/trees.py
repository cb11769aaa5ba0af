"""Minimal gradient-boosted regression trees with exact greedy splits.

Squared-error boosting on residuals; trees grow best-first up to a leaf
budget, scanning every feature and every distinct-value midpoint.  The
feature matrix is presorted once per fit and per-node sorted orders are
maintained by stable partition, so growing trees never re-sorts.

Fits are deterministic: ties in split gain break by (feature, position)
order and the candidate heap breaks gain ties by insertion order, so the
`seed` config field exists only for interface stability.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

# Floor on per-leaf sample count, mirroring common boosted-tree defaults;
# nodes smaller than twice this never split.
MIN_SAMPLES_LEAF = 20

_GAIN_RTOL = 1e-12

# 1/n_left and 1/n_right vectors keyed by node size; node sizes repeat
# across the hundreds of trees of a fit, so cache the reciprocals.
_INV_CACHE: dict[int, tuple[NDArray, NDArray]] = {}


def _inv_counts(m: int) -> tuple[NDArray, NDArray]:
    hit = _INV_CACHE.get(m)
    if hit is None:
        counts = np.arange(1, m, dtype=float)
        hit = (1.0 / counts, 1.0 / (m - counts))
        if len(_INV_CACHE) < 4096:
            _INV_CACHE[m] = hit
    return hit


@dataclass(frozen=True)
class BoostedTreesConfig:
    trees: int = 300
    max_leaves: int = 10
    learning_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.trees < 1:
            raise ValueError("trees must be >= 1")
        if self.max_leaves < 1:
            raise ValueError("max_leaves must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def _best_split(xt: NDArray, y: NDArray, order_t: NDArray):
    """Best exact split given per-feature sorted orders.

    xt: (F, n) feature matrix, transposed; y: (n,) targets; order_t: (F, m)
    absolute row ids of the node, each row sorted by its feature.  Returns
    (gain, feature, threshold, left_ids) or None when nothing admissible
    improves on the parent.
    """
    m = order_t.shape[1]
    if m < 2 * MIN_SAMPLES_LEAF:
        return None
    xs = np.take_along_axis(xt, order_t, axis=1)
    ys = y[order_t]
    csum = np.cumsum(ys, axis=1)
    total = csum[0, -1]
    inv_l, inv_r = _inv_counts(m)
    left = csum[:, :-1]
    # SSE reduction up to the constant total^2/m, which does not affect
    # the argmax and is restored below
    gain = left * left
    gain *= inv_l
    right = left - total
    right *= right
    right *= inv_r
    gain += right
    valid = xs[:, :-1] < xs[:, 1:]
    lo, hi = MIN_SAMPLES_LEAF - 1, m - MIN_SAMPLES_LEAF
    valid[:, :lo] = False
    valid[:, hi:] = False
    gain[~valid] = -np.inf
    flat = int(np.argmax(gain))
    feat, pos = divmod(flat, m - 1)
    best = gain[feat, pos] - total * total / m
    node_y = ys[0]
    scale = max(1.0, float(node_y @ node_y))
    if not np.isfinite(best) or best <= _GAIN_RTOL * scale:
        return None
    thr = 0.5 * (xs[feat, pos] + xs[feat, pos + 1])
    if thr >= xs[feat, pos + 1]:
        # midpoint rounded up between adjacent floats; keep predict
        # consistent with the training partition
        thr = xs[feat, pos]
    return float(best), int(feat), float(thr), order_t[feat, : pos + 1]


def _partition_orders(order_t: NDArray, member: NDArray, m_child: int) -> NDArray:
    """Stable-partition sorted orders onto a child with `m_child` members."""
    sel = member[order_t]
    return order_t[sel].reshape(order_t.shape[0], m_child)


class RegressionTree:
    """One fitted tree stored as flat node arrays for vectorized routing."""

    __slots__ = ("feature", "threshold", "left", "right", "value", "is_leaf", "depth")

    def __init__(self):
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []
        self.is_leaf: list[bool] = []
        self.depth = 0

    def _new_node(self, value: float) -> int:
        self.feature.append(0)
        self.threshold.append(-np.inf)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        self.is_leaf.append(True)
        return len(self.value) - 1

    def _finalize(self):
        self.feature = np.asarray(self.feature, dtype=np.int64)
        self.threshold = np.asarray(self.threshold)
        self.left = np.asarray(self.left, dtype=np.int64)
        self.right = np.asarray(self.right, dtype=np.int64)
        self.value = np.asarray(self.value)
        self.is_leaf = np.asarray(self.is_leaf)
        depth = np.zeros(len(self.value), dtype=np.int64)
        for node in range(len(self.value) - 1, -1, -1):
            if not self.is_leaf[node]:
                depth[node] = 1 + max(depth[self.left[node]], depth[self.right[node]])
        self.depth = int(depth[0]) if len(depth) else 0

    def predict(self, x: NDArray) -> NDArray:
        """Route rows level-by-level; x is (n, F)."""
        n = x.shape[0]
        node = np.zeros(n, dtype=np.int64)
        rows = np.arange(n)
        for _ in range(self.depth):
            leaf = self.is_leaf[node]
            xv = x[rows, self.feature[node]]
            nxt = np.where(xv <= self.threshold[node], self.left[node], self.right[node])
            node = np.where(leaf, node, nxt)
        return self.value[node]

    def add_predictions(self, xt: NDArray, out: NDArray, scale: float) -> None:
        """Accumulate scale * prediction into `out`; xt is (F, n) transposed.

        Partition-based routing: each row is touched only along its own
        path, which beats the level loop for large n.
        """
        stack = [(0, np.arange(out.shape[0]))]
        while stack:
            node, idx = stack.pop()
            while not self.is_leaf[node]:
                mask = xt[self.feature[node]][idx] <= self.threshold[node]
                right_idx = idx[~mask]
                if right_idx.size:
                    stack.append((int(self.right[node]), right_idx))
                idx = idx[mask]
                node = int(self.left[node])
                if not idx.size:
                    break
            if idx.size:
                out[idx] += scale * self.value[node]

    def leaf_boxes(self, node: int = 0, lo=None, hi=None):
        """Yield (leaf_value, lo, hi) axis-aligned boxes; bounds are dicts
        feature -> bound, with splits read as `x[f] <= thr` going left."""
        lo = dict(lo or {})
        hi = dict(hi or {})
        if self.is_leaf[node]:
            yield float(self.value[node]), lo, hi
            return
        f = int(self.feature[node])
        thr = float(self.threshold[node])
        hi_l = dict(hi)
        hi_l[f] = min(hi.get(f, np.inf), thr)
        yield from self.leaf_boxes(int(self.left[node]), lo, hi_l)
        lo_r = dict(lo)
        lo_r[f] = max(lo.get(f, -np.inf), thr)
        yield from self.leaf_boxes(int(self.right[node]), lo_r, hi)


class GradientBoostedTrees:
    """Boosted ensemble of regression trees for a scalar target."""

    def __init__(self, config: BoostedTreesConfig):
        self.config = config
        self.base_value = 0.0
        self.trees: list[RegressionTree] = []

    def fit(self, x: NDArray, y: NDArray) -> "GradientBoostedTrees":
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ValueError("x must be (n, f) and y (n,)")
        if y.size == 0:
            raise ValueError("empty training set")
        if not np.all(np.isfinite(y)):
            raise ValueError("non-finite regression targets")
        n = y.shape[0]
        xt = np.ascontiguousarray(x.T)
        root_order = np.ascontiguousarray(np.argsort(xt, axis=1))
        self.base_value = float(y.mean())
        resid = y - self.base_value
        lr = self.config.learning_rate
        fitted = np.empty_like(resid)
        member = np.empty(n, dtype=bool)
        self.trees = []
        for _ in range(self.config.trees):
            tree = self._fit_tree(xt, resid, root_order, member, fitted)
            self.trees.append(tree)
            resid -= lr * fitted
        return self

    def _fit_tree(self, xt, y, root_order, member, train_pred) -> RegressionTree:
        max_leaves = self.config.max_leaves
        tree = RegressionTree()
        root = tree._new_node(float(y.mean()))
        leaf_rows = {root: root_order[0]}
        heap: list = []
        counter = 0
        if max_leaves > 1:
            cand = _best_split(xt, y, root_order)
            if cand is not None:
                heapq.heappush(heap, (-cand[0], counter, root, cand, root_order))
                counter += 1
        leaves = 1
        while heap and leaves < max_leaves:
            _, _, node, (gain, feat, thr, left_ids), order_t = heapq.heappop(heap)
            del leaf_rows[node]
            member[:] = False
            member[left_ids] = True
            l_order = _partition_orders(order_t, member, left_ids.shape[0])
            member[order_t[0]] = True
            member[left_ids] = False
            r_order = _partition_orders(order_t, member, order_t.shape[1] - left_ids.shape[0])
            lnode = tree._new_node(float(y[l_order[0]].mean()))
            rnode = tree._new_node(float(y[r_order[0]].mean()))
            tree.is_leaf[node] = False
            tree.feature[node] = feat
            tree.threshold[node] = thr
            tree.left[node] = lnode
            tree.right[node] = rnode
            leaf_rows[lnode] = l_order[0]
            leaf_rows[rnode] = r_order[0]
            leaves += 1
            if leaves < max_leaves:
                for child, c_order in ((lnode, l_order), (rnode, r_order)):
                    cand = _best_split(xt, y, c_order)
                    if cand is not None:
                        heapq.heappush(heap, (-cand[0], counter, child, cand, c_order))
                        counter += 1
        for node, rows in leaf_rows.items():
            train_pred[rows] = tree.value[node]
        tree._finalize()
        return tree

    def predict(self, x: NDArray) -> NDArray:
        x = np.ascontiguousarray(x, dtype=float)
        out = np.full(x.shape[0], self.base_value)
        lr = self.config.learning_rate
        if x.shape[0] >= 4096:
            xt = np.ascontiguousarray(x.T)
            for tree in self.trees:
                tree.add_predictions(xt, out, lr)
        else:
            for tree in self.trees:
                out += lr * tree.predict(x)
        return out

    def product_grid(self, first_vals: NDArray, rest_rows: NDArray) -> NDArray:
        """Exact ensemble values on the grid {(first_vals[j], rest_rows[l])}.

        Feature 0 of the fit takes first_vals; features 1.. take rest_rows
        columns.  Tree leaves are axis-aligned boxes, so on a product grid
        each leaf contributes a rank-one term; the whole grid is assembled
        as one factor-matrix product instead of n_j*n_l routings.  Returns
        shape (len(first_vals), len(rest_rows)).
        """
        first_vals = np.asarray(first_vals, dtype=float)
        rest_rows = np.asarray(rest_rows, dtype=float)
        n_a, n_b = first_vals.shape[0], rest_rows.shape[0]
        lr = self.config.learning_rate
        a_cols, b_cols = [], []
        all_b = np.ones(n_b, dtype=bool)
        for tree in self.trees:
            for value, lo, hi in tree.leaf_boxes():
                a = (lr * value) * np.ones(n_a)
                if 0 in lo:
                    a *= first_vals > lo[0]
                if 0 in hi:
                    a *= first_vals <= hi[0]
                b = all_b
                for f, bound in lo.items():
                    if f:
                        b = b & (rest_rows[:, f - 1] > bound)
                for f, bound in hi.items():
                    if f:
                        b = b & (rest_rows[:, f - 1] <= bound)
                a_cols.append(a)
                b_cols.append(b.astype(float))
        grid = np.asarray(a_cols).T @ np.asarray(b_cols)
        grid += self.base_value
        return grid
