"""Regression random forest with out-of-bag error and OOB permutation importance.

The forest exists to rank predictors; it is never the final predictive
model. Trees are CART-style regression trees grown on bootstrap samples,
choosing each split among a fresh random subset of features by the
weighted child variance (sum of squared errors) criterion. Features that
are constant within a node are skipped without counting toward the
per-split feature budget.

Randomness is drawn per tree from streams keyed by ``(seed, tree_index)``,
so serial and threaded growth give bit-identical forests.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np
import pandas as pd

from .errors import ForestSizeError, OOBUndefinedError

_U64 = (1 << 64) - 1


@numba.njit(cache=True)
def _next_u64(state):
    # splitmix64
    state[0] = state[0] + np.uint64(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True, nogil=True)
def _grow(X, y, sample, mtry, min_leaf, max_depth, seed):
    n = sample.shape[0]
    p = X.shape[1]
    cap = 2 * n + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    count = np.zeros(cap, np.int64)
    improvement = np.zeros(cap)

    idx = sample.copy()
    scratch = np.empty(n, np.int64)
    feats = np.arange(p)
    state = np.empty(1, np.uint64)
    state[0] = seed

    st_node = np.empty(cap, np.int64)
    st_start = np.empty(cap, np.int64)
    st_end = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    sp = 0
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = n
    st_depth[0] = 0
    sp = 1
    n_nodes = 1

    while sp > 0:
        sp -= 1
        node = st_node[sp]
        s = st_start[sp]
        e = st_end[sp]
        depth = st_depth[sp]
        m = e - s
        ys = np.empty(m)
        total = 0.0
        for i in range(m):
            ys[i] = y[idx[s + i]]
            total += ys[i]
        mean = total / m
        sse = 0.0
        for i in range(m):
            sse += (ys[i] - mean) ** 2
        value[node] = mean
        count[node] = m
        if m < 2 * min_leaf or (max_depth >= 0 and depth >= max_depth) or sse <= 0.0:
            continue

        base = total * total / m
        best_gain = 1e-12 * sse
        best_f = -1
        best_thr = 0.0
        xs = np.empty(m)
        visited = 0
        for k in range(p):
            if visited >= mtry:
                break
            r = k + np.int64(_next_u64(state) % np.uint64(p - k))
            tmp = feats[k]
            feats[k] = feats[r]
            feats[r] = tmp
            f = feats[k]
            lo = np.inf
            hi = -np.inf
            for i in range(m):
                v = X[idx[s + i], f]
                xs[i] = v
                lo = min(lo, v)
                hi = max(hi, v)
            # node-constant features do not count toward mtry
            if lo == hi:
                continue
            visited += 1
            # two-valued (dummy) column: one partition, no sort
            n_lo = 0
            sum_lo = 0.0
            binary = True
            for i in range(m):
                if xs[i] == lo:
                    n_lo += 1
                    sum_lo += ys[i]
                elif xs[i] != hi:
                    binary = False
                    break
            if binary:
                n_hi = m - n_lo
                if n_lo >= min_leaf and n_hi >= min_leaf:
                    sum_hi = total - sum_lo
                    gain = sum_lo * sum_lo / n_lo + sum_hi * sum_hi / n_hi - base
                    if gain > best_gain:
                        best_gain = gain
                        best_f = f
                        thr = 0.5 * (lo + hi)
                        if thr >= hi:
                            thr = lo
                        best_thr = thr
                continue
            order = np.argsort(xs, kind="mergesort")
            sum_l = 0.0
            for i in range(m - 1):
                sum_l += ys[order[i]]
                nl = i + 1
                nr = m - nl
                if nr < min_leaf:
                    break
                if nl < min_leaf:
                    continue
                a = xs[order[i]]
                b = xs[order[i + 1]]
                if a == b:
                    continue
                sum_r = total - sum_l
                gain = sum_l * sum_l / nl + sum_r * sum_r / nr - base
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    thr = 0.5 * (a + b)
                    if thr >= b:
                        thr = a
                    best_thr = thr
        if best_f < 0:
            continue

        nl = 0
        nr = 0
        for i in range(m):
            j = idx[s + i]
            if X[j, best_f] <= best_thr:
                idx[s + nl] = j
                nl += 1
            else:
                scratch[nr] = j
                nr += 1
        for i in range(nr):
            idx[s + nl + i] = scratch[i]

        feature[node] = best_f
        threshold[node] = best_thr
        improvement[node] = best_gain
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        st_node[sp] = rc
        st_start[sp] = s + nl
        st_end[sp] = e
        st_depth[sp] = depth + 1
        sp += 1
        st_node[sp] = lc
        st_start[sp] = s
        st_end[sp] = s + nl
        st_depth[sp] = depth + 1
        sp += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), count[:n_nodes].copy(),
            improvement[:n_nodes].copy())


@numba.njit(cache=True, nogil=True)
def _predict(X, feature, threshold, left, right, value):
    n = X.shape[0]
    out = np.empty(n)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    features_per_split: int | None = None  # default ceil(p / 3)
    min_leaf_size: int = 5
    max_depth: int | None = None
    seed: int = 0

    def mtry(self, p: int) -> int:
        m = self.features_per_split if self.features_per_split is not None else math.ceil(p / 3)
        if not 1 <= m <= p:
            raise ValueError(f"features_per_split={m} outside 1..{p}")
        return m


@dataclass(frozen=True)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray
    improvement: np.ndarray

    def predict(self, X) -> np.ndarray:
        return _predict(np.ascontiguousarray(X, dtype=float), self.feature, self.threshold,
                        self.left, self.right, self.value)

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    def split_features(self) -> np.ndarray:
        return np.unique(self.feature[self.feature >= 0])


@dataclass(frozen=True)
class Forest:
    trees: tuple
    inbag: np.ndarray  # (n_trees, n) bootstrap draw counts
    params: ForestParams
    feature_names: tuple
    constant_response: bool = False

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def oob_rows(self, t: int) -> np.ndarray:
        return np.flatnonzero(self.inbag[t] == 0)

    def predict(self, X) -> np.ndarray:
        X = _predictors(X)[0]
        return np.mean([tree.predict(X) for tree in self.trees], axis=0)


def _predictors(X) -> tuple[np.ndarray, tuple]:
    """Values and names of the predictor columns; a design's intercept is dropped."""
    if isinstance(X, pd.DataFrame):
        return np.ascontiguousarray(X.to_numpy(dtype=float)), tuple(X.columns)
    cols = getattr(X, "columns", None)
    if cols is not None and hasattr(X, "blocks"):
        values = np.asarray(X.values, dtype=float)
        if cols and cols[0] == "intercept":
            return np.ascontiguousarray(values[:, 1:]), tuple(cols[1:])
        return np.ascontiguousarray(values), tuple(cols)
    values = np.ascontiguousarray(X, dtype=float)
    return values, tuple(f"x{i}" for i in range(values.shape[1]))


def _tree_stream(seed: int, t: int) -> np.random.Generator:
    return np.random.default_rng([seed & _U64, t])


def _pool_map(fn, items, n_jobs):
    if n_jobs is None or n_jobs <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, items))


def fit_forest(X, y, params: ForestParams = ForestParams(), n_jobs: int = 1,
               feature_names: Sequence[str] | None = None) -> Forest:
    """Grow ``params.n_trees`` regression trees on bootstrap resamples of (X, y).

    ``X`` is a predictor matrix, a DataFrame, or a DesignMatrix whose
    intercept column is skipped. A
    constant response yields single-leaf trees and sets ``constant_response``.
    """
    Xv, names = _predictors(X)
    y = np.ascontiguousarray(y, dtype=float)
    n, p = Xv.shape
    if len(y) != n:
        raise ValueError("X and y differ in length")
    if params.n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    if n < 2 * params.min_leaf_size:
        raise ForestSizeError(f"n={n} rows is below 2 * min_leaf_size={2 * params.min_leaf_size}")
    mtry = params.mtry(p)
    max_depth = -1 if params.max_depth is None else int(params.max_depth)
    if feature_names is not None:
        names = tuple(feature_names)

    def grow(t):
        rng = _tree_stream(params.seed, t)
        draws = rng.integers(0, n, size=n)
        tree_seed = rng.integers(0, 2**63, dtype=np.int64)
        arrays = _grow(Xv, y, np.sort(draws), mtry, params.min_leaf_size, max_depth,
                       np.uint64(tree_seed))
        return Tree(*arrays), np.bincount(draws, minlength=n)

    grown = _pool_map(grow, range(params.n_trees), n_jobs)
    trees = tuple(g[0] for g in grown)
    inbag = np.vstack([g[1] for g in grown]).astype(np.int32)
    return Forest(trees, inbag, params, names, constant_response=bool(np.ptp(y) == 0))


@dataclass(frozen=True)
class OOBError:
    mse: float
    n_included: int
    n_excluded: int

    def __float__(self):
        return self.mse


def oob_predictions(forest: Forest, X) -> tuple[np.ndarray, np.ndarray]:
    """Per-row average over trees for which the row is out-of-bag, and that tree count."""
    Xv = _predictors(X)[0]
    n = Xv.shape[0]
    total = np.zeros(n)
    votes = np.zeros(n, dtype=np.int64)
    for t, tree in enumerate(forest.trees):
        rows = forest.oob_rows(t)
        if rows.size:
            total[rows] += tree.predict(Xv[rows])
            votes[rows] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(votes > 0, total / np.maximum(votes, 1), np.nan), votes


def oob_error(forest: Forest, X, y) -> OOBError:
    pred, votes = oob_predictions(forest, X)
    used = votes > 0
    if not used.any():
        raise OOBUndefinedError("every row is in-bag for every tree")
    y = np.asarray(y, dtype=float)
    mse = float(np.mean((y[used] - pred[used]) ** 2))
    return OOBError(mse, int(used.sum()), int((~used).sum()))


def training_mse(forest: Forest, X, y) -> float:
    return float(np.mean((np.asarray(y, float) - forest.predict(X)) ** 2))


@dataclass(frozen=True)
class ImportanceRanking:
    names: tuple
    raw_mean: np.ndarray
    std: np.ndarray
    normalized: np.ndarray
    n_trees_used: int

    @property
    def order(self) -> np.ndarray:
        """Feature indices by descending normalized score, ties by column index."""
        idx = np.arange(len(self.names))
        return np.lexsort((idx, -self.normalized))

    def to_frame(self) -> pd.DataFrame:
        rank = np.empty(len(self.names), dtype=np.int64)
        rank[self.order] = np.arange(1, len(self.names) + 1)
        frame = pd.DataFrame({
            "feature": self.names,
            "raw_mean_increase": self.raw_mean,
            "std_across_trees": self.std,
            "normalized_score": self.normalized,
            "rank": rank,
        })
        return frame.iloc[self.order].reset_index(drop=True)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def permutation_importance(forest: Forest, X, y, seed: int | None = None,
                           n_jobs: int = 1) -> ImportanceRanking:
    """OOB permutation importance, normalized by its across-tree standard deviation.

    For each tree and feature the feature's values are shuffled among the
    tree's out-of-bag rows and the increase of that tree's OOB mean squared
    error is recorded. A feature the tree never splits on cannot change its
    predictions, so its increase is exactly zero without recomputation.
    """
    Xv = _predictors(X)[0]
    y = np.asarray(y, dtype=float)
    p = Xv.shape[1]
    seed = forest.params.seed if seed is None else seed

    def per_tree(t):
        rows = forest.oob_rows(t)
        inc = np.zeros(p)
        if rows.size == 0:
            return None
        tree = forest.trees[t]
        Xo = np.ascontiguousarray(Xv[rows])
        yo = y[rows]
        base = np.mean((yo - tree.predict(Xo)) ** 2)
        for j in tree.split_features():
            rng = np.random.default_rng([seed & _U64, t, int(j)])
            col = Xo[:, j].copy()
            Xo[:, j] = col[rng.permutation(rows.size)]
            inc[j] = np.mean((yo - tree.predict(Xo)) ** 2) - base
            Xo[:, j] = col
        return inc

    results = [r for r in _pool_map(per_tree, range(forest.n_trees), n_jobs) if r is not None]
    if not results:
        raise OOBUndefinedError("no tree has out-of-bag rows")
    D = np.vstack(results)
    mean = D.mean(axis=0)
    std = D.std(axis=0, ddof=1) if D.shape[0] > 1 else np.zeros(p)
    with np.errstate(invalid="ignore", divide="ignore"):
        normalized = np.where(std > 0, mean / np.where(std > 0, std, 1.0), mean)
    names = forest.feature_names if len(forest.feature_names) == p else tuple(f"x{i}" for i in range(p))
    return ImportanceRanking(tuple(names), mean, std, normalized, D.shape[0])


def rank_features(ranking: ImportanceRanking) -> list[str]:
    return [ranking.names[i] for i in ranking.order]
