"""Bootstrap regression and classification forests used by the imputer.

Trees are grown and applied inside the kernel, one tree at a time, so no
forest is ever materialized.  Binary ``±1`` targets are fit as regression on
the labels (variance reduction on ``±1`` equals Gini impurity); the ensemble
mean is the vote margin and its sign is the majority vote.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import _backend


def default_mtry(n_predictors: int) -> int:
    return max(1, math.isqrt(n_predictors + 1)) if n_predictors > 0 else 0


def _prep(X, target, predictors, rows, weights):
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(X[:, target])
    pred = np.ascontiguousarray(predictors, dtype=np.int64)
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    if weights is None:
        cum_w = np.empty(0)
    else:
        cum_w = np.ascontiguousarray(np.cumsum(np.asarray(weights, dtype=float)[rows]))
    return X, y, pred, rows, cum_w


def grow_cart_tree(X, target, predictors, train_rows, mtry, min_node=5, max_depth=None, seed=0, weights=None, kernels=None):
    """One bootstrap tree; returns ``(feature, threshold, left, right, value)``."""
    k = kernels or _backend.kernels
    X, y, pred, rows, cum_w = _prep(X, target, predictors, train_rows, weights)
    depth = -1 if max_depth is None else int(max_depth)
    return k.cart_grow_tree(X, y, rows, pred, cum_w, int(mtry), float(min_node), depth, k.tree_seed(seed, 0))


def forest_predict(
    X,
    target,
    predictors,
    train_rows,
    query_rows,
    n_trees=500,
    mtry=None,
    min_node=5,
    max_depth=None,
    seed=0,
    weights=None,
    classify=False,
    threads=1,
    kernels=None,
):
    """Predict ``X[query_rows, target]`` from a forest fit on ``train_rows``.

    ``weights`` switches to a weight-proportional bootstrap.  With
    ``classify`` the result is the majority label in ``{-1, +1}`` (ties go to
    ``+1``).  The output does not depend on ``threads``: trees are seeded by
    index and their predictions averaged in index order.
    """
    k = kernels or _backend.kernels
    X, y, pred, rows, cum_w = _prep(X, target, predictors, train_rows, weights)
    query = np.ascontiguousarray(query_rows, dtype=np.int64)
    if query.size == 0:
        return np.empty(0)
    m = default_mtry(pred.shape[0]) if mtry is None else int(mtry)
    if not 1 <= m <= pred.shape[0]:
        raise ValueError(f"mtry={m} outside 1..{pred.shape[0]}")
    depth = -1 if max_depth is None else int(max_depth)
    seed = int(seed) & ((1 << 64) - 1)

    def block(bounds):
        a, b = bounds
        return k.cart_forest_predict(X, y, rows, query, pred, cum_w, m, float(min_node), depth, seed, a, b)

    threads = max(1, int(threads or 1))
    if threads == 1:
        per_tree = block((0, n_trees))
    else:
        edges = np.linspace(0, n_trees, min(threads, n_trees) + 1).astype(int)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_tree = np.vstack(list(pool.map(block, zip(edges[:-1], edges[1:]))))
    mean = per_tree.mean(axis=0)
    # unanimous trees: return the common value exactly
    same = per_tree.min(axis=0) == per_tree.max(axis=0)
    mean[same] = per_tree[0, same]
    if classify:
        return np.where(mean >= 0, 1.0, -1.0)
    return mean
