"""Iterative random-forest imputation of mixed ±1 / continuous matrices.

Missing cells are first filled with column means (continuous) or the observed
majority label (binary).  Each iteration then visits columns from least to
most missing, fits a forest of that column on all others using the rows where
it was observed, and overwrites only its originally-missing cells.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import AllMissingColumn, EmptyMatrix
from .forest import cart

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ImputeConfig:
    iterations: int = 5
    trees_per_forest: int = 500
    mtry: int | None = None
    min_node: int = 5
    seed: int = 0
    use_weights: bool = False
    per_stratum: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.trees_per_forest < 1:
            raise ValueError("trees_per_forest must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1")
        if self.min_node < 1:
            raise ValueError("min_node must be >= 1")

    def resolved_mtry(self, p: int) -> int:
        """Default ``floor(sqrt(p))`` for ``p`` columns, i.e. ``p - 1`` predictors."""
        m = math.isqrt(p) if self.mtry is None else self.mtry
        if m > max(p - 1, 0):
            if self.mtry is not None:
                raise ValueError(f"mtry={m} exceeds the {p - 1} available predictors")
            m = p - 1
        return m


@dataclass(frozen=True)
class ImputedMatrix:
    values: np.ndarray
    mask: np.ndarray
    per_iteration_change: tuple
    column_order: tuple = ()
    column_change: tuple = field(default=(), repr=False)

    def report(self, names=None) -> dict:
        p = self.values.shape[1]
        names = list(names) if names is not None else [f"x{j}" for j in range(p)]
        return {
            "n": int(self.values.shape[0]),
            "missing_fraction": {names[j]: float(self.mask[:, j].mean()) for j in range(p)},
            "visit_order": [names[j] for j in self.column_order],
            "per_iteration_change": list(self.per_iteration_change),
            "per_column_change": [{names[j]: c for j, c in it.items()} for it in self.column_change],
        }

    def report_json(self, names=None) -> str:
        return json.dumps(self.report(names), indent=2)


def _binary_columns(X, specs):
    if specs is not None:
        return np.array([s.is_binary for s in specs], dtype=bool)
    out = np.zeros(X.shape[1], dtype=bool)
    for j in range(X.shape[1]):
        v = X[:, j][~np.isnan(X[:, j])]
        out[j] = v.size > 0 and np.all((v == 1.0) | (v == -1.0))
    return out


def fill_initial(matrix, specs=None, binary=None) -> np.ndarray:
    """Mean fill for continuous columns, majority label for binary (ties to +1)."""
    X = np.array(matrix, dtype=float, copy=True)
    if X.ndim != 2 or X.size == 0:
        raise EmptyMatrix("matrix is empty")
    binary = _binary_columns(X, specs) if binary is None else binary
    for j in range(X.shape[1]):
        col = X[:, j]
        miss = np.isnan(col)
        if miss.all():
            raise AllMissingColumn(f"column {j} has no observed values")
        if not miss.any():
            continue
        obs = col[~miss]
        if binary[j]:
            col[miss] = 1.0 if np.count_nonzero(obs > 0) >= np.count_nonzero(obs < 0) else -1.0
        else:
            col[miss] = obs.mean()
    return X


def _column_change(old, new, is_binary):
    if old.size == 0:
        return 0.0
    if is_binary:
        return float(np.mean(old != new))
    den = float(np.sum(new * new))
    num = float(np.sum((new - old) ** 2))
    return num / den if den > 0 else num


def _seed_for(seed, iteration, column):
    ss = np.random.SeedSequence(int(seed) & ((1 << 64) - 1), spawn_key=(iteration, column))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def impute(matrix, specs=None, cfg: ImputeConfig = ImputeConfig(), weights=None, groups=None, kernels=None) -> ImputedMatrix:
    """Impute missing (NaN) cells of ``matrix``.

    Parameters
    ----------
    matrix : (n, p) array_like
        Coded covariates; NaN marks a missing cell.
    specs : list of CovariateSpec, optional
        Decides which columns are binary.  Inferred from observed values if
        omitted.
    cfg : ImputeConfig
    weights : array_like, optional
        Used for a weight-proportional bootstrap when ``cfg.use_weights``.
    groups : array_like, optional
        Stratum labels; imputation runs separately per group when
        ``cfg.per_stratum``.
    """
    X0 = np.asarray(matrix, dtype=float)
    if X0.ndim != 2 or X0.shape[0] == 0 or X0.shape[1] == 0:
        raise EmptyMatrix("matrix is empty")
    if X0.shape[0] < 2:
        raise EmptyMatrix("need at least two rows")
    if specs is not None and len(specs) != X0.shape[1]:
        raise ValueError("specs do not match the number of columns")
    binary = _binary_columns(X0, specs)
    if cfg.per_stratum and groups is not None:
        groups = np.asarray(groups)
        out = X0.copy()
        changes = np.zeros(cfg.iterations)
        for g in sorted(set(groups.tolist())):
            rows = np.flatnonzero(groups == g)
            w = None if weights is None else np.asarray(weights)[rows]
            part = _impute_block(X0[rows], binary, cfg, w, kernels)
            out[rows] = part.values
            changes += np.asarray(part.per_iteration_change) * rows.size / X0.shape[0]
        mask = np.isnan(X0)
        return ImputedMatrix(out, mask, tuple(float(c) for c in changes), part.column_order)
    return _impute_block(X0, binary, cfg, weights, kernels)


def _impute_block(X0, binary, cfg, weights, kernels):
    n, p = X0.shape
    mask = np.isnan(X0)
    X = fill_initial(X0, binary=binary)
    miss_count = mask.sum(axis=0)
    order = tuple(int(j) for j in np.argsort(miss_count, kind="stable"))
    targets = [j for j in order if miss_count[j] > 0]
    w = None
    if cfg.use_weights and weights is not None:
        w = np.asarray(weights, dtype=float)
    mtry = cfg.resolved_mtry(p)
    history, per_col = [], []
    for it in range(cfg.iterations):
        changes = {}
        for j in targets:
            miss_rows = np.flatnonzero(mask[:, j])
            obs_rows = np.flatnonzero(~mask[:, j])
            old = X[miss_rows, j].copy()
            if p == 1:
                new = old
            else:
                preds = np.array([k for k in range(p) if k != j], dtype=np.int64)
                new = cart.forest_predict(
                    X,
                    j,
                    preds,
                    obs_rows,
                    miss_rows,
                    n_trees=cfg.trees_per_forest,
                    mtry=mtry,
                    min_node=cfg.min_node,
                    seed=_seed_for(cfg.seed, it, j),
                    weights=w,
                    classify=bool(binary[j]),
                    threads=cfg.threads,
                    kernels=kernels,
                )
            X[miss_rows, j] = new
            changes[j] = _column_change(old, new, binary[j])
        per_col.append(changes)
        history.append(float(np.mean(list(changes.values()))) if changes else 0.0)
        log.debug("imputation iteration %d change %.3g", it + 1, history[-1])
    X[~mask] = X0[~mask]
    return ImputedMatrix(X, mask, tuple(history), order, tuple(per_col))


def config_dict(cfg: ImputeConfig) -> dict:
    return asdict(cfg)
