"""Random survival forests for competing risks.

Trees are grown on weight-proportional bootstrap samples.  At each node a
random subset of ``mtry`` predictors is drawn and the (predictor, threshold)
pair maximizing a two-sample weighted log-rank statistic for the primary
cause is chosen.  Under ``subdistribution_logrank`` subjects who died keep
contributing to later risk sets with IPCW weight ``G(t-)/G(T_i-)``, so the
split targets the same quantity as the Fine-Gray model.  Terminal nodes store
the Aalen-Johansen cumulative incidence of their in-bag members.
"""
from __future__ import annotations

import io
import json
import logging
import math
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .. import survival as sv
from ..data import Event, subject_arrays
from ..errors import DimensionMismatch, EmptySample, ForestFormatError, NoEvents, NoUsablePairs
from . import _backend

log = logging.getLogger(__name__)

SPLIT_RULES = ("subdistribution_logrank", "causespecific_logrank")
FOREST_MAGIC = b"CRSF"
FOREST_VERSION = 1
_VIMP_STREAM = 1_000_003


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 1000
    mtry: int | None = None
    min_terminal_events: int = 3
    max_depth: int | None = None
    bootstrap: str = "weighted"
    seed: int = 0
    split_rule: str = "subdistribution_logrank"
    vimp_horizon: float | None = None
    vimp_repetitions: int = 1
    threads: int = 1

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1")
        if self.min_terminal_events < 1:
            raise ValueError("min_terminal_events must be >= 1")
        if self.bootstrap not in ("weighted", "uniform", "none"):
            raise ValueError(f"unknown bootstrap mode {self.bootstrap!r}")
        if self.split_rule not in SPLIT_RULES:
            raise ValueError(f"unknown split rule {self.split_rule!r}")
        if self.vimp_repetitions < 1:
            raise ValueError("vimp_repetitions must be >= 1")

    def resolved_mtry(self, M: int) -> int:
        m = self.mtry if self.mtry is not None else math.ceil(math.sqrt(M))
        if m > M:
            raise ValueError(f"mtry={m} exceeds the number of predictors {M}")
        return m


@dataclass(frozen=True)
class SurvivalData:
    X: np.ndarray
    entry: np.ndarray
    exit: np.ndarray
    event: np.ndarray
    weight: np.ndarray
    names: tuple = ()
    domains: tuple = ()

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=float)
        object.__setattr__(self, "X", X)
        n, M = X.shape
        if not self.names:
            object.__setattr__(self, "names", tuple(f"x{j}" for j in range(M)))
        if not self.domains:
            object.__setattr__(self, "domains", ("",) * M)
        for a in ("entry", "exit", "weight"):
            object.__setattr__(self, a, np.asarray(getattr(self, a), dtype=float))
        object.__setattr__(self, "event", np.asarray(self.event, dtype=np.int64))
        if np.isnan(X).any():
            raise ValueError("covariates must be complete (impute upstream)")

    @classmethod
    def from_subjects(cls, subjects, names=(), domains=()) -> "SurvivalData":
        entry, exit_, event, weight, _, X = subject_arrays(subjects)
        return cls(X, entry, exit_, event, weight, tuple(names), tuple(domains))

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def M(self):
        return self.X.shape[1]


@dataclass
class SurvTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_ptr: np.ndarray  # per node offsets into the leaf curve arrays
    leaf_times: np.ndarray
    leaf_cif: np.ndarray  # (2, len) dementia / death
    cif_tau: np.ndarray  # per node CIF_dementia(horizon); nan for internal nodes
    inbag: np.ndarray

    @property
    def n_nodes(self):
        return self.feature.shape[0]

    def is_leaf(self):
        return self.feature < 0

    def apply(self, X, rows=None, kernels=None):
        k = kernels or _backend.kernels
        X = np.ascontiguousarray(X, dtype=float)
        rows = np.arange(X.shape[0], dtype=np.int64) if rows is None else np.asarray(rows, dtype=np.int64)
        return k.apply_tree(self.feature, self.threshold, self.left, self.right, X, rows)

    def leaf_curve(self, node):
        a, b = self.leaf_ptr[node], self.leaf_ptr[node + 1]
        return self.leaf_times[a:b], self.leaf_cif[:, a:b]

    def used_features(self):
        return np.unique(self.feature[self.feature >= 0])


@dataclass
class Forest:
    config: ForestConfig
    data: SurvivalData
    trees: list
    horizon: float
    grid: np.ndarray
    censoring: sv.SurvCurve
    stratum: str = ""
    backend: str = field(default=_backend.NAME)

    @property
    def inbag(self):
        return np.vstack([t.inbag for t in self.trees])


# ---------------------------------------------------------------------------
# growing


class _Context:
    """Per-forest quantities shared read-only by all trees."""

    def __init__(self, data: SurvivalData, cfg: ForestConfig, kernels):
        self.data = data
        self.cfg = cfg
        self.kernels = kernels
        self.mtry = cfg.resolved_mtry(data.M)
        idx = sv.RiskSetIndex.from_arrays(data.entry, data.exit, data.event, data.weight)
        self.censoring = sv.censoring_survival(idx)
        g_exit = self._g_left(data.exit)
        self.tail_c = np.zeros(data.n)
        if cfg.split_rule == "subdistribution_logrank":
            comp = data.event == int(Event.DEATH)
            self.tail_c[comp] = 1.0 / g_exit[comp]
        self.horizon = resolve_horizon(data, cfg.vimp_horizon)

    def _g_left(self, t):
        g = self.censoring.left(t)
        bad = g <= 0
        if np.any(bad):
            pos = self.censoring.survival[self.censoring.survival > 0]
            g = np.where(bad, pos[-1] if pos.size else 1.0, g)
        return g


def resolve_horizon(data: SurvivalData, horizon=None) -> float:
    if horizon is not None:
        return float(horizon)
    ages = data.exit[data.event > 0]
    if ages.size == 0:
        raise NoEvents("no observed events")
    return float(np.quantile(ages, 0.9))


def draw_inbag(n, weight, mode, rng) -> np.ndarray:
    """Bootstrap multiplicities: ``n`` draws with replacement."""
    if mode == "none":
        return np.ones(n, dtype=np.int64)
    if mode == "weighted":
        p = weight / weight.sum()
        draws = rng.choice(n, size=n, replace=True, p=p)
    else:
        draws = rng.integers(0, n, size=n)
    return np.bincount(draws, minlength=n)


def grow_tree(data: SurvivalData, inbag, cfg: ForestConfig, rng=None, kernels=None, _ctx=None) -> SurvTree:
    """Grow one competing-risks survival tree on the in-bag multiset.

    ``inbag`` holds the multiplicity of every subject (0 = out of bag).
    """
    kernels = kernels or _backend.kernels
    ctx = _ctx or _Context(data, cfg, kernels)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    inbag = np.asarray(inbag, dtype=np.int64)
    rows0 = np.flatnonzero(inbag > 0)
    if rows0.size == 0:
        raise EmptySample("in-bag sample is empty")

    X, entry, exit_, event = data.X, data.entry, data.exit, data.event
    M = data.M
    min_ev = float(cfg.min_terminal_events)
    max_depth = -1 if cfg.max_depth is None else cfg.max_depth

    feature, threshold, left, right = [-1], [0.0], [-1], [-1]
    leaves = {}
    stack = [(rows0, 0, 0)]
    while stack:
        rows, depth, nid = stack.pop()
        w = inbag[rows].astype(float)
        primary = event[rows] == int(Event.DEMENTIA)
        n_events = w[primary].sum()
        split = None
        if n_events >= 2 * min_ev and depth != max_depth:
            split = _best_split(ctx, rows, w, primary, M, rng)
        if split is None:
            leaves[nid] = rows
            continue
        f, thr = split
        goes_left = X[rows, f] <= thr
        lid = len(feature)
        feature += [-1, -1]
        threshold += [0.0, 0.0]
        left += [-1, -1]
        right += [-1, -1]
        feature[nid], threshold[nid], left[nid], right[nid] = f, thr, lid, lid + 1
        stack.append((rows[~goes_left], depth + 1, lid + 1))
        stack.append((rows[goes_left], depth + 1, lid))

    n_nodes = len(feature)
    ptr = np.zeros(n_nodes + 1, dtype=np.int64)
    times, cifs = [], []
    cif_tau = np.full(n_nodes, np.nan)
    for nid in range(n_nodes):
        if nid in leaves:
            rows = leaves[nid]
            curve = sv._aalen_johansen_arrays(entry[rows], exit_[rows], event[rows], inbag[rows].astype(float))
            times.append(curve.ages)
            cifs.append(np.vstack((curve.cif[Event.DEMENTIA], curve.cif[Event.DEATH])))
            cif_tau[nid] = float(curve(ctx.horizon, Event.DEMENTIA))
            ptr[nid + 1] = ptr[nid] + curve.ages.shape[0]
        else:
            ptr[nid + 1] = ptr[nid]
    return SurvTree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=float),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        leaf_ptr=ptr,
        leaf_times=np.concatenate(times) if times else np.empty(0),
        leaf_cif=np.hstack(cifs) if cifs else np.empty((2, 0)),
        cif_tau=cif_tau,
        inbag=inbag.astype(np.uint16),
    )


def node_risk_inputs(ctx: _Context, rows, w, primary):
    """Grid-indexed inputs of the log-rank kernel for one node."""
    data = ctx.data
    times = np.unique(data.exit[rows][primary])
    T = times.shape[0]
    s = np.searchsorted(times, data.entry[rows], side="right")
    e = np.searchsorted(times, data.exit[rows], side="right")
    ev = np.where(primary, e - 1, -1)
    tailc = np.where(e < T, ctx.tail_c[rows], 0.0)
    gm = ctx._g_left(times)
    d = np.bincount(ev[primary], weights=w[primary], minlength=T).astype(float)
    Y = np.cumsum(np.bincount(s, weights=w, minlength=T + 1) - np.bincount(e, weights=w, minlength=T + 1))[:T]
    tails = tailc > 0
    if tails.any():
        Y = Y + gm * np.cumsum(np.bincount(e[tails], weights=w[tails] * tailc[tails], minlength=T + 1))[:T]
    return s.astype(np.int64), e.astype(np.int64), ev.astype(np.int64), tailc, d, Y, gm


def _best_split(ctx: _Context, rows, w, primary, M, rng):
    s, e, ev, tailc, d, Y, gm = node_risk_inputs(ctx, rows, w, primary)
    feats = np.sort(rng.choice(M, size=ctx.mtry, replace=False)).astype(np.int64)
    f, thr, stat = ctx.kernels.logrank_best_split(
        ctx.data.X, rows.astype(np.int64), feats, w, s, e, ev, tailc, d, Y, gm, float(ctx.cfg.min_terminal_events)
    )
    if f < 0 or not stat > 0:
        return None
    return int(f), float(thr)


def _tree_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def grow_forest(data, cfg: ForestConfig = ForestConfig(), stratum: str = "", kernels=None) -> Forest:
    """Grow ``cfg.n_trees`` trees; output is independent of ``cfg.threads``."""
    if not isinstance(data, SurvivalData):
        data = SurvivalData.from_subjects(data)
    if data.n < 2:
        raise EmptySample("need at least two subjects")
    if not np.any(data.event == int(Event.DEMENTIA)):
        raise NoEvents("no dementia events")
    kernels = kernels or _backend.kernels
    ctx = _Context(data, cfg, kernels)

    def one(b):
        rng = _tree_rng(cfg.seed, b)
        inbag = draw_inbag(data.n, data.weight, cfg.bootstrap, rng)
        return grow_tree(data, inbag, cfg, rng=rng, kernels=kernels, _ctx=ctx)

    trees = _map(one, range(cfg.n_trees), cfg.threads)
    grid = np.unique(data.exit[data.event > 0])
    return Forest(
        config=cfg,
        data=data,
        trees=trees,
        horizon=ctx.horizon,
        grid=grid,
        censoring=ctx.censoring,
        stratum=stratum,
        backend="compiled" if kernels is _backend.compiled else "python",
    )


def _map(fn, items, threads):
    items = list(items)
    if threads is None or threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# prediction


def predict_cif(forest: Forest, x) -> sv.CifCurve:
    """Ensemble cumulative incidence for one covariate vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != forest.data.M:
        raise DimensionMismatch(f"expected {forest.data.M} covariates, got shape {x.shape}")
    grid = forest.grid
    acc = np.zeros((2, grid.shape[0]))
    X1 = x[None, :]
    for tree in forest.trees:
        node = int(tree.apply(X1)[0])
        times, cif = tree.leaf_curve(node)
        i = np.searchsorted(times, grid, side="right")
        padded = np.hstack((np.zeros((2, 1)), cif))
        acc += padded[:, i]
    acc /= len(forest.trees)
    return sv.CifCurve(
        ages=grid,
        cif={Event.DEMENTIA: acc[0], Event.DEATH: acc[1]},
        survival=1.0 - acc[0] - acc[1],
    )


# ---------------------------------------------------------------------------
# out-of-bag error and permutation importance


def truncated_concordance(time, event, score, horizon=np.inf) -> float:
    """Concordance of a dementia risk score with competing-risk outcomes.

    A pair (i, j) is usable when ``i`` has dementia at ``t_i <= horizon`` and
    ``j`` is known to be dementia-free at ``t_i``: ``t_j > t_i``, or
    ``t_j == t_i`` without dementia, or ``j`` died before ``t_i``.  Pairs are
    concordant when ``i`` scores higher; ties count one half.
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event)
    score = np.asarray(score, dtype=float)
    cases = np.flatnonzero((event == int(Event.DEMENTIA)) & (time <= horizon))
    num = 0.0
    den = 0.0
    is_dem = event == int(Event.DEMENTIA)
    is_death = event == int(Event.DEATH)
    for chunk in np.array_split(cases, max(1, cases.size // 256)):
        if chunk.size == 0:
            continue
        ti = time[chunk][:, None]
        usable = (time[None, :] > ti) | ((time[None, :] == ti) & ~is_dem[None, :]) | (is_death[None, :] & (time[None, :] < ti))
        si = score[chunk][:, None]
        num += np.sum(usable & (si > score[None, :])) + 0.5 * np.sum(usable & (si == score[None, :]))
        den += usable.sum()
    if den == 0:
        raise NoUsablePairs("no usable pairs for concordance")
    return float(num / den)


def _oob_parts(forest: Forest, X, kernels=None):
    """Per-tree (oob rows, node CIF values) and their per-subject sums."""
    n = forest.data.n
    sums = np.zeros(n)
    counts = np.zeros(n)
    parts = []
    for tree in forest.trees:
        oob = np.flatnonzero(tree.inbag == 0).astype(np.int64)
        vals = tree.cif_tau[tree.apply(X, oob, kernels)] if oob.size else np.empty(0)
        parts.append((oob, vals))
        np.add.at(sums, oob, vals)
        counts[oob] += 1
    return parts, sums, counts


def _error_from(forest, sums, counts):
    ok = counts > 0
    score = np.zeros_like(sums)
    score[ok] = sums[ok] / counts[ok]
    d = forest.data
    return 1.0 - truncated_concordance(d.exit[ok], d.event[ok], score[ok], forest.horizon)


def oob_error(forest: Forest, kernels=None) -> float:
    """1 - truncated concordance of OOB ensemble CIF_dementia(horizon)."""
    _, sums, counts = _oob_parts(forest, forest.data.X, kernels)
    missing = int(np.count_nonzero(counts == 0))
    if missing:
        warnings.warn(f"{missing} subjects are never out of bag and are excluded", stacklevel=2)
    return _error_from(forest, sums, counts)


@dataclass(frozen=True)
class VimpRow:
    predictor: str
    domain: str
    importance: float
    rank: int

    @property
    def negative(self) -> bool:
        return self.importance < 0


@dataclass(frozen=True)
class VimpTable:
    stratum: str
    rows: tuple
    baseline_error: float = float("nan")

    def ranks(self) -> dict:
        return {r.predictor: r.rank for r in self.rows}

    def importances(self) -> dict:
        return {r.predictor: r.importance for r in self.rows}


def rank_importances(names, importances):
    """Ranks 1..M by descending importance; ties keep predictor order."""
    imp = np.asarray(importances, dtype=float)
    order = sorted(range(len(names)), key=lambda j: (-imp[j], j))
    ranks = np.empty(len(names), dtype=np.int64)
    ranks[order] = np.arange(1, len(names) + 1)
    return order, ranks


def vimp(forest: Forest, repetitions=None, threads=None, kernels=None) -> VimpTable:
    """Permutation importance: OOB error after permuting a predictor minus baseline.

    Negative values mean permuting the predictor did not hurt; read them as
    noise.
    """
    cfg = forest.config
    reps = repetitions or cfg.vimp_repetitions
    threads = cfg.threads if threads is None else threads
    data = forest.data
    X = data.X
    parts, sums, counts = _oob_parts(forest, X, kernels)
    base = _error_from(forest, sums, counts)
    using = [set(t.used_features().tolist()) for t in forest.trees]

    def one(j):
        errs = []
        for r in range(reps):
            if not any(j in u for u in using):
                errs.append(base)
                continue
            rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(_VIMP_STREAM, j, r)))
            Xp = X.copy()
            Xp[:, j] = X[rng.permutation(data.n), j]
            s = sums.copy()
            for tree, u, (oob, vals) in zip(forest.trees, using, parts):
                if j not in u or oob.size == 0:
                    continue
                new = tree.cif_tau[tree.apply(Xp, oob, kernels)]
                np.add.at(s, oob, new - vals)
            errs.append(_error_from(forest, s, counts))
        return float(np.mean(errs)) - base

    imp = _map(one, range(data.M), threads)
    order, ranks = rank_importances(data.names, imp)
    rows = tuple(
        VimpRow(data.names[j], data.domains[j] if data.domains else "", float(imp[j]), int(ranks[j])) for j in order
    )
    return VimpTable(stratum=forest.stratum, rows=rows, baseline_error=base)


# ---------------------------------------------------------------------------
# persistence


def save_forest(forest: Forest, path) -> None:
    """Versioned binary container: magic, version, then an npz archive."""
    arrays = {}
    d = forest.data
    for name in ("X", "entry", "exit", "event", "weight"):
        arrays[f"data_{name}"] = getattr(d, name)
    for key in ("feature", "threshold", "left", "right", "leaf_ptr", "leaf_times", "leaf_cif", "cif_tau", "inbag"):
        parts = [getattr(t, key) for t in forest.trees]
        arrays[f"tree_{key}"] = np.concatenate(parts, axis=-1)
        arrays[f"tree_{key}_len"] = np.array([p.shape[-1] for p in parts], dtype=np.int64)
    arrays["grid"] = forest.grid
    arrays["cens_ages"] = forest.censoring.ages
    arrays["cens_surv"] = forest.censoring.survival
    meta = {
        "config": asdict(forest.config),
        "names": list(d.names),
        "domains": list(d.domains),
        "stratum": forest.stratum,
        "horizon": forest.horizon,
        "backend": forest.backend,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez_compressed(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(FOREST_MAGIC + struct.pack("<H", FOREST_VERSION))
        fh.write(buf.getvalue())


def load_forest(path) -> Forest:
    with open(path, "rb") as fh:
        head = fh.read(6)
        if head[:4] != FOREST_MAGIC:
            raise ForestFormatError(f"{path}: not a forest file")
        (version,) = struct.unpack("<H", head[4:])
        if version != FOREST_VERSION:
            raise ForestFormatError(f"{path}: unsupported forest version {version}")
        z = np.load(io.BytesIO(fh.read()))
    meta = json.loads(bytes(z["meta"]).decode())
    cfg = ForestConfig(**meta["config"])
    data = SurvivalData(
        z["data_X"], z["data_entry"], z["data_exit"], z["data_event"], z["data_weight"],
        tuple(meta["names"]), tuple(meta["domains"]),
    )
    split = {}
    for key in ("feature", "threshold", "left", "right", "leaf_ptr", "leaf_times", "leaf_cif", "cif_tau", "inbag"):
        cuts = np.cumsum(z[f"tree_{key}_len"])[:-1]
        split[key] = np.split(z[f"tree_{key}"], cuts, axis=-1)
    trees = [SurvTree(**{k: split[k][b] for k in split}) for b in range(cfg.n_trees)]
    return Forest(
        config=cfg,
        data=data,
        trees=trees,
        horizon=meta["horizon"],
        grid=z["grid"],
        censoring=sv.SurvCurve(z["cens_ages"], z["cens_surv"]),
        stratum=meta["stratum"],
        backend=meta["backend"],
    )


def with_config(forest: Forest, **changes) -> Forest:
    return replace(forest, config=replace(forest.config, **changes))
