"""Stratified analysis: descriptives, correlations, per-predictor model sweeps,
forests with variable importance, rank aggregation and table emission."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import survival as sv
from .data import STRATA, Event
from .errors import CrsurvError, InconsistentPredictorSets
from .forest import _backend
from .forest.rsf import ForestConfig, SurvivalData, VimpTable, grow_forest, vimp
from .tables import AnalysisTable, read_rows, to_float, write_json, write_rows

log = logging.getLogger(__name__)

MODELS = ("finegray", "causespecific")


def stratum_sex(stratum: str) -> str | None:
    s = stratum.lower()
    if s.endswith("-women"):
        return "women"
    if s.endswith("-men"):
        return "men"
    return None


def applicable(spec, stratum: str) -> bool:
    """False for sex-specific predictors in strata of the other sex."""
    sex = stratum_sex(stratum)
    return not (spec.sex_specific and sex is not None and spec.sex_specific != sex)


# ---------------------------------------------------------------------------
# descriptives


@dataclass(frozen=True)
class DescRow:
    stratum: str
    predictor: str
    domain: str
    kind: str
    estimate: float
    se: float
    n: int
    missing_fraction: float


def weighted_mean_se(x, w, cluster):
    """Ratio-mean ``sum(w x) / sum(w)`` with a cluster-linearized standard error.

    ``se^2 = H/(H-1) * sum_h (sum_{i in h} w_i (x_i - m) / W)^2`` over ``H``
    clusters.
    """
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    W = w.sum()
    m = float(np.sum(w * x) / W)
    z = w * (x - m) / W
    _, inv = np.unique(np.asarray(cluster), return_inverse=True)
    zh = np.bincount(inv.ravel(), weights=z)
    H = zh.shape[0]
    se = math.sqrt(H / (H - 1) * float(np.sum(zh * zh))) if H > 1 else math.nan
    return m, se


def describe(table: AnalysisTable, stratum: str = "all") -> list:
    """Weighted mean (continuous) or proportion on the 0/1 scale (binary) per covariate."""
    rows = []
    w = table.analysis_weight
    hh = np.asarray(table.household, dtype=object)
    for j, s in enumerate(table.specs):
        x = table.X[:, j]
        ok = ~np.isnan(x) & (w > 0)
        v = (x[ok] + 1.0) / 2.0 if s.is_binary else x[ok]
        if ok.sum() == 0:
            m, se = math.nan, math.nan
        else:
            m, se = weighted_mean_se(v, w[ok], hh[ok])
        rows.append(
            DescRow(
                stratum=stratum,
                predictor=s.name,
                domain=s.domain.value if s.domain else "",
                kind=s.kind.value,
                estimate=m,
                se=se,
                n=int(ok.sum()),
                missing_fraction=float(np.isnan(x).mean()) if x.size else 0.0,
            )
        )
    return rows


def correlations(table: AnalysisTable, stratum: str | None = None) -> np.ndarray:
    """Weighted Pearson correlations; zero-variance columns give NaN rows."""
    if stratum is not None:
        table = table.select(np.asarray(table.stratum) == stratum)
    if table.n < 2:
        raise CrsurvError(f"stratum {stratum!r} has fewer than two subjects")
    X, w = table.X, table.analysis_weight
    p = X.shape[1]
    R = np.full((p, p), np.nan)
    for a in range(p):
        for b in range(a, p):
            ok = ~np.isnan(X[:, a]) & ~np.isnan(X[:, b]) & (w > 0)
            r = _wcorr(X[ok, a], X[ok, b], w[ok])
            R[a, b] = R[b, a] = r
    return R


def _wcorr(x, y, w):
    if x.size < 2:
        return math.nan
    W = w.sum()
    dx = x - np.sum(w * x) / W
    dy = y - np.sum(w * y) / W
    sxx, syy = np.sum(w * dx * dx), np.sum(w * dy * dy)
    if not (sxx > 0 and syy > 0):
        return math.nan
    if np.array_equal(x, y):
        return 1.0
    return float(np.clip(np.sum(w * dx * dy) / math.sqrt(sxx * syy), -1.0, 1.0))


# ---------------------------------------------------------------------------
# model sweep


@dataclass(frozen=True)
class SweepRow:
    stratum: str
    predictor: str
    domain: str
    model: str
    status: str
    fit: sv.FitResult | None = None

    @property
    def formatted(self) -> str:
        return sv.format_hr(self.fit) if self.fit is not None else "NA"


def run_sweep(table: AnalysisTable, model: str, stratum: str | None = None, threads: int = 1) -> list:
    """One single-predictor model per covariate; failures become statuses."""
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}")
    if stratum is not None:
        table = table.select(np.asarray(table.stratum) == stratum)
    label = stratum or "all"
    fitter = sv.fine_gray_fit if model == "finegray" else sv.cox_fit
    specs = [(j, s) for j, s in enumerate(table.specs) if applicable(s, label)]
    if table.n == 0:
        return [SweepRow(label, s.name, _dom(s), model, "EmptyCohort") for _, s in specs]
    idx = sv.RiskSetIndex.from_arrays(table.entry, table.exit, table.event, table.analysis_weight, np.asarray(table.household, dtype=object))
    if not np.any((table.event == int(Event.DEMENTIA)) & (table.analysis_weight > 0)):
        return [SweepRow(label, s.name, _dom(s), model, "NoEvents") for _, s in specs]

    def one(item):
        j, s = item
        x = table.X[:, j]
        ok = ~np.isnan(x)
        sub, xs = (idx, x) if ok.all() else (idx.subset(ok), x[ok])
        live = xs[sub.weight > 0]
        if live.size == 0 or np.ptp(live) == 0:
            return SweepRow(label, s.name, _dom(s), model, "ZeroVariance")
        try:
            return SweepRow(label, s.name, _dom(s), model, "ok", fitter(sub, xs))
        except CrsurvError as exc:
            return SweepRow(label, s.name, _dom(s), model, type(exc).__name__)

    return _map(one, specs, threads)


def _dom(spec):
    return spec.domain.value if spec.domain else ""


def _map(fn, items, threads):
    items = list(items)
    if not threads or threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# rank aggregation


@dataclass(frozen=True)
class RankRow:
    predictor: str
    stratum_ranks: dict
    mean_rank: float
    overall: int


@dataclass(frozen=True)
class OverallRanking:
    rows: tuple
    strata: tuple

    def order(self) -> list:
        return [r.predictor for r in self.rows]


def _as_ranks(table) -> dict:
    if isinstance(table, VimpTable):
        return table.ranks()
    return {str(k): int(v) for k, v in dict(table).items()}


def rank_aggregate(tables: dict, exempt=(), missing: str = "worst") -> OverallRanking:
    """Overall order by the unweighted mean of per-stratum ranks.

    Parameters
    ----------
    tables : dict
        Stratum label to :class:`VimpTable` or ``{predictor: rank}``.
    exempt : iterable of str
        Predictors allowed to be absent from some strata (sex-specific ones).
    missing : {"worst", "available"}
        ``"worst"`` assigns an absent predictor the worst rank, the size of
        the predictor union; ``"available"`` averages over strata where the
        predictor was ranked.
    """
    if missing not in ("worst", "available"):
        raise ValueError(f"unknown missing-rank rule {missing!r}")
    strata = tuple(sorted(tables))
    ranks = {s: _as_ranks(tables[s]) for s in strata}
    union = sorted(set().union(*(r.keys() for r in ranks.values()))) if ranks else []
    exempt = set(exempt)
    worst = len(union)
    per = {}
    for p in union:
        vals = {}
        for s in strata:
            if p in ranks[s]:
                vals[s] = ranks[s][p]
            elif p not in exempt:
                raise InconsistentPredictorSets(f"{p!r} missing from stratum {s!r}")
            elif missing == "worst":
                vals[s] = worst
        per[p] = vals
    key = {p: (float(np.mean(list(v.values()))), min(v.values()), p) for p, v in per.items()}
    order = sorted(union, key=lambda p: key[p])
    rows = tuple(
        RankRow(p, {s: ranks[s].get(p) for s in strata}, key[p][0], i + 1) for i, p in enumerate(order)
    )
    return OverallRanking(rows, strata)


# ---------------------------------------------------------------------------
# orchestration


@dataclass(frozen=True)
class PipelineConfig:
    strata: tuple = STRATA
    models: tuple = MODELS
    forest: ForestConfig = field(default_factory=ForestConfig)
    run_forest: bool = True
    rank_missing: str = "worst"
    seed: int = 0
    threads: int = 1

    def to_dict(self) -> dict:
        # thread counts do not change results, so they stay out of the hash
        d = asdict(self)
        d.pop("threads")
        d["forest"].pop("threads")
        d["strata"] = list(self.strata)
        d["models"] = list(self.models)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class StratumReport:
    stratum: str
    n: int
    fits: list
    vimp: VimpTable | None
    descriptives: list
    names: list
    correlation: np.ndarray
    oob_error: float = math.nan
    warnings: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.n > 0 and not any(w.startswith("error") for w in self.warnings)


def stratum_seed(seed: int, k: int) -> int:
    ss = np.random.SeedSequence(int(seed) & ((1 << 64) - 1), spawn_key=(k,))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def analyze_stratum(table: AnalysisTable, stratum: str, cfg: PipelineConfig, k: int = 0) -> StratumReport:
    sub = table.select(np.asarray(table.stratum) == stratum)
    names = [s.name for s in sub.specs]
    rep = StratumReport(stratum, sub.n, [], None, [], names, np.full((len(names),) * 2, np.nan))
    if sub.n == 0:
        rep.warnings.append("empty stratum")
        return rep
    rep.descriptives = describe(sub, stratum)
    if sub.n >= 2:
        rep.correlation = correlations(sub)
    for model in cfg.models:
        rep.fits.extend(run_sweep(sub, model, threads=cfg.threads))
    if cfg.run_forest:
        cols = [j for j, s in enumerate(sub.specs) if applicable(s, stratum)]
        live = sub.analysis_weight > 0
        data = SurvivalData(
            sub.X[np.ix_(live, cols)],
            sub.entry[live],
            sub.exit[live],
            sub.event[live],
            sub.analysis_weight[live],
            tuple(sub.specs[j].name for j in cols),
            tuple(_dom(sub.specs[j]) for j in cols),
        )
        fcfg = ForestConfig(**{**asdict(cfg.forest), "seed": stratum_seed(cfg.seed, k), "threads": cfg.threads})
        try:
            forest = grow_forest(data, fcfg, stratum=stratum)
            rep.vimp = vimp(forest)
            rep.oob_error = rep.vimp.baseline_error
        except (CrsurvError, ValueError) as exc:
            rep.warnings.append(f"error: forest failed ({type(exc).__name__}: {exc})")
    return rep


def run_all(table: AnalysisTable, cfg: PipelineConfig = PipelineConfig()):
    """Analyze every configured stratum and aggregate the VIMP ranks."""
    reports = [analyze_stratum(table, s, cfg, k) for k, s in enumerate(cfg.strata)]
    tables = {r.stratum: r.vimp for r in reports if r.vimp is not None}
    ranking = None
    if tables:
        exempt = [s.name for s in table.specs if s.sex_specific]
        ranking = rank_aggregate(tables, exempt=exempt, missing=cfg.rank_missing)
    return reports, ranking


# ---------------------------------------------------------------------------
# emission

FIT_COLUMNS = (
    "stratum", "predictor", "domain", "model", "status", "beta", "hr", "robust_se",
    "ci_low", "ci_high", "n", "n_events", "n_clusters", "converged", "loglik", "hr_ci",
)
VIMP_COLUMNS = ("stratum", "predictor", "domain", "importance", "rank", "negative_flag")
DESC_COLUMNS = ("stratum", "predictor", "domain", "kind", "estimate", "se", "n", "missing_fraction")


def fit_rows(fits):
    out = []
    for r in fits:
        f = r.fit
        if f is None:
            out.append([r.stratum, r.predictor, r.domain, r.model, r.status] + [None] * 10 + [r.formatted])
        else:
            out.append(
                [r.stratum, r.predictor, r.domain, r.model, r.status, f.beta, f.hr, f.robust_se, f.ci95[0], f.ci95[1],
                 f.n, f.n_events, f.n_clusters, f.converged, f.loglik, r.formatted]
            )
    return out


def vimp_rows(table: VimpTable):
    return [[table.stratum, r.predictor, r.domain, r.importance, r.rank, r.negative] for r in table.rows]


def emit(reports, ranking, outdir, cfg: PipelineConfig | None = None, extra_manifest=None) -> dict:
    """Write the per-stratum tables, the overall ranking and a run manifest."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    warnings = []
    desc = []
    written = []
    for r in reports:
        tag = r.stratum
        write_rows(out / f"fits_{tag}.csv", FIT_COLUMNS, fit_rows(r.fits))
        write_rows(out / f"vimp_{tag}.csv", VIMP_COLUMNS, vimp_rows(r.vimp) if r.vimp else [])
        write_rows(
            out / f"correlations_{tag}.csv",
            ["predictor"] + r.names,
            [[name] + list(row) for name, row in zip(r.names, r.correlation)] if r.n else [],
        )
        written += [f"fits_{tag}.csv", f"vimp_{tag}.csv", f"correlations_{tag}.csv"]
        desc += [[getattr(d, c) for c in DESC_COLUMNS] for d in r.descriptives]
        warnings += [f"{tag}: {w}" for w in r.warnings]
    write_rows(out / "descriptives.csv", DESC_COLUMNS, desc)
    strata = list(ranking.strata) if ranking else []
    write_rows(
        out / "ranks_overall.csv",
        ["predictor", "overall", "mean_rank"] + strata,
        [[row.predictor, row.overall, row.mean_rank] + [row.stratum_ranks.get(s) for s in strata] for row in ranking.rows]
        if ranking
        else [],
    )
    written += ["descriptives.csv", "ranks_overall.csv"]
    manifest = {
        "crsurv": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "backend": _backend.NAME,
        "seed": cfg.seed if cfg else None,
        "config": cfg.to_dict() if cfg else None,
        "config_sha256": cfg.digest() if cfg else None,
        "strata": {r.stratum: {"n": r.n, "ok": r.ok, "oob_error": r.oob_error} for r in reports},
        "warnings": warnings,
        "files": sorted(written),
    }
    manifest.update(extra_manifest or {})
    write_json(out / "manifest.json", manifest)
    return manifest


def read_fits(path) -> list:
    """Parse an emitted fits CSV back into :class:`SweepRow` objects."""
    _, rows = read_rows(path)
    out = []
    for r in rows:
        fit = None
        if r["status"] == "ok":
            fit = sv.FitResult(
                beta=to_float(r["beta"]),
                hr=to_float(r["hr"]),
                robust_se=to_float(r["robust_se"]),
                ci95=(to_float(r["ci_low"]), to_float(r["ci_high"])),
                n_clusters=int(r["n_clusters"]),
                loglik=to_float(r["loglik"]),
                converged=r["converged"] == "1",
                n=int(r["n"]),
                n_events=int(r["n_events"]),
                model=r["model"],
            )
        out.append(SweepRow(r["stratum"], r["predictor"], r["domain"], r["model"], r["status"], fit))
    return out


__all__ = [
    "DescRow", "OverallRanking", "PipelineConfig", "RankRow", "StratumReport", "SweepRow",
    "analyze_stratum", "correlations", "describe", "emit", "rank_aggregate", "read_fits",
    "run_all", "run_sweep", "weighted_mean_se",
]
