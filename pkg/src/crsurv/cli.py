"""Command-line interface: ``crsurv <command> [options]``."""
from __future__ import annotations

import argparse
import copy
import logging
import sys
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import cohort as co
from . import pipeline as pl
from .errors import CrsurvError
from .forest import rsf
from .impute import ImputeConfig, impute
from .synth import SynthConfig, synth_cohort, to_long_rows
from .tables import load_specs, read_analysis, read_rows, write_analysis, write_json, write_rows
from .weights import compute_ipw, fit_propensity

log = logging.getLogger("crsurv")


# ---------------------------------------------------------------------------
# configuration


def default_config() -> dict:
    text = resources.files("crsurv").joinpath("defaults.yaml").read_text()
    return yaml.safe_load(text)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None) -> dict:
    cfg = default_config()
    if path:
        with open(path) as fh:
            cfg = _merge(cfg, yaml.safe_load(fh) or {})
    return cfg


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()] if text else []


def _set(section: dict, key, value):
    if value is not None:
        section[key] = value


# ---------------------------------------------------------------------------
# commands


def cmd_cohort_build(args, cfg):
    c = cfg["cohort"]
    _set(c, "missing_threshold", args.missing_threshold)
    _set(c, "min_entry_age", args.min_age)
    if args.passthrough:
        c["passthrough"] = _csv_list(args.passthrough)
    codebook = args.codebook or c.get("codebook")
    if not codebook:
        raise CrsurvError("a codebook is required (--codebook or cohort.codebook)")
    specs = load_specs(codebook)
    bcfg = co.BuildConfig(
        missing_threshold=float(c["missing_threshold"]),
        min_entry_age=c["min_entry_age"],
        passthrough=tuple(c["passthrough"]),
        pc_columns=tuple(c["pc_columns"]),
    )
    table, manifest = co.build_cohort_csv(args.input, specs, bcfg)
    write_analysis(args.out, table)
    if args.manifest:
        write_json(args.manifest, {**manifest, "covariates": [s.to_dict() for s in table.specs]})
    log.info("%d subjects, %d covariates", table.n, len(table.specs))
    return 0


def cmd_impute(args, cfg):
    c = cfg["impute"]
    _set(c, "iterations", args.iterations)
    _set(c, "trees_per_forest", args.trees)
    _set(c, "mtry", args.mtry)
    if args.per_stratum:
        c["per_stratum"] = True
    if args.use_weights:
        c["use_weights"] = True
    table = read_analysis(args.input)
    icfg = ImputeConfig(**c, seed=cfg["seed"], threads=cfg["threads"])
    res = impute(table.X, table.specs, icfg, weights=table.base_weight, groups=table.stratum)
    table.X = res.values
    write_analysis(args.out, table, {"imputation": {**asdict(icfg)}})
    report = res.report(table.names)
    report["config"] = asdict(icfg)
    write_json(args.report or Path(args.out).with_suffix(".impute.json"), report)
    return 0


def cmd_weights(args, cfg):
    c = cfg["weights"]
    _set(c, "included_col", args.included_col)
    if args.features:
        c["features"] = _csv_list(args.features)
    _set(c, "truncation_quantile", args.truncation)
    table = read_analysis(args.input)
    included = table.column(c["included_col"]) > 0
    feats = np.column_stack([table.column(f) for f in c["features"]]) if c["features"] else np.empty((table.n, 0))
    model = fit_propensity(feats, included, table.base_weight)
    table.analysis_weight = compute_ipw(model, table.base_weight, included, c["truncation_quantile"])
    meta = {
        "weights": {
            "included_col": c["included_col"],
            "features": c["features"],
            "coefficients": model.coefficients.tolist(),
            "converged": model.converged,
            "iterations": model.iterations_used,
            "truncation_quantile": c["truncation_quantile"],
        }
    }
    write_analysis(args.out, table, meta)
    return 0


def _strata(args, cfg, table):
    if getattr(args, "stratum", None):
        return [args.stratum]
    return list(cfg["pipeline"]["strata"])


def cmd_fit(args, cfg):
    table = read_analysis(args.input)
    models = pl.MODELS if args.model == "both" else (args.model,)
    rows = []
    for s in _strata(args, cfg, table):
        for m in models:
            rows += pl.run_sweep(table, m, stratum=s, threads=cfg["threads"])
    write_rows(args.out, pl.FIT_COLUMNS, pl.fit_rows(rows))
    return 0


def _forest_config(cfg, args=None) -> rsf.ForestConfig:
    f = dict(cfg["forest"])
    if args is not None:
        _set(f, "n_trees", getattr(args, "trees", None))
        _set(f, "mtry", getattr(args, "mtry", None))
        _set(f, "split_rule", getattr(args, "split_rule", None))
        _set(f, "min_terminal_events", getattr(args, "min_events", None))
        if getattr(args, "uniform_bootstrap", False):
            f["bootstrap"] = "uniform"
    return rsf.ForestConfig(**f, seed=cfg["seed"], threads=cfg["threads"])


def cmd_forest_grow(args, cfg):
    table = read_analysis(args.input)
    sub = table.select(np.asarray(table.stratum) == args.stratum) if args.stratum else table
    label = args.stratum or "all"
    cols = [j for j, s in enumerate(sub.specs) if pl.applicable(s, label)]
    live = sub.analysis_weight > 0
    data = rsf.SurvivalData(
        sub.X[np.ix_(live, cols)], sub.entry[live], sub.exit[live], sub.event[live], sub.analysis_weight[live],
        tuple(sub.specs[j].name for j in cols), tuple(pl._dom(sub.specs[j]) for j in cols),
    )
    forest = rsf.grow_forest(data, _forest_config(cfg, args), stratum=label)
    rsf.save_forest(forest, args.out)
    log.info("grew %d trees on %d subjects (%s kernels)", len(forest.trees), data.n, forest.backend)
    return 0


def cmd_forest_vimp(args, cfg):
    forest = rsf.load_forest(args.forest)
    table = rsf.vimp(forest, repetitions=args.repetitions, threads=cfg["threads"])
    write_rows(args.out, pl.VIMP_COLUMNS, pl.vimp_rows(table))
    return 0


def _read_vimp(path) -> dict:
    _, rows = read_rows(path)
    out = {}
    for r in rows:
        out.setdefault(r["stratum"], {})[r["predictor"]] = int(r["rank"])
    return out


def cmd_rank(args, cfg):
    tables = {}
    for p in args.vimp:
        tables.update(_read_vimp(p))
    ranking = pl.rank_aggregate(
        tables, exempt=_csv_list(args.exempt), missing=args.missing or cfg["pipeline"]["rank_missing"]
    )
    strata = list(ranking.strata)
    write_rows(
        args.out,
        ["predictor", "overall", "mean_rank"] + strata,
        [[r.predictor, r.overall, r.mean_rank] + [r.stratum_ranks.get(s) for s in strata] for r in ranking.rows],
    )
    return 0


def cmd_describe(args, cfg):
    table = read_analysis(args.input)
    rows = pl.describe(table, "all")
    for s in _strata(args, cfg, table):
        sub = table.select(np.asarray(table.stratum) == s)
        if sub.n:
            rows += pl.describe(sub, s)
            if args.correlations_dir and sub.n >= 2:
                Path(args.correlations_dir).mkdir(parents=True, exist_ok=True)
                R = pl.correlations(sub)
                write_rows(
                    Path(args.correlations_dir) / f"correlations_{s}.csv",
                    ["predictor"] + sub.names,
                    [[n] + list(r) for n, r in zip(sub.names, R)],
                )
    write_rows(args.out, pl.DESC_COLUMNS, [[getattr(d, c) for c in pl.DESC_COLUMNS] for d in rows])
    return 0


def cmd_synth(args, cfg):
    s = dict(cfg["synth"])
    _set(s, "n", args.n)
    _set(s, "n_binary", args.n_binary)
    _set(s, "n_continuous", args.n_continuous)
    if args.beta_dementia:
        s["beta_dementia"] = [float(v) for v in _csv_list(args.beta_dementia)]
    if args.beta_death:
        s["beta_death"] = [float(v) for v in _csv_list(args.beta_death)]
    _set(s, "missing_rate", args.missing_rate)
    s["entry_age"] = tuple(s["entry_age"])
    s["strata"] = tuple(s["strata"])
    scfg = SynthConfig(**s, seed=cfg["seed"])
    cohort = synth_cohort(scfg)
    write_analysis(args.out, cohort.table(), {"synth": scfg.to_dict()})
    if args.truth:
        write_json(args.truth, cohort.truth)
    if args.long:
        rows = to_long_rows(cohort, seed=cfg["seed"])
        header = list(rows[0].keys()) if rows else []
        write_rows(args.long, header, [[r[h] for h in header] for r in rows])
        if args.codebook:
            write_json(args.codebook, {"covariates": [sp.to_dict() for sp in cohort.specs]})
    return 0


def cmd_run_all(args, cfg):
    table = read_analysis(args.input)
    if np.isnan(table.X).any():
        icfg = ImputeConfig(**cfg["impute"], seed=cfg["seed"], threads=cfg["threads"])
        table.X = impute(table.X, table.specs, icfg, weights=table.base_weight, groups=table.stratum).values
    p = cfg["pipeline"]
    pcfg = pl.PipelineConfig(
        strata=tuple(p["strata"]),
        models=tuple(cfg["survival"]["models"]),
        forest=_forest_config(cfg, args),
        run_forest=bool(p["run_forest"]),
        rank_missing=p["rank_missing"],
        seed=cfg["seed"],
        threads=cfg["threads"],
    )
    reports, ranking = pl.run_all(table, pcfg)
    manifest = pl.emit(reports, ranking, args.out_dir, pcfg, {"input": Path(args.input).name})
    bad = [r.stratum for r in reports if not r.ok]
    for w in manifest["warnings"]:
        log.warning(w)
    if bad:
        log.error("no report for strata: %s", ", ".join(bad))
        return 1
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    def globals_(default):
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--seed", type=int, default=default, help="master random seed")
        g.add_argument("--config", default=default, help="YAML/JSON settings merged over the defaults")
        g.add_argument("--threads", type=int, default=default, help="worker threads (results do not depend on it)")
        g.add_argument("-v", "--verbose", action="store_true", default=default or False)
        return g

    # flags are accepted before or after the subcommand; subparsers do not
    # overwrite values given earlier
    common = globals_(argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="crsurv", description=__doc__, parents=[globals_(None)])
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("cohort", help="cohort construction", parents=[common])
    csub = c.add_subparsers(dest="action", required=True)
    b = csub.add_parser("build", help="long interview records -> wide analysis table", parents=[common])
    b.add_argument("--in", dest="input", required=True)
    b.add_argument("--codebook")
    b.add_argument("--out", required=True)
    b.add_argument("--manifest")
    b.add_argument("--missing-threshold", type=float)
    b.add_argument("--min-age", type=float)
    b.add_argument("--passthrough", help="comma-separated columns to carry over")
    b.set_defaults(func=cmd_cohort_build)

    i = sub.add_parser("impute", help="iterative forest imputation", parents=[common])
    i.add_argument("--in", dest="input", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--iterations", type=int)
    i.add_argument("--trees", type=int)
    i.add_argument("--mtry", type=int)
    i.add_argument("--report")
    i.add_argument("--per-stratum", action="store_true")
    i.add_argument("--use-weights", action="store_true")
    i.set_defaults(func=cmd_impute)

    w = sub.add_parser("weights", help="inverse-propensity analysis weights", parents=[common])
    w.add_argument("--in", dest="input", required=True)
    w.add_argument("--out", required=True)
    w.add_argument("--included-col")
    w.add_argument("--features", help="comma-separated propensity model features")
    w.add_argument("--truncation", type=float)
    w.set_defaults(func=cmd_weights)

    f = sub.add_parser("fit", help="single-predictor Fine-Gray / cause-specific sweeps", parents=[common])
    f.add_argument("--in", dest="input", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--model", choices=("finegray", "causespecific", "both"), default="both")
    f.add_argument("--stratum")
    f.set_defaults(func=cmd_fit)

    fo = sub.add_parser("forest", help="competing-risks survival forests", parents=[common])
    fsub = fo.add_subparsers(dest="action", required=True)
    g = fsub.add_parser("grow", parents=[common])
    g.add_argument("--in", dest="input", required=True)
    g.add_argument("--stratum")
    g.add_argument("--trees", type=int)
    g.add_argument("--mtry", type=int)
    g.add_argument("--min-events", type=int)
    g.add_argument("--split-rule", choices=rsf.SPLIT_RULES)
    g.add_argument("--uniform-bootstrap", action="store_true", help="ignore analysis weights when resampling")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_forest_grow)
    v = fsub.add_parser("vimp", parents=[common])
    v.add_argument("--forest", required=True)
    v.add_argument("--repetitions", type=int)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_forest_vimp)

    r = sub.add_parser("rank", help="aggregate VIMP ranks across strata", parents=[common])
    r.add_argument("--vimp", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--missing", choices=("worst", "available"))
    r.add_argument("--exempt", help="predictors allowed to be absent in some strata")
    r.set_defaults(func=cmd_rank)

    d = sub.add_parser("describe", help="weighted descriptives and correlations", parents=[common])
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--stratum")
    d.add_argument("--correlations-dir")
    d.set_defaults(func=cmd_describe)

    s = sub.add_parser("synth", help="simulate a cohort with known truth", parents=[common])
    s.add_argument("--n", type=int)
    s.add_argument("--n-binary", type=int)
    s.add_argument("--n-continuous", type=int)
    s.add_argument("--beta-dementia")
    s.add_argument("--beta-death")
    s.add_argument("--missing-rate", type=float)
    s.add_argument("--out", required=True)
    s.add_argument("--truth")
    s.add_argument("--long", help="also write long-format interview records")
    s.add_argument("--codebook", help="with --long: write the matching codebook")
    s.set_defaults(func=cmd_synth)

    a = sub.add_parser("run-all", help="full stratified analysis from an analysis table", parents=[common])
    a.add_argument("--in", dest="input", required=True)
    a.add_argument("--out-dir", required=True)
    a.add_argument("--trees", type=int)
    a.set_defaults(func=cmd_run_all)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        _set(cfg, "seed", args.seed)
        _set(cfg, "threads", args.threads)
        return args.func(args, cfg)
    except (CrsurvError, ValueError, OSError, KeyError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
