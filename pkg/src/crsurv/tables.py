"""Reading and writing the wide analysis table and small CSV/JSON artifacts.

Floats are written with ``repr`` (shortest round-trip form), so every
numeric column survives a write/read cycle bit-exactly.  Missing values are
empty fields.  Which columns are covariates is recorded in a JSON manifest
stored next to the CSV (``<stem>.manifest.json``).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import CovariateSpec, Event, Subject

STANDARD_COLUMNS = ("id", "household_id", "stratum", "entry_age", "exit_age", "event", "base_weight", "analysis_weight")


def fmt(value) -> str:
    """Lossless text form of a scalar; NaN and None become empty."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return "" if math.isnan(v) else repr(v)
    return str(value)


def to_float(text) -> float:
    if text is None:
        return math.nan
    text = str(text).strip()
    if text == "" or text.lower() in ("na", "nan"):
        return math.nan
    return float(text)


def read_rows(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return list(reader.fieldnames or []), list(reader)


def write_rows(path, header, rows):
    """Write rows (sequences aligned with ``header``) with lossless formatting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def manifest_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".manifest.json")


@dataclass
class AnalysisTable:
    """One row per subject: outcome columns, covariates and passthrough columns."""

    ids: list
    household: list
    stratum: list
    entry: np.ndarray
    exit: np.ndarray
    event: np.ndarray
    base_weight: np.ndarray
    analysis_weight: np.ndarray
    X: np.ndarray
    specs: list
    extra: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    @property
    def n(self):
        return len(self.ids)

    @property
    def names(self):
        return [s.name for s in self.specs]

    def column(self, name) -> np.ndarray:
        if name in self.names:
            return self.X[:, self.names.index(name)]
        if name in self.extra:
            return np.array([to_float(v) for v in self.extra[name]])
        raise KeyError(name)

    def select(self, rows) -> "AnalysisTable":
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        pick = lambda seq: [seq[i] for i in rows]  # noqa: E731
        return replace(
            self,
            ids=pick(self.ids),
            household=pick(self.household),
            stratum=pick(self.stratum),
            entry=self.entry[rows],
            exit=self.exit[rows],
            event=self.event[rows],
            base_weight=self.base_weight[rows],
            analysis_weight=self.analysis_weight[rows],
            X=self.X[rows],
            extra={k: pick(v) for k, v in self.extra.items()},
        )

    def with_columns(self, X=None, specs=None, **arrays) -> "AnalysisTable":
        out = replace(self, **arrays)
        if X is not None:
            out.X = X
        if specs is not None:
            out.specs = list(specs)
        return out

    def subjects(self) -> list:
        return [
            Subject(
                id=self.ids[i],
                household_id=self.household[i],
                stratum=self.stratum[i],
                entry_age=float(self.entry[i]),
                exit_age=float(self.exit[i]),
                event=Event(int(self.event[i])),
                covariates=tuple(self.X[i].tolist()),
                base_weight=float(self.base_weight[i]),
                analysis_weight=float(self.analysis_weight[i]),
            )
            for i in range(self.n)
        ]

    @classmethod
    def from_subjects(cls, subjects, specs) -> "AnalysisTable":
        n = len(subjects)
        X = np.array([s.covariates for s in subjects], dtype=float) if n else np.empty((0, len(specs)))
        return cls(
            ids=[s.id for s in subjects],
            household=[s.household_id for s in subjects],
            stratum=[s.stratum for s in subjects],
            entry=np.array([s.entry_age for s in subjects], dtype=float),
            exit=np.array([s.exit_age for s in subjects], dtype=float),
            event=np.array([int(s.event) for s in subjects], dtype=np.int64),
            base_weight=np.array([s.base_weight for s in subjects], dtype=float),
            analysis_weight=np.array([s.analysis_weight for s in subjects], dtype=float),
            X=X.reshape(n, len(specs)),
            specs=list(specs),
        )


def write_analysis(path, table: AnalysisTable, manifest: dict | None = None) -> None:
    names = table.names
    extras = list(table.extra)
    header = list(STANDARD_COLUMNS) + extras + names
    rows = []
    for i in range(table.n):
        rows.append(
            [
                table.ids[i],
                table.household[i],
                table.stratum[i],
                float(table.entry[i]),
                float(table.exit[i]),
                Event(int(table.event[i])).label,
                float(table.base_weight[i]),
                float(table.analysis_weight[i]),
            ]
            + [table.extra[k][i] for k in extras]
            + [float(v) for v in table.X[i]]
        )
    write_rows(path, header, rows)
    meta = dict(table.manifest)
    meta.update(manifest or {})
    meta["covariates"] = [s.to_dict() for s in table.specs]
    meta["passthrough"] = extras
    write_json(manifest_path(path), meta)


def read_analysis(path, manifest=None) -> AnalysisTable:
    """Read a wide analysis CSV; covariates come from the sidecar manifest.

    Without a manifest every non-standard column is treated as a covariate;
    with one, columns it does not list as covariates are carried through.
    """
    header, rows = read_rows(path)
    if manifest is None and manifest_path(path).exists():
        manifest = read_json(manifest_path(path))
    manifest = dict(manifest or {})
    if "covariates" in manifest:
        specs = [CovariateSpec.from_dict(d) for d in manifest["covariates"]]
        known = set(STANDARD_COLUMNS) | {s.name for s in specs}
        extras = [c for c in header if c not in known]
    else:
        others = [c for c in header if c not in STANDARD_COLUMNS]
        specs = [CovariateSpec(name=c) for c in others]
        extras = []
    missing = [c for c in ("id", "entry_age", "exit_age", "event") if c not in header]
    if missing:
        raise ValueError(f"{path}: missing required columns {missing}")
    n = len(rows)
    get = lambda c, default="": [r.get(c, default) or default for r in rows]  # noqa: E731
    base = np.array([to_float(v) for v in get("base_weight", "1")])
    aw = [r.get("analysis_weight", "") for r in rows]
    analysis = np.array([to_float(a) if a not in ("", None) else b for a, b in zip(aw, base)])
    X = np.array([[to_float(r[s.name]) for s in specs] for r in rows], dtype=float).reshape(n, len(specs))
    return AnalysisTable(
        ids=get("id"),
        household=[r.get("household_id") or r["id"] for r in rows],
        stratum=get("stratum"),
        entry=np.array([to_float(v) for v in get("entry_age")]),
        exit=np.array([to_float(v) for v in get("exit_age")]),
        event=np.array([int(Event.parse(v)) for v in get("event")], dtype=np.int64),
        base_weight=base,
        analysis_weight=analysis,
        X=X,
        specs=specs,
        extra={c: [r[c] for r in rows] for c in extras},
        manifest=manifest,
    )


def load_specs(path) -> list:
    """Codebook of CovariateSpec entries from a JSON or YAML file."""
    import yaml

    with open(path) as fh:
        doc = yaml.safe_load(fh)
    items = doc["covariates"] if isinstance(doc, dict) else doc
    return [CovariateSpec.from_dict(d) for d in items]
