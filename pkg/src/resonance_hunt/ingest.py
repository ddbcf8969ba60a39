"""CSV reading and writing for datasets and score tables.

Files are UTF-8, comma separated, with a header row.  Floats are written
with 17 significant digits so that a write/read round trip is exact.
Labels are the integers 0 (background) and 1 (signal).

Score files hold one or more windows side by side: columns ``m``,
optionally ``label``, then ``score_<k>`` and ``region_<k>`` for each window
``k``.  The window geometry lives in a JSON sidecar ``<file>.windows.json``.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd

from .core import ConfigError, DataError, Dataset, Region, ScoreTable, WindowSpec

log = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
_NAN_TOKENS = ["nan", "NaN", "-nan", "NAN", "-NaN"]
_REGION_NAMES = {r.name: int(r) for r in Region}


@dataclass(frozen=True)
class ColumnSchema:
    resonant_column: str = "m"
    feature_columns: tuple = ()
    label_column: Optional[str] = "label"
    unit_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "feature_columns", tuple(self.feature_columns))
        if not self.feature_columns:
            raise ConfigError("schema needs at least one feature column")
        names = [self.resonant_column, *self.feature_columns]
        if self.label_column is not None:
            names.append(self.label_column)
        if len(set(names)) != len(names):
            raise ConfigError("schema column names must be distinct")
        if not (np.isfinite(self.unit_scale) and self.unit_scale > 0):
            raise ConfigError("unit_scale must be positive")

    @property
    def d(self) -> int:
        return len(self.feature_columns)

    def unlabeled(self) -> "ColumnSchema":
        return ColumnSchema(self.resonant_column, self.feature_columns, None, self.unit_scale)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_columns"] = list(self.feature_columns)
        return d

    @classmethod
    def load(cls, path) -> "ColumnSchema":
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"schema file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        unknown = set(raw) - {"resonant_column", "feature_columns", "label_column", "unit_scale"}
        if unknown:
            raise ConfigError(f"{path}: unknown schema fields {sorted(unknown)}")
        return cls(**raw)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


# High-level feature layout of the LHC Olympics R&D file, masses in GeV.
LHCO_SCHEMA = ColumnSchema(
    resonant_column="m",
    feature_columns=("m_j1", "dm_j", "tau21_1", "tau21_2"),
    label_column="label",
    unit_scale=1e-3,
)


def default_schema(d: int, labeled: bool = True) -> ColumnSchema:
    return ColumnSchema("m", tuple(f"x{i}" for i in range(d)), "label" if labeled else None)


@dataclass
class ReadReport:
    n_rows: int = 0
    rejected_rows: list = field(default_factory=list)

    @property
    def warning_count(self) -> int:
        return len(self.rejected_rows)


def _parse_numeric(frame: pd.DataFrame, path) -> pd.DataFrame:
    out = {}
    for name in frame.columns:
        col = frame[name]
        if col.dtype.kind in "fiu":
            out[name] = col.astype(np.float64)
            continue
        num = pd.to_numeric(col, errors="coerce")
        bad = num.isna() & ~col.isna()
        if bad.any():
            i = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataError(f"{path}: unparsable cell {col.iloc[i]!r} in column {name!r}, row {i}")
        out[name] = num.astype(np.float64)
    return pd.DataFrame(out)


def _read_frame(path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(
            path,
            keep_default_na=False,
            na_values=_NAN_TOKENS,
            float_precision="round_trip",
            encoding="utf-8",
        )
    except FileNotFoundError:
        raise DataError(f"input file not found: {path}") from None
    except (pd.errors.EmptyDataError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: cannot parse CSV ({exc})") from None
    return frame


def read_csv(path, schema: ColumnSchema, report: Optional[ReadReport] = None) -> Dataset:
    """Load a dataset; rows with non-finite values are dropped with a warning."""
    frame = _read_frame(path)
    wanted = [schema.resonant_column, *schema.feature_columns]
    if schema.label_column is not None:
        wanted.append(schema.label_column)
    missing = [c for c in wanted if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing column(s) {missing}")
    frame = _parse_numeric(frame[wanted], path)
    values = frame.to_numpy(dtype=np.float64)
    finite = np.all(np.isfinite(values), axis=1)
    rejected = np.flatnonzero(~finite)
    for i in rejected[:20]:
        log.warning("%s: row %d rejected (non-finite value)", path, i)
    if len(rejected) > 20:
        log.warning("%s: %d further rows rejected", path, len(rejected) - 20)
    if report is not None:
        report.n_rows = len(values)
        report.rejected_rows = rejected.tolist()
    values = values[finite]
    if len(values) == 0:
        raise DataError(f"{path}: zero usable rows")
    m = values[:, 0] * schema.unit_scale
    x = values[:, 1 : 1 + schema.d]
    labels = None
    if schema.label_column is not None:
        raw = values[:, -1]
        if not np.all((raw == 0) | (raw == 1)):
            i = int(np.flatnonzero((raw != 0) & (raw != 1))[0])
            raise DataError(f"{path}: label must be 0 or 1 (got {raw[i]!r} in usable row {i})")
        labels = raw.astype(np.int8)
    try:
        return Dataset(m, x, labels)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def _write_frame(frame: pd.DataFrame, path):
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def write_csv(obj: Union[Dataset, ScoreTable, Sequence[ScoreTable]], path, schema: Optional[ColumnSchema] = None):
    """Write a dataset (column order follows ``schema``) or score tables."""
    if isinstance(obj, ScoreTable):
        return write_scores([obj], path)
    if not isinstance(obj, Dataset):
        return write_scores(list(obj), path)
    ds = obj
    if schema is None:
        schema = default_schema(ds.d, labeled=ds.labeled)
    if schema.d != ds.d:
        raise DataError(f"schema has {schema.d} features but dataset has {ds.d}")
    cols = {schema.resonant_column: ds.m / schema.unit_scale}
    for j, name in enumerate(schema.feature_columns):
        cols[name] = ds.x[:, j]
    if ds.labeled:
        cols[schema.label_column or "label"] = ds.labels.astype(np.int64)
    _write_frame(pd.DataFrame(cols), path)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".windows.json")


def write_scores(tables: Sequence[ScoreTable], path, meta: Optional[dict] = None):
    """Write score tables that share one event list (same ``m`` column)."""
    tables = list(tables)
    if not tables:
        raise DataError("no score tables to write")
    m = tables[0].m
    for t in tables[1:]:
        if not np.array_equal(t.m, m):
            raise DataError("score tables in one file must cover the same events")
    cols = {"m": m}
    if tables[0].labels is not None:
        cols["label"] = tables[0].labels.astype(np.int64)
    names = np.array([r.name for r in Region])
    for k, t in enumerate(tables):
        cols[f"score_{k}"] = t.score
        cols[f"region_{k}"] = names[t.region]
        if t.hunt is not None:
            cols[f"hunt_{k}"] = t.hunt.astype(np.int64)
    _write_frame(pd.DataFrame(cols), path)
    side = {
        "windows": [None if t.window is None else t.window.to_dict() for t in tables],
        "meta": [t.meta for t in tables],
    }
    if meta:
        side["run"] = meta
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_scores(path) -> list:
    """Inverse of :func:`write_scores`."""
    frame = _read_frame(path)
    if "m" not in frame.columns:
        raise DataError(f"{path}: missing column 'm'")
    side_file = sidecar_path(path)
    windows, metas = None, None
    if side_file.exists():
        with open(side_file, encoding="utf-8") as fh:
            side = json.load(fh)
        windows = [None if w is None else WindowSpec.from_dict(w) for w in side["windows"]]
        metas = side.get("meta")
    k_all = sorted(int(c.split("_", 1)[1]) for c in frame.columns if c.startswith("score_"))
    if not k_all:
        raise DataError(f"{path}: no score columns")
    hunt_cols = [f"hunt_{k}" for k in k_all if f"hunt_{k}" in frame.columns]
    num_cols = ["m", *(f"score_{k}" for k in k_all), *hunt_cols] + (["label"] if "label" in frame.columns else [])
    nums = _parse_numeric(frame[num_cols], path)
    labels = None
    if "label" in nums.columns:
        raw = nums["label"].to_numpy()
        if not np.all((raw == 0) | (raw == 1)):
            raise DataError(f"{path}: label must be 0 or 1")
        labels = raw.astype(np.int8)
    tables = []
    for i, k in enumerate(k_all):
        col = f"region_{k}"
        if col not in frame.columns:
            raise DataError(f"{path}: missing column {col!r}")
        mapped = frame[col].map(_REGION_NAMES)
        if mapped.isna().any():
            raise DataError(f"{path}: unknown region tag in {col!r}")
        region = mapped.to_numpy().astype(np.int8)
        hunt = None
        if f"hunt_{k}" in nums.columns:
            hunt = nums[f"hunt_{k}"].to_numpy()
            if not np.all((hunt == 0) | (hunt == 1)):
                raise DataError(f"{path}: hunt_{k} must be 0 or 1")
            hunt = hunt.astype(bool)
        tables.append(
            ScoreTable(
                nums[f"score_{k}"].to_numpy(),
                region,
                nums["m"].to_numpy(),
                labels,
                None if windows is None else windows[i],
                {} if metas is None or metas[i] is None else dict(metas[i]),
                hunt,
            )
        )
    return tables
