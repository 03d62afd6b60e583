"""Case data model, dataset CSV I/O, duplicate-entry merging and geo-temporal pair features.

A dataset is a UTF-8 CSV with header::

    case_id,series_id,x_km,y_km,t_days,f_<name1>,...,f_<nameM>

and an optional sidecar schema CSV (``feature,kind``) that tags every feature as
``behavioural``, ``contextual`` or ``both``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

FEATURE_KINDS = ("behavioural", "contextual", "both")
FEATURE_PREFIX = "f_"
FIXED_COLUMNS = ("case_id", "series_id", "x_km", "y_km", "t_days")


class DatasetError(ValueError):
    """Raised for structural problems in a dataset or schema file."""

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple[str, ...]
    kinds: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        if len(self.names) < 1:
            raise DatasetError("schema needs at least one feature")
        if len(self.names) != len(self.kinds):
            raise DatasetError("schema names and kinds differ in length")
        seen = set()
        for name in self.names:
            if name in seen:
                raise DatasetError(f"duplicate feature name {name!r}")
            seen.add(name)
        for name, kind in zip(self.names, self.kinds):
            if kind not in FEATURE_KINDS:
                raise DatasetError(f"feature {name!r} has unknown kind {kind!r}")

    @classmethod
    def uniform(cls, names: Sequence[str], kind: str = "both") -> "FeatureSchema":
        return cls(tuple(names), tuple(kind for _ in names))

    @property
    def dims(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    series_id: Optional[str]
    features: tuple[int, ...]
    location: tuple[float, float]
    time: float


@dataclass(frozen=True)
class GeoTemporalPair:
    log_distance: float
    log_interval: float

    def as_tuple(self) -> tuple[float, float]:
        return (self.log_distance, self.log_interval)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CaseTable:
    """Immutable table of binary-encoded cases.

    Stored column-wise: ``features`` is an ``(N, M)`` uint8 array, ``locations``
    ``(N, 2)`` in km and ``times`` ``(N,)`` in days. Arrays are read-only.
    """

    schema: FeatureSchema
    case_ids: tuple[str, ...]
    series_ids: tuple[Optional[str], ...]
    features: np.ndarray
    locations: np.ndarray
    times: np.ndarray
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        case_ids = tuple(str(c) for c in self.case_ids)
        series_ids = tuple(None if s in (None, "") else str(s) for s in self.series_ids)
        features = np.asarray(self.features)
        n = len(case_ids)
        if features.ndim != 2 or features.shape != (n, self.schema.dims):
            raise DatasetError(
                f"features must have shape ({n}, {self.schema.dims}), got {features.shape}"
            )
        if features.size and not np.isin(features, (0, 1)).all():
            raise DatasetError("feature values must be 0 or 1")
        locations = np.asarray(self.locations, dtype=float).reshape(n, 2)
        times = np.asarray(self.times, dtype=float).reshape(n)
        if len(series_ids) != n:
            raise DatasetError("series_ids length differs from case_ids")
        index = {}
        for i, cid in enumerate(case_ids):
            if cid in index:
                raise DatasetError(f"duplicate case_id {cid!r}", row=i + 2)
            index[cid] = i
        object.__setattr__(self, "case_ids", case_ids)
        object.__setattr__(self, "series_ids", series_ids)
        object.__setattr__(self, "features", _frozen(features.astype(np.uint8)))
        object.__setattr__(self, "locations", _frozen(locations))
        object.__setattr__(self, "times", _frozen(times))
        object.__setattr__(self, "_index", index)

    @classmethod
    def from_records(cls, schema: FeatureSchema, records: Iterable[CaseRecord]) -> "CaseTable":
        records = list(records)
        for r in records:
            if len(r.features) != schema.dims:
                raise DatasetError(
                    f"case {r.case_id!r} has {len(r.features)} features, schema has {schema.dims}"
                )
        return cls(
            schema,
            [r.case_id for r in records],
            [r.series_id for r in records],
            np.array([r.features for r in records], dtype=np.uint8).reshape(len(records), schema.dims),
            np.array([r.location for r in records], dtype=float).reshape(len(records), 2),
            np.array([r.time for r in records], dtype=float),
        )

    def __len__(self) -> int:
        return len(self.case_ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CaseTable):
            return NotImplemented
        return (
            self.schema == other.schema
            and self.case_ids == other.case_ids
            and self.series_ids == other.series_ids
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.locations, other.locations)
            and np.array_equal(self.times, other.times)
        )

    __hash__ = None

    @property
    def n_cases(self) -> int:
        return len(self.case_ids)

    @property
    def dims(self) -> int:
        return self.schema.dims

    def position(self, case_id: str) -> int:
        try:
            return self._index[case_id]
        except KeyError:
            raise KeyError(f"unknown case_id {case_id!r}") from None

    def record(self, i: int) -> CaseRecord:
        return CaseRecord(
            case_id=self.case_ids[i],
            series_id=self.series_ids[i],
            features=tuple(int(v) for v in self.features[i]),
            location=(float(self.locations[i, 0]), float(self.locations[i, 1])),
            time=float(self.times[i]),
        )

    @property
    def records(self) -> list[CaseRecord]:
        return [self.record(i) for i in range(len(self))]

    def series_codes(self) -> np.ndarray:
        """Integer series label per case; one-offs get unique negative codes.

        Two cases are linked iff their codes are equal.
        """
        codes = np.empty(len(self), dtype=np.int64)
        lookup: dict[str, int] = {}
        next_single = -1
        for i, s in enumerate(self.series_ids):
            if s is None:
                codes[i] = next_single
                next_single -= 1
            else:
                codes[i] = lookup.setdefault(s, len(lookup))
        return codes

    def subset(self, indices: Sequence[int]) -> "CaseTable":
        idx = np.asarray(indices, dtype=np.int64)
        return CaseTable(
            self.schema,
            [self.case_ids[i] for i in idx],
            [self.series_ids[i] for i in idx],
            self.features[idx],
            self.locations[idx],
            self.times[idx],
        )

    def with_features(self, schema: FeatureSchema, features: np.ndarray) -> "CaseTable":
        return CaseTable(schema, self.case_ids, self.series_ids, features, self.locations, self.times)


def merge_duplicate_entries(rows: Sequence[Sequence[int]]) -> list[int]:
    """Collapse several entries of one incident into a single record.

    A feature is present in the merged record if any entry has it (element-wise OR).
    """
    if len(rows) == 0:
        raise ValueError("cannot merge an empty list of entries")
    width = len(rows[0])
    for r in rows:
        if len(r) != width:
            raise ValueError(f"entry length {len(r)} differs from {width}")
        for v in r:
            if v not in (0, 1):
                raise ValueError(f"non-binary feature value {v!r}")
    arr = np.asarray(rows, dtype=np.uint8).reshape(len(rows), width)
    return [int(v) for v in np.bitwise_or.reduce(arr, axis=0)]


def geo_temporal(a: CaseRecord, b: CaseRecord) -> GeoTemporalPair:
    dist = math.hypot(a.location[0] - b.location[0], a.location[1] - b.location[1])
    return GeoTemporalPair(math.log1p(dist), math.log1p(abs(a.time - b.time)))


def geo_temporal_arrays(table: CaseTable, ia: np.ndarray, ib: np.ndarray) -> np.ndarray:
    """Vectorised :func:`geo_temporal` for index arrays; returns ``(n, 2)``."""
    delta = table.locations[ia] - table.locations[ib]
    dist = np.hypot(delta[:, 0], delta[:, 1])
    dt = np.abs(table.times[ia] - table.times[ib])
    return np.column_stack([np.log1p(dist), np.log1p(dt)])


@dataclass
class ValidationReport:
    n_cases: int
    n_series: int
    n_one_offs: int
    activation_rates: np.ndarray
    sparsity: float
    dead_features: list[str]
    saturated_features: list[str]
    anomalies: list[str]

    def summary(self) -> dict:
        return {
            "n_cases": self.n_cases,
            "n_series": self.n_series,
            "n_one_offs": self.n_one_offs,
            "sparsity": self.sparsity,
            "dead_features": list(self.dead_features),
            "saturated_features": list(self.saturated_features),
            "anomalies": list(self.anomalies),
        }


def validate(table: CaseTable) -> ValidationReport:
    """Summarise a table and list anomalies. Never raises on content."""
    n = len(table)
    counts: dict[str, int] = {}
    for s in table.series_ids:
        if s is not None:
            counts[s] = counts.get(s, 0) + 1
    n_one_offs = sum(1 for s in table.series_ids if s is None)
    if n:
        rates = table.features.mean(axis=0)
        sparsity = float(1.0 - table.features.sum() / table.features.size)
    else:
        rates = np.zeros(table.dims)
        sparsity = 1.0
    names = table.schema.names
    dead = [names[j] for j in np.flatnonzero(rates == 0)]
    saturated = [names[j] for j in np.flatnonzero(rates == 1)] if n else []
    anomalies = []
    singleton_series = sorted(s for s, c in counts.items() if c == 1)
    for s in singleton_series:
        anomalies.append(f"series {s!r} has a single case")
    if dead:
        anomalies.append(f"{len(dead)} dead feature(s)")
    if n and np.isnan(table.locations).any():
        anomalies.append("missing coordinates")
    empty = int((table.features.sum(axis=1) == 0).sum()) if n else 0
    if empty:
        anomalies.append(f"{empty} case(s) with no active features")
    return ValidationReport(
        n_cases=n,
        n_series=len(counts),
        n_one_offs=n_one_offs,
        activation_rates=rates,
        sparsity=sparsity,
        dead_features=dead,
        saturated_features=saturated,
        anomalies=anomalies,
    )


# -- file I/O -----------------------------------------------------------------


def load_schema(path) -> FeatureSchema:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["feature", "kind"]:
            raise DatasetError(f"schema header must be 'feature,kind', got {header}", row=1)
        names, kinds = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DatasetError(f"expected 2 columns, got {len(row)}", row=lineno)
            if row[1] not in FEATURE_KINDS:
                raise DatasetError(f"unknown kind {row[1]!r}", row=lineno, column="kind")
            names.append(row[0])
            kinds.append(row[1])
    return FeatureSchema(tuple(names), tuple(kinds))


def save_schema(schema: FeatureSchema, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["feature", "kind"])
        writer.writerows(zip(schema.names, schema.kinds))


def default_schema_path(dataset_path) -> Path:
    return Path(dataset_path).with_name("schema.csv")


def load_cases(path, expected_dims: Optional[int] = None, schema_path=None) -> CaseTable:
    """Read and validate a dataset CSV.

    The schema sidecar is taken from ``schema_path`` or, failing that, a
    ``schema.csv`` next to the dataset. Without either, every feature is
    tagged ``both``.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError("empty file", row=1)
        if tuple(header[:5]) != FIXED_COLUMNS:
            raise DatasetError(f"header must start with {','.join(FIXED_COLUMNS)}", row=1)
        feature_cols = header[5:]
        for col in feature_cols:
            if not col.startswith(FEATURE_PREFIX) or len(col) == len(FEATURE_PREFIX):
                raise DatasetError("feature columns must be named f_<name>", row=1, column=col)
        names = [c[len(FEATURE_PREFIX):] for c in feature_cols]
        if expected_dims is not None and len(names) != expected_dims:
            raise DatasetError(f"file has {len(names)} features, expected {expected_dims}", row=1)
        width = len(header)
        case_ids, series_ids, feats, locs, times = [], [], [], [], []
        seen = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DatasetError(f"expected {width} columns, got {len(row)}", row=lineno)
            cid = row[0]
            if cid == "":
                raise DatasetError("empty case_id", row=lineno, column="case_id")
            if cid in seen:
                raise DatasetError(
                    f"duplicate case_id {cid!r} (first on row {seen[cid]})", row=lineno, column="case_id"
                )
            seen[cid] = lineno
            try:
                x, y, t = float(row[2]), float(row[3]), float(row[4])
            except ValueError as exc:
                raise DatasetError(f"bad coordinate: {exc}", row=lineno) from None
            values = []
            for col, v in zip(feature_cols, row[5:]):
                if v == "0":
                    values.append(0)
                elif v == "1":
                    values.append(1)
                else:
                    raise DatasetError(f"non-binary feature value {v!r}", row=lineno, column=col)
            case_ids.append(cid)
            series_ids.append(row[1] or None)
            feats.append(values)
            locs.append((x, y))
            times.append(t)
    if schema_path is None and default_schema_path(path).exists():
        schema_path = default_schema_path(path)
    if schema_path is not None:
        schema = load_schema(schema_path)
        if list(schema.names) != names:
            raise DatasetError(f"schema {schema_path} does not match dataset feature columns")
    else:
        schema = FeatureSchema.uniform(names)
    n = len(case_ids)
    return CaseTable(
        schema,
        case_ids,
        series_ids,
        np.array(feats, dtype=np.uint8).reshape(n, len(names)),
        np.array(locs, dtype=float).reshape(n, 2),
        np.array(times, dtype=float),
    )


def save_cases(table: CaseTable, path, schema_path=None) -> None:
    """Write ``table`` as a dataset CSV. Floats use the shortest round-trip repr."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(FIXED_COLUMNS) + [FEATURE_PREFIX + n for n in table.schema.names])
        for i in range(len(table)):
            writer.writerow(
                [
                    table.case_ids[i],
                    table.series_ids[i] or "",
                    repr(float(table.locations[i, 0])),
                    repr(float(table.locations[i, 1])),
                    repr(float(table.times[i])),
                ]
                + [str(int(v)) for v in table.features[i]]
            )
    if schema_path is not None:
        save_schema(table.schema, schema_path)
