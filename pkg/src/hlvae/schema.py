"""Heterogeneous tabular data: schemas, CSV ingestion and encoder inputs.

A dataset is a table of ``N`` rows. Each row carries a fully observed
covariate vector ``x_n`` (ids, time, group labels, ...) and a vector of
heterogeneous features ``y_n`` of which only the cells flagged in the
observation mask are known.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateFeature, DomainViolation, MissingCovariate, SchemaMismatch

LIKELIHOODS = ("gaussian", "gaussian-free-variance", "lognormal", "poisson", "categorical", "ordinal")
DISCRETE = ("categorical", "ordinal")
ENCODER_TRANSFORMS = {
    "gaussian": "standardize",
    "gaussian-free-variance": "standardize",
    "lognormal": "log-standardize",
    "poisson": "log1p-standardize",
    "categorical": "one-hot",
    "ordinal": "thermometer",
}
COVARIATE_KINDS = ("continuous", "categorical", "binary")


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    likelihood: str
    cardinality: int | None = None
    bounded: bool = False  # gaussian values in [0, 1]; mean goes through a sigmoid
    encoder_transform: str | None = None

    def __post_init__(self):
        if self.likelihood not in LIKELIHOODS:
            raise SchemaMismatch(f"feature {self.name!r}: unknown likelihood {self.likelihood!r}")
        if self.likelihood in DISCRETE:
            if self.cardinality is None or int(self.cardinality) < 2:
                raise SchemaMismatch(f"feature {self.name!r}: {self.likelihood} needs cardinality >= 2")
            object.__setattr__(self, "cardinality", int(self.cardinality))
        elif self.cardinality is not None:
            raise SchemaMismatch(f"feature {self.name!r}: cardinality only applies to categorical/ordinal")
        expected = ENCODER_TRANSFORMS[self.likelihood]
        if self.encoder_transform is None:
            object.__setattr__(self, "encoder_transform", expected)
        elif self.encoder_transform != expected:
            raise SchemaMismatch(
                f"feature {self.name!r}: {self.likelihood} requires transform {expected!r}, "
                f"got {self.encoder_transform!r}"
            )
        if self.bounded and not self.likelihood.startswith("gaussian"):
            raise SchemaMismatch(f"feature {self.name!r}: only gaussian features can be bounded")

    @property
    def encoded_width(self) -> int:
        if self.likelihood == "categorical":
            return self.cardinality
        if self.likelihood == "ordinal":
            return self.cardinality - 1
        return 1

    @property
    def is_integer(self) -> bool:
        return self.likelihood in ("poisson", "categorical", "ordinal")

    def to_dict(self) -> dict:
        out = {"name": self.name, "likelihood": self.likelihood}
        if self.cardinality is not None:
            out["cardinality"] = self.cardinality
        if self.bounded:
            out["bounded"] = True
        return out


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    kind: str = "continuous"
    is_id: bool = False
    is_time: bool = False
    strict: bool = False  # unseen levels raise instead of scoring zero similarity

    def __post_init__(self):
        if self.kind not in COVARIATE_KINDS:
            raise SchemaMismatch(f"covariate {self.name!r}: unknown kind {self.kind!r}")
        if self.is_id and self.kind == "continuous":
            raise SchemaMismatch(f"covariate {self.name!r}: an instance id cannot be continuous")
        if self.is_time and self.kind != "continuous":
            raise SchemaMismatch(f"covariate {self.name!r}: the time axis must be continuous")

    def to_dict(self) -> dict:
        out = {"name": self.name, "kind": self.kind}
        if self.is_id:
            out["id"] = True
        if self.is_time:
            out["time"] = True
        if self.strict:
            out["strict"] = True
        return out


@dataclass(frozen=True)
class Schema:
    features: tuple[FeatureSpec, ...]
    covariates: tuple[CovariateSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        names = [f.name for f in self.features] + [c.name for c in self.covariates]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise SchemaMismatch(f"duplicate column names: {sorted(dupes)}")
        if not self.features:
            raise SchemaMismatch("schema declares no features")
        if sum(c.is_id for c in self.covariates) > 1:
            raise SchemaMismatch("at most one covariate can be the instance id")
        if sum(c.is_time for c in self.covariates) != 1:
            raise SchemaMismatch("exactly one covariate must be the time axis")

    # -- lookup ------------------------------------------------------------
    @property
    def feature_names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def covariate_names(self) -> list[str]:
        return [c.name for c in self.covariates]

    @property
    def id_column(self) -> int | None:
        for j, c in enumerate(self.covariates):
            if c.is_id:
                return j
        return None

    @property
    def time_column(self) -> int:
        return next(j for j, c in enumerate(self.covariates) if c.is_time)

    def covariate_index(self, name: str) -> int:
        return self.covariate_names.index(name)

    def feature_index(self, name: str) -> int:
        return self.feature_names.index(name)

    def as_gaussian(self) -> "Schema":
        """Same columns with every feature modelled as an unbounded Gaussian."""
        feats = tuple(FeatureSpec(f.name, "gaussian") for f in self.features)
        return Schema(feats, self.covariates)

    # -- (de)serialization --------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "features": [f.to_dict() for f in self.features],
            "covariates": [c.to_dict() for c in self.covariates],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Schema":
        try:
            feats = [
                FeatureSpec(
                    f["name"], f["likelihood"], f.get("cardinality"), bool(f.get("bounded", False))
                )
                for f in obj["features"]
            ]
            covs = [
                CovariateSpec(
                    c["name"],
                    c.get("kind", "continuous"),
                    bool(c.get("id", False)),
                    bool(c.get("time", False)),
                    bool(c.get("strict", False)),
                )
                for c in obj["covariates"]
            ]
        except KeyError as exc:
            raise SchemaMismatch(f"schema entry is missing the {exc.args[0]!r} field") from None
        return cls(tuple(feats), tuple(covs))

    @classmethod
    def load(cls, path) -> "Schema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def check_domain(values: np.ndarray, feature: FeatureSpec) -> None:
    """Raise DomainViolation if any value is outside the feature's support."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return
    if not np.all(np.isfinite(v)):
        raise DomainViolation(f"feature {feature.name!r}: non-finite observed value")
    kind = feature.likelihood
    if kind == "lognormal" and np.any(v <= 0):
        raise DomainViolation(f"feature {feature.name!r}: log-normal values must be > 0")
    if kind.startswith("gaussian") and feature.bounded and np.any((v < 0) | (v > 1)):
        raise DomainViolation(f"feature {feature.name!r}: bounded values must lie in [0, 1]")
    if feature.is_integer:
        bad = (v != np.round(v)) | (v < 0)
        if kind in DISCRETE:
            bad |= v > feature.cardinality - 1
        if np.any(bad):
            first = v[bad][0]
            raise DomainViolation(f"feature {feature.name!r}: value {first:g} outside its domain")


@dataclass(frozen=True, eq=False)
class DatasetTable:
    """Rows of covariates ``X`` and features ``Y`` with an observation mask.

    Unobserved cells of ``Y`` are stored as NaN. ``row_ids`` tracks each
    row's position in the file it came from so held-out cells can be
    matched across splits.
    """

    schema: Schema
    X: np.ndarray
    Y: np.ndarray
    mask: np.ndarray
    row_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        Y = np.array(self.Y, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        n = X.shape[0]
        if X.ndim != 2 or X.shape[1] != len(self.schema.covariates):
            raise SchemaMismatch(f"covariate block has shape {X.shape}")
        if Y.shape != (n, len(self.schema.features)) or mask.shape != Y.shape:
            raise SchemaMismatch(f"feature block {Y.shape} / mask {mask.shape} do not match {n} rows")
        if not np.all(np.isfinite(X)):
            raise MissingCovariate("covariates must be fully observed")
        Y[~mask] = np.nan
        for d, feat in enumerate(self.schema.features):
            check_domain(Y[mask[:, d], d], feat)
        row_ids = np.arange(n) if self.row_ids is None else np.asarray(self.row_ids, dtype=np.int64)
        X.setflags(write=False)
        Y.setflags(write=False)
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "row_ids", row_ids)

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def D(self) -> int:
        return self.Y.shape[1]

    @property
    def instance_ids(self) -> np.ndarray:
        col = self.schema.id_column
        return np.zeros(self.N) if col is None else self.X[:, col]

    @property
    def instances(self) -> np.ndarray:
        """Distinct instance ids in order of first appearance."""
        ids = self.instance_ids
        _, first = np.unique(ids, return_index=True)
        return ids[np.sort(first)]

    @property
    def instance_index(self) -> np.ndarray:
        """p(n): position of each row's instance in :attr:`instances`."""
        ids = self.instance_ids
        order = {v: k for k, v in enumerate(self.instances)}
        return np.array([order[v] for v in ids], dtype=np.int64)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.instance_index, minlength=len(self.instances))

    @property
    def times(self) -> np.ndarray:
        return self.X[:, self.schema.time_column]

    def subset(self, rows) -> "DatasetTable":
        rows = np.asarray(rows)
        return DatasetTable(self.schema, self.X[rows], self.Y[rows], self.mask[rows], self.row_ids[rows])

    def with_mask(self, mask: np.ndarray, Y: np.ndarray | None = None) -> "DatasetTable":
        return DatasetTable(self.schema, self.X, self.Y if Y is None else Y, mask, self.row_ids)

    def with_schema(self, schema: Schema) -> "DatasetTable":
        return DatasetTable(schema, self.X, self.Y, self.mask, self.row_ids)

    def sorted_by_instance(self) -> "DatasetTable":
        """Rows grouped by instance (first-appearance order), then by time."""
        order = np.lexsort((self.times, self.instance_index))
        return self.subset(order)

    def is_sorted_by_instance(self) -> bool:
        idx = self.instance_index
        changes = np.flatnonzero(np.diff(idx) != 0)
        return len(changes) == len(np.unique(idx)) - 1

    def instance_rows(self) -> list[np.ndarray]:
        idx = self.instance_index
        return [np.flatnonzero(idx == p) for p in range(len(self.instances))]

    @staticmethod
    def concat(tables: Sequence["DatasetTable"]) -> "DatasetTable":
        schema = tables[0].schema
        return DatasetTable(
            schema,
            np.concatenate([t.X for t in tables]),
            np.concatenate([t.Y for t in tables]),
            np.concatenate([t.mask for t in tables]),
            np.concatenate([t.row_ids for t in tables]),
        )


# -- CSV -----------------------------------------------------------------------

def _parse_cell(text: str, column: str, row: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise DomainViolation(f"row {row}, column {column!r}: cannot parse {text!r} as a number") from None


def load_csv(path, schema: Schema, row_id_column: str | None = "row_id") -> DatasetTable:
    """Read a UTF-8 CSV with a header row; empty cells are missing.

    A ``row_id`` column, when present, is kept as the row identifiers.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaMismatch(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    header = [h.strip() for h in header]
    expected = set(schema.feature_names) | set(schema.covariate_names)
    present = set(header) - {row_id_column}
    missing = expected - present
    unknown = present - expected
    if missing:
        raise SchemaMismatch(f"{path}: missing columns {sorted(missing)}")
    if unknown:
        raise SchemaMismatch(f"{path}: unknown columns {sorted(unknown)}")
    col = {name: header.index(name) for name in header}
    n = len(rows)
    X = np.empty((n, len(schema.covariates)))
    Y = np.full((n, len(schema.features)), np.nan)
    mask = np.zeros_like(Y, dtype=bool)
    row_ids = np.arange(n)
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise SchemaMismatch(f"{path}: row {i + 1} has {len(r)} fields, header has {len(header)}")
        for j, cov in enumerate(schema.covariates):
            text = r[col[cov.name]].strip()
            if text == "":
                raise MissingCovariate(f"{path}: row {i + 1} has no value for covariate {cov.name!r}")
            X[i, j] = _parse_cell(text, cov.name, i + 1)
        for d, feat in enumerate(schema.features):
            text = r[col[feat.name]].strip()
            if text != "":
                Y[i, d] = _parse_cell(text, feat.name, i + 1)
                mask[i, d] = True
        if row_id_column in col:
            row_ids[i] = int(r[col[row_id_column]])
    for d, feat in enumerate(schema.features):
        try:
            check_domain(Y[mask[:, d], d], feat)
        except DomainViolation as exc:
            raise DomainViolation(f"{path}: {exc}") from None
    return DatasetTable(schema, X, Y, mask, row_ids)


def format_value(value: float, integer: bool = False) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    if integer or float(value).is_integer():
        return str(int(round(value)))
    return repr(float(value))


def write_csv(table: DatasetTable, path, with_row_ids: bool = True) -> None:
    schema = table.schema
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = (["row_id"] if with_row_ids else []) + schema.covariate_names + schema.feature_names
        w.writerow(header)
        for i in range(table.N):
            cells = [str(int(table.row_ids[i]))] if with_row_ids else []
            cells += [format_value(v) for v in table.X[i]]
            cells += [
                format_value(table.Y[i, d], feat.is_integer) if table.mask[i, d] else ""
                for d, feat in enumerate(schema.features)
            ]
            w.writerow(cells)


# -- encoder inputs -----------------------------------------------------------

@dataclass
class NormStats:
    """Per-feature location/scale of the transformed training values.

    Entries for categorical/ordinal features are NaN (not standardized).
    """

    mean: np.ndarray
    std: np.ndarray
    low: np.ndarray   # observed training minimum of the raw values
    high: np.ndarray  # observed training maximum of the raw values

    def to_dict(self) -> dict:
        return {k: [None if not np.isfinite(v) else float(v) for v in getattr(self, k)]
                for k in ("mean", "std", "low", "high")}

    @classmethod
    def from_dict(cls, obj: dict) -> "NormStats":
        return cls(*(np.array([np.nan if v is None else v for v in obj[k]], dtype=np.float64)
                     for k in ("mean", "std", "low", "high")))


def _forward_transform(values: np.ndarray, transform: str) -> np.ndarray:
    if transform == "log-standardize":
        return np.log(values)
    if transform == "log1p-standardize":
        return np.log1p(values)
    return values


def fit_normalization(table: DatasetTable) -> NormStats:
    D = table.D
    mean, std = np.full(D, np.nan), np.full(D, np.nan)
    low, high = np.full(D, np.nan), np.full(D, np.nan)
    for d, feat in enumerate(table.schema.features):
        obs = table.Y[table.mask[:, d], d]
        if obs.size:
            low[d], high[d] = obs.min(), obs.max()
        if feat.likelihood in DISCRETE:
            continue
        t = _forward_transform(obs, feat.encoder_transform)
        if t.size == 0:
            mean[d], std[d] = 0.0, 1.0
            continue
        mean[d] = t.mean()
        s = t.std()
        if not s > 0:
            warnings.warn(
                f"feature {feat.name!r} is constant on the training split; using unit scale",
                DegenerateFeature,
                stacklevel=2,
            )
            s = 1.0
        std[d] = s
    return NormStats(mean, std, low, high)


@dataclass
class EncodedMatrix:
    values: np.ndarray                    # (N, D~)
    column_ranges: list[tuple[int, int]]  # per feature, into ``values``
    stats: NormStats

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def decode_column(self, d: int, feature: FeatureSpec) -> np.ndarray:
        """Invert the standardization of a continuous feature's column."""
        lo, _ = self.column_ranges[d]
        t = self.values[:, lo] * self.stats.std[d] + self.stats.mean[d]
        if feature.encoder_transform == "log-standardize":
            return np.exp(t)
        if feature.encoder_transform == "log1p-standardize":
            return np.expm1(t)
        return t


def encode_inputs(table: DatasetTable, stats: NormStats | None = None,
                  mask_columns: bool = False) -> EncodedMatrix:
    """Encoder input matrix with missing cells zero-filled after transform.

    ``stats`` must come from the training split; when omitted they are fit
    on ``table`` itself (which is then taken to be the training split).
    With ``mask_columns`` the observation mask is appended as D extra columns.
    """
    if stats is None:
        stats = fit_normalization(table)
    blocks, ranges, start = [], [], 0
    for d, feat in enumerate(table.schema.features):
        y = table.Y[:, d]
        obs = table.mask[:, d]
        width = feat.encoded_width
        block = np.zeros((table.N, width))
        yo = y[obs]
        if feat.encoder_transform == "one-hot":
            block[np.flatnonzero(obs), yo.astype(int)] = 1.0
        elif feat.encoder_transform == "thermometer":
            levels = np.arange(width)
            block[obs] = (yo[:, None] > levels[None, :]).astype(float)
        else:
            t = _forward_transform(yo, feat.encoder_transform)
            block[obs, 0] = (t - stats.mean[d]) / stats.std[d]
        blocks.append(block)
        ranges.append((start, start + width))
        start += width
    if mask_columns:
        blocks.append(table.mask.astype(float))
    return EncodedMatrix(np.concatenate(blocks, axis=1), ranges, stats)
