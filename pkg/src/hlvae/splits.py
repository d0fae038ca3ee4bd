"""Instance-level splits and missing-completely-at-random hole punching."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import SchemaMismatch, TooFewVisits
from .schema import DatasetTable, Schema, format_value


@dataclass
class HeldOutCells:
    """Ground truth for cells that were hidden from a table.

    ``rows`` are row identifiers (``DatasetTable.row_ids``), ``features``
    are feature column positions.
    """

    rows: np.ndarray
    features: np.ndarray
    values: np.ndarray

    def __len__(self):
        return len(self.rows)

    def to_csv(self, path, schema: Schema) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row_id", "feature", "value"])
            for r, d, v in zip(self.rows, self.features, self.values):
                feat = schema.features[d]
                w.writerow([int(r), feat.name, format_value(v, feat.is_integer)])

    @classmethod
    def from_csv(cls, path, schema: Schema) -> "HeldOutCells":
        rows, feats, vals = [], [], []
        with open(path, newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                try:
                    feats.append(schema.feature_index(rec["feature"]))
                except ValueError:
                    raise SchemaMismatch(f"{path}: unknown feature {rec['feature']!r}") from None
                rows.append(int(rec["row_id"]))
                vals.append(float(rec["value"]))
        return cls(np.array(rows, dtype=np.int64), np.array(feats, dtype=np.int64),
                   np.array(vals, dtype=np.float64))

    @classmethod
    def from_table(cls, table: DatasetTable) -> "HeldOutCells":
        """Every observed cell of ``table`` as held-out truth."""
        r, d = np.nonzero(table.mask)
        return cls(table.row_ids[r], d, table.Y[r, d])

    def positions(self, table: DatasetTable) -> tuple[np.ndarray, np.ndarray]:
        """Map to (row position, feature) indices within ``table``."""
        where = {int(rid): i for i, rid in enumerate(table.row_ids)}
        try:
            pos = np.array([where[int(r)] for r in self.rows], dtype=np.int64)
        except KeyError as exc:
            raise SchemaMismatch(f"held-out row {exc.args[0]} is not in the table") from None
        return pos, self.features


def inject_mcar(table: DatasetTable, ratio: float, seed: int) -> tuple[DatasetTable, HeldOutCells]:
    """Hide floor(ratio * observed cells) observed cells uniformly at random."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    r, d = np.nonzero(table.mask)
    k = int(np.floor(ratio * len(r)))
    pick = np.sort(rng.choice(len(r), size=k, replace=False))
    r, d = r[pick], d[pick]
    held = HeldOutCells(table.row_ids[r], d, table.Y[r, d].copy())
    mask = np.array(table.mask)
    mask[r, d] = False
    return table.with_mask(mask), held


def split_longitudinal(table: DatasetTable, fractions=(0.6, 0.2, 0.2), seed: int = 0,
                       visits_disclosed: int = 0) -> dict[str, DatasetTable]:
    """Split by instance into train / validation / test.

    Each validation and test instance hands ``visits_disclosed`` randomly
    chosen rows to the training table; its remaining rows form the
    held-out prediction targets of its own split.
    """
    fractions = np.asarray(fractions, dtype=float)
    if fractions.shape != (3,) or np.any(fractions < 0) or abs(fractions.sum() - 1) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    rows_of = table.instance_rows()
    P = len(rows_of)
    order = rng.permutation(P)
    n_train = int(round(P * fractions[0]))
    n_val = int(round(P * fractions[1]))
    n_val = min(n_val, P - n_train)
    groups = {
        "train": order[:n_train],
        "validation": order[n_train:n_train + n_val],
        "test": order[n_train + n_val:],
    }
    train_rows = [rows_of[p] for p in sorted(groups["train"])]
    out_rows = {"validation": [], "test": []}
    for name in ("validation", "test"):
        for p in sorted(groups[name]):
            rows = rows_of[p]
            if visits_disclosed > 0:
                if len(rows) <= visits_disclosed:
                    raise TooFewVisits(
                        f"instance {table.instances[p]:g} has {len(rows)} rows; "
                        f"cannot disclose {visits_disclosed} and keep a target"
                    )
                shown = np.sort(rng.choice(len(rows), size=visits_disclosed, replace=False))
                keep = np.setdiff1d(np.arange(len(rows)), shown)
                train_rows.append(rows[shown])
                out_rows[name].append(rows[keep])
            else:
                out_rows[name].append(rows)

    def take(chunks):
        idx = np.concatenate(chunks) if chunks else np.array([], dtype=np.int64)
        return table.subset(idx.astype(np.int64)).sorted_by_instance()

    return {
        "train": take(train_rows),
        "validation": take(out_rows["validation"]),
        "test": take(out_rows["test"]),
    }
