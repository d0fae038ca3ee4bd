"""Held-out evaluation: NRMSE, accuracy error, displacement error and NLL summaries."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyHoldout
from .schema import FeatureSpec, NormStats, Schema

# NLL groups: which likelihood families are pooled together in a report
GROUPS = {
    "gaussian": "real",
    "gaussian-free-variance": "real",
    "lognormal": "real",
    "poisson": "count",
    "categorical": "categorical",
    "ordinal": "ordinal",
}


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.shape != truth.shape:
        raise ValueError(f"{pred.size} predictions for {truth.size} cells")
    if truth.size == 0:
        raise EmptyHoldout("no held-out cells to score")
    return pred, truth


def nrmse(pred, truth, value_range: float) -> float:
    """RMSE over the feature's training range; plain RMSE if the range is 0."""
    pred, truth = _pair(pred, truth)
    rmse = float(np.sqrt(np.mean((pred - truth) ** 2)))
    if not value_range > 0:
        warnings.warn("feature has zero training range; reporting plain RMSE", RuntimeWarning, stacklevel=2)
        return rmse
    return rmse / value_range


def accuracy_error(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean(pred != truth))


def displacement_error(pred, truth, levels: int) -> float:
    """Mean |pred - truth| / (R - 1) for ordinal levels 0..R-1."""
    pred, truth = _pair(pred, truth)
    return float(np.mean(np.abs(pred - truth)) / (levels - 1))


@dataclass
class MetricRow:
    scope: str      # feature name, "group:<likelihood group>", or "overall"
    metric: str
    value: float
    cells: int


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)

    def add(self, scope: str, metric: str, value: float, cells: int) -> None:
        self.rows.append(MetricRow(scope, metric, float(value), int(cells)))

    def get(self, scope: str, metric: str) -> float:
        for r in self.rows:
            if r.scope == scope and r.metric == metric:
                return r.value
        raise KeyError((scope, metric))

    def cells(self, scope: str, metric: str) -> int:
        for r in self.rows:
            if r.scope == scope and r.metric == metric:
                return r.cells
        raise KeyError((scope, metric))

    def extend(self, other: "MetricReport") -> None:
        self.rows.extend(other.rows)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scope", "metric", "value", "cells"])
            for r in self.rows:
                w.writerow([r.scope, r.metric, repr(r.value), r.cells])

    def pretty(self) -> str:
        width = max([len(r.scope) for r in self.rows] + [5])
        lines = [f"{'scope':<{width}}  {'metric':<12}  {'value':>10}  {'cells':>6}"]
        for r in self.rows:
            lines.append(f"{r.scope:<{width}}  {r.metric:<12}  {r.value:>10.4f}  {r.cells:>6d}")
        return "\n".join(lines)


def predictive_nll_report(nll: np.ndarray, features, schema: Schema) -> MetricReport:
    """Mean NLL per feature, per likelihood group and overall.

    ``nll`` and ``features`` list one held-out cell each (feature positions
    into ``schema``).
    """
    nll = np.asarray(nll, dtype=np.float64)
    features = np.asarray(features, dtype=np.int64)
    report = MetricReport()
    groups = np.array([GROUPS[schema.features[d].likelihood] for d in features], dtype=object)
    for d, feat in enumerate(schema.features):
        sel = features == d
        if sel.any():
            report.add(feat.name, "nll", nll[sel].mean(), sel.sum())
    for g in dict.fromkeys(GROUPS.values()):
        sel = groups == g
        if sel.any():
            report.add(f"group:{g}", "nll", nll[sel].mean(), sel.sum())
    if nll.size:
        report.add("overall", "nll", nll.mean(), nll.size)
    return report


def _feature_error(feat: FeatureSpec, pred, truth, value_range: float) -> tuple[str, float]:
    if feat.likelihood == "categorical":
        return "accuracy_err", accuracy_error(pred, truth)
    if feat.likelihood == "ordinal":
        return "displacement", displacement_error(pred, truth, feat.cardinality)
    return "nrmse", nrmse(pred, truth, value_range)


def error_report(pred: np.ndarray, truth: np.ndarray, features, schema: Schema, stats: NormStats) -> MetricReport:
    """Per-feature NRMSE / accuracy error / displacement error, plus group means.

    Group rows average cells (not features) so their counts add up to the
    number of held-out cells of that kind.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    features = np.asarray(features, dtype=np.int64)
    report = MetricReport()
    pooled: dict[str, list[tuple[float, int]]] = {}
    for d, feat in enumerate(schema.features):
        sel = features == d
        if not sel.any():
            continue
        metric, value = _feature_error(feat, pred[sel], truth[sel], stats.high[d] - stats.low[d])
        report.add(feat.name, metric, value, sel.sum())
        pooled.setdefault(metric, []).append((value, int(sel.sum())))
    for metric, entries in pooled.items():
        vals = np.array([v for v, _ in entries])
        counts = np.array([c for _, c in entries])
        report.add("overall", metric, float(np.sum(vals * counts) / counts.sum()), counts.sum())
    return report
