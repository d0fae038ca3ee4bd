import numpy as np
import pytest

from hlvae.errors import EmptyHoldout
from hlvae.metrics import (
    accuracy_error, displacement_error, error_report, nrmse, predictive_nll_report,
)
from hlvae.schema import FeatureSpec, fit_normalization
from hlvae.splits import inject_mcar

from conftest import make_schema, toy_table


def test_nrmse_examples():
    assert nrmse([1, 2, 3], [1, 2, 3], 5.0) == 0.0
    assert nrmse([0, 0], [0, 10], 10.0) == pytest.approx(np.sqrt(50) / 10)
    assert nrmse([0, 0], [0, 10], 10.0) == pytest.approx(nrmse([0, 0], [0, 30], 30.0) / 1.0)
    assert nrmse([0.0, 0.0], [0.0, 10.0], 10.0) == pytest.approx(nrmse([0.0, 0.0], [0.0, 70.0], 70.0))
    with pytest.warns(RuntimeWarning):
        assert nrmse([1.0], [3.0], 0.0) == 2.0
    with pytest.raises(EmptyHoldout):
        nrmse([], [], 1.0)


def test_accuracy_error_examples():
    assert accuracy_error([1, 2, 0], [1, 2, 0]) == 0.0
    assert accuracy_error([0, 1, 2, 2], [0, 1, 2, 1]) == 0.25
    rng = np.random.default_rng(0)
    truth = rng.integers(0, 5, 10_000)
    assert abs(accuracy_error(rng.integers(0, 5, 10_000), truth) - 0.8) < 0.015
    with pytest.raises(EmptyHoldout):
        accuracy_error([], [])


def test_displacement_error_examples():
    assert displacement_error([0, 3, 4], [0, 3, 4], 5) == 0.0
    assert displacement_error([1, 2, 3], [0, 1, 2], 5) == 0.25
    assert displacement_error([0, 4], [4, 0], 5) == 1.0
    with pytest.raises(EmptyHoldout):
        displacement_error([], [], 3)


def test_metrics_are_permutation_invariant():
    rng = np.random.default_rng(1)
    p, t = rng.normal(size=30), rng.normal(size=30)
    perm = rng.permutation(30)
    assert nrmse(p, t, 2.0) == pytest.approx(nrmse(p[perm], t[perm], 2.0))
    pi, ti = rng.integers(0, 4, 30), rng.integers(0, 4, 30)
    assert displacement_error(pi, ti, 4) == pytest.approx(displacement_error(pi[perm], ti[perm], 4))


def test_nll_report_groups():
    schema = make_schema([FeatureSpec("n", "poisson")])
    r = predictive_nll_report([1.0], [0], schema)
    assert r.get("group:count", "nll") == 1.0
    schema = make_schema()
    nll = np.array([1.0, 2.0, 3.0, 10.0, 20.0])
    feats = np.array([0, 0, 1, 3, 4])
    r = predictive_nll_report(nll, feats, schema)
    assert r.get("group:real", "nll") == pytest.approx(2.0)
    assert r.get("group:categorical", "nll") == 10.0
    assert r.get("group:ordinal", "nll") == 20.0
    assert r.get("overall", "nll") == pytest.approx(nll.mean())
    # permuting cells within groups changes nothing
    perm = np.array([1, 0, 2, 3, 4])
    r2 = predictive_nll_report(nll[perm], feats[perm], schema)
    assert r2.get("group:real", "nll") == r.get("group:real", "nll")


def test_report_counts_match_injected_holes(tmp_path):
    full = toy_table(n_instances=4, visits=5, missing=0.0)
    holed, held = inject_mcar(full, 0.25, seed=0)
    stats = fit_normalization(holed)
    report = error_report(held.values, held.values, held.features, full.schema, stats)
    by_metric = {r.metric: r for r in report.rows if r.scope == "overall"}
    assert sum(r.cells for r in by_metric.values()) == len(held)
    assert all(r.value == 0.0 for r in report.rows)
    nll = predictive_nll_report(np.ones(len(held)), held.features, full.schema)
    assert nll.cells("overall", "nll") == len(held)
    report.to_csv(tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().startswith("scope,metric,value,cells")
    assert "overall" in report.pretty()
