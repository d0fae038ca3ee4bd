import numpy as np
import pytest

from hlvae.errors import UnknownInstance
from hlvae.inference import TrainConfig, train
from hlvae.model import HLVAE, ModelConfig
from hlvae.prediction import impute, latent_predict, predict_future
from hlvae.schema import CovariateSpec, DatasetTable, FeatureSpec, Schema
from hlvae.splits import HeldOutCells, inject_mcar

from conftest import make_schema, toy_table


def gaussian_table(times, ids=None, y=None):
    schema = make_schema([FeatureSpec("y", "gaussian")])
    n = len(times)
    ids = np.zeros(n) if ids is None else ids
    Y = np.random.default_rng(0).normal(size=(n, 1)) if y is None else np.asarray(y, float)[:, None]
    return DatasetTable(schema, np.column_stack([ids, times]).astype(float), Y, np.ones((n, 1), bool))


def gp_model(table, kernel="se(time)", log_mag=0.0, noise=0.1):
    model = HLVAE.initialize(table, ModelConfig(latent_dim=1, hidden=4, kernel=kernel, n_inducing=4), seed=0)
    for r in range(len(model.gp.components)):
        model.params[f"gp.{r}.log_mag"].data = np.full(1, log_mag)
        model.params[f"gp.{r}.log_ls"].data = np.zeros((1, 1))
    model.params["gp.noise_raw"].data = np.full(1, np.log(noise - 1e-4) if noise > 1e-4 else -50.0)
    return model


def test_zero_magnitudes_give_prior_noise():
    t = gaussian_table(np.arange(4.0))
    model = gp_model(t, log_mag=-50.0)
    pred = latent_predict(np.array([[0.0, 1.5]]), model, t)
    assert pred.mean[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert pred.var[0, 0] == pytest.approx(model.noise(0), abs=1e-12)


def test_interpolates_training_row_and_reverts_far_away():
    t = gaussian_table(np.arange(5.0))
    model = gp_model(t, log_mag=np.log(100.0), noise=1e-4)
    mu = model.encode(model.encode_table(t)).means.data[:, 0]
    pred = latent_predict(t.X[2:3], model, t)
    assert abs(pred.mean[0, 0] - mu[2]) < 1e-2
    far = latent_predict(np.array([[0.0, 1e3]]), model, t)
    assert far.var[0, 0] == pytest.approx(100.0 + model.noise(0), abs=1e-6)
    assert far.mean[0, 0] == pytest.approx(0.0, abs=1e-6)


def test_variance_respects_noise_floor_and_shrinks_with_more_data():
    t3 = gaussian_table(np.array([0.0, 1.0, 2.0]))
    model = gp_model(t3)
    q = np.array([[0.0, 1.0]])
    v3 = latent_predict(q, model, t3).var[0, 0]
    t4 = gaussian_table(np.array([0.0, 1.0, 2.0, 1.0]))
    # same encoder, one extra row at the query's covariates
    v4 = latent_predict(q, model, t4).var[0, 0]
    assert model.noise(0) <= v4 <= v3 + 1e-12


def test_mean_is_linear_in_encodings(monkeypatch):
    t = gaussian_table(np.arange(4.0))
    model = gp_model(t)
    base = latent_predict(np.array([[0.0, 0.5], [0.0, 3.3]]), model, t).mean
    original = model.encode

    def doubled(values):
        post = original(values)
        return type(post)(post.means * 2.0, post.variances)

    monkeypatch.setattr(model, "encode", doubled)
    np.testing.assert_allclose(latent_predict(np.array([[0.0, 0.5], [0.0, 3.3]]), model, t).mean, 2 * base)


def test_unseen_levels_fall_back_to_prior_unless_strict():
    t = gaussian_table(np.arange(4.0), ids=np.array([0, 0, 1, 1]))
    model = gp_model(t, kernel="ca(id)*se(time)")
    pred = latent_predict(np.array([[7.0, 1.0]]), model, t)
    assert pred.mean[0, 0] == 0.0
    assert pred.var[0, 0] == pytest.approx(1.0 + model.noise(0))
    strict = Schema(t.schema.features, (CovariateSpec("id", "categorical", is_id=True, strict=True),
                                         CovariateSpec("time", "continuous", is_time=True)))
    model.schema = strict
    with pytest.raises(UnknownInstance):
        latent_predict(np.array([[7.0, 1.0]]), model, t)


def _trained(table, epochs=5):
    model = HLVAE.initialize(table, ModelConfig(latent_dim=2, hidden=8, n_inducing=4), seed=0)
    train(table, model, TrainConfig(epochs=epochs, lr=1e-2))
    return model


def test_fully_observed_row_is_unchanged_and_scored():
    t = toy_table(missing=0.0)
    model = _trained(t)
    res = impute(t, model, t, n_samples=10)
    np.testing.assert_array_equal(res.filled.Y, t.Y)
    assert np.all(np.isfinite(res.nll))


def test_impute_keeps_observed_cells_and_is_deterministic():
    t = toy_table(n_instances=4, visits=4, missing=0.3)
    model = _trained(t)
    a = impute(t, model, t, n_samples=20, seed=3)
    b = impute(t, model, t, n_samples=20, seed=3)
    np.testing.assert_array_equal(a.filled.Y, b.filled.Y)
    np.testing.assert_array_equal(a.nll, b.nll)
    np.testing.assert_array_equal(a.filled.Y[t.mask], t.Y[t.mask])
    assert a.filled.mask.all()
    # filled values live in each feature's domain (the table constructor checks)
    assert np.all(a.filled.Y[:, 2] == np.round(a.filled.Y[:, 2]))


def test_impute_scores_truth_cells_and_modes():
    full = toy_table(n_instances=4, visits=4, missing=0.0)
    holed, held = inject_mcar(full, 0.3, seed=1)
    model = _trained(holed)
    res = impute(holed, model, holed, n_samples=10, truth=held)
    rows, feats = held.positions(holed)
    assert np.all(np.isfinite(res.nll[rows, feats]))
    assert np.isfinite(res.nll).sum() == full.mask.sum()
    empty = holed.with_mask(np.zeros_like(holed.mask))
    gp_res = impute(empty, model, holed, n_samples=5)
    assert set(gp_res.modes) == {"gp"}
    with pytest.raises(ValueError):
        impute(empty, model, None)


def test_target_schema_discretizes_gaussian_baseline():
    full = toy_table(n_instances=3, visits=4, missing=0.0)
    holed, held = inject_mcar(full, 0.3, seed=2)
    gauss = holed.with_schema(holed.schema.as_gaussian())
    model = _trained(gauss)
    res = impute(gauss, model, gauss, n_samples=10, truth=held, target_schema=full.schema)
    assert res.filled.schema == full.schema
    cat = full.schema.feature_index("c")
    assert set(np.unique(res.filled.Y[:, cat])) <= {0.0, 1.0, 2.0}
    # discretized cell probabilities are at most 1, so the NLL is non-negative
    rows, feats = held.positions(gauss)
    discrete = np.isin(feats, [2, 3, 4])
    assert np.all(res.nll[rows[discrete], feats[discrete]] >= 0)


def test_future_prediction_matches_imputation_at_disclosed_time():
    t = toy_table(n_instances=3, visits=4, missing=0.0)
    model = _trained(t, epochs=10)
    visit = t.subset([5])
    fut = predict_future(visit, model, t, n_samples=400, seed=0)
    imp = impute(visit.with_mask(np.zeros_like(visit.mask)), model, t, n_samples=400, seed=1,
                 truth=HeldOutCells.from_table(visit))
    assert abs(np.nanmean(fut.nll) - np.nanmean(imp.nll)) < 0.05


def test_without_instance_kernel_prediction_is_population_level():
    t = toy_table(n_instances=3, visits=4, missing=0.0)
    model = HLVAE.initialize(t, ModelConfig(latent_dim=2, hidden=8, kernel="se(time)"), seed=0)
    train(t, model, TrainConfig(epochs=3, lr=1e-2))
    q = np.array([[99.0, 1.0], [0.0, 1.0]])
    pred = latent_predict(q, model, t)
    np.testing.assert_allclose(pred.mean[0], pred.mean[1])
    np.testing.assert_allclose(pred.var[0], pred.var[1])
