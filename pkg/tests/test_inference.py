import itertools

import numpy as np
import pytest

from hlvae import autodiff as ad
from hlvae.autodiff import Tensor
from hlvae.errors import IncompleteInstance, MissingIndividualComponent, NonFiniteLoss
from hlvae.inference import (
    PreparedTable, TrainConfig, elbo, exact_kl, fill_missing, minibatch_kl_bound,
    optimal_inducing_posterior, reconstruction_term, set_inducing_posterior, train,
)
from hlvae.likelihoods import Poisson
from hlvae.model import HLVAE, ModelConfig
from hlvae.networks import LatentPosterior
from hlvae.schema import DatasetTable, FeatureSpec
from hlvae.synthetic import GeneratorConfig, generate_synthetic_longitudinal

from conftest import make_schema, toy_table


def posterior(mu, w):
    return LatentPosterior(Tensor(np.asarray(mu, float)), Tensor(np.asarray(w, float)))


# -- reconstruction ---------------------------------------------------------------

def test_reconstruction_examples(table, small_model):
    heads = small_model.decode(np.zeros((table.N, 2)))
    assert reconstruction_term(fill_missing(table), np.zeros_like(table.mask), heads).item() == 0.0
    po = FeatureSpec("n", "poisson")
    assert reconstruction_term(np.array([[0.0]]), np.array([[True]]), [Poisson(po, Tensor([1.0]))]).item() \
        == pytest.approx(-1.0)


def test_reconstruction_is_additive_over_cells(table, small_model):
    full = table.with_mask(np.ones_like(table.mask), np.nan_to_num(table.Y, nan=1.0))
    heads = small_model.decode(np.random.default_rng(0).normal(size=(table.N, 2)))
    total = reconstruction_term(fill_missing(full), full.mask, heads).item()
    kept = reconstruction_term(fill_missing(full), table.mask, heads).item()
    hidden = reconstruction_term(fill_missing(full), ~table.mask, heads).item()
    assert kept == pytest.approx(total - hidden, abs=1e-10)


def test_masked_cells_get_zero_gradient(table, small_model):
    Z = np.random.default_rng(0).normal(size=(table.N, 2))
    names = [k for k in small_model.params if k.startswith(("dec.", "head."))]

    def grads(Y):
        for p in small_model.params.values():
            p.grad = None
        r = reconstruction_term(Y, table.mask, small_model.decode(Z))
        g = ad.backward(r, [small_model.params[k] for k in names])
        return [g[small_model.params[k]].copy() for k in names]

    Y1 = fill_missing(table)
    Y2 = Y1.copy()
    Y2[~table.mask[:, 0], 0] = 17.0   # different in-domain value behind the mask
    for a, b in zip(grads(Y1), grads(Y2)):
        np.testing.assert_array_equal(a, b)


# -- exact KL -----------------------------------------------------------------------

def test_exact_kl_examples():
    assert exact_kl(posterior(np.zeros((4, 1)), np.ones((4, 1))), [np.eye(4)]).item() == pytest.approx(0.0, abs=1e-12)
    assert exact_kl(posterior([[1.0]], [[1.0]]), [np.eye(1)]).item() == pytest.approx(0.5)


def test_exact_kl_matches_dense_formula_and_is_nonnegative():
    rng = np.random.default_rng(0)
    for _ in range(10):
        N = rng.integers(2, 8)
        B = rng.normal(size=(N, N))
        S = B @ B.T + 0.5 * np.eye(N)
        mu, w = rng.normal(size=N), rng.uniform(0.1, 2, N)
        Si = np.linalg.inv(S)
        dense = 0.5 * (np.linalg.slogdet(S)[1] - np.log(w).sum() + np.sum(np.diag(Si) * w) + mu @ Si @ mu - N)
        got = exact_kl(posterior(mu[:, None], w[:, None]), [S]).item()
        assert got == pytest.approx(dense, rel=1e-10)
        assert got >= 0


def test_exact_kl_gradient():
    rng = np.random.default_rng(1)
    B = rng.normal(size=(4, 4))
    f = lambda m, w, s: exact_kl(LatentPosterior(m, ad.softplus(w)), [s @ s.T + np.eye(4)])
    assert ad.gradient_check(f, [rng.normal(size=(4, 1)), rng.normal(size=(4, 1)), B]) < 1e-6


# -- mini-batch bound -------------------------------------------------------------------

def _bound_setup(seed=0, P=4, V=3, M=None):
    t = toy_table(n_instances=P, visits=V, seed=seed).sorted_by_instance()
    cfg = ModelConfig(latent_dim=2, hidden=4, n_inducing=M or 2 * V)
    model = HLVAE.initialize(t, cfg, seed=seed)
    rng = np.random.default_rng(seed)
    post = posterior(rng.normal(size=(t.N, 2)), rng.uniform(0.05, 1.0, size=(t.N, 2)))
    return t, model, post


def test_bound_reduces_to_exact_kl_in_the_diagonal_case():
    t, model, post = _bound_setup()
    for r in range(len(model.gp.components)):
        model.params[f"gp.{r}.log_mag"].data = np.full(2, -50.0)
    covs = [model.gp.prior_covariance(model.params, t.X, l) for l in range(2)]
    exact = exact_kl(post, covs).item()
    model.reset_vg()     # q(u) = p(u)
    bound = minibatch_kl_bound(model, t.X, post, t.instance_index, len(t.instances), t.N).item()
    assert abs(bound - exact) < 1e-8


def test_bound_requires_individual_component_and_complete_instances():
    t, model, post = _bound_setup()
    cfg = ModelConfig(latent_dim=2, hidden=4, kernel="se(time)")
    flat = HLVAE.initialize(t, cfg, seed=0)
    with pytest.raises(MissingIndividualComponent):
        minibatch_kl_bound(flat, t.X, post, t.instance_index, 4, t.N)
    with pytest.raises(IncompleteInstance):
        minibatch_kl_bound(model, t.X, post, t.instance_index, 4, t.N, expected_counts=[3, 3, 3, 4])
    with pytest.raises(MissingIndividualComponent):
        train(t, flat, TrainConfig(epochs=1, kl="bound"))


def test_bound_dominates_and_pairs_are_unbiased():
    t, model, post = _bound_setup(seed=3)
    covs = [model.gp.prior_covariance(model.params, t.X, l) for l in range(2)]
    exact = exact_kl(post, covs).item()
    full = minibatch_kl_bound(model, t.X, post, t.instance_index, 4, t.N).item()
    assert full - exact >= -1e-9
    idx = t.instance_index
    vals = []
    for pair in itertools.combinations(range(4), 2):
        rows = np.flatnonzero(np.isin(idx, pair))
        sub = posterior(post.means.data[rows], post.variances.data[rows])
        vals.append(minibatch_kl_bound(model, t.X[rows], sub, idx[rows], 4, t.N).item())
    assert abs(np.mean(vals) - full) < 1e-9


def test_optimal_inducing_posterior_is_stationary():
    t, model, post = _bound_setup(seed=2)
    m, H = optimal_inducing_posterior(model, t.X, post, t.instance_index)
    set_inducing_posterior(model, m, H)
    params = [model.params["vg.m"], model.params["vg.h_raw"]]
    for p in params:
        p.grad = None
    g = ad.backward(minibatch_kl_bound(model, t.X, post, t.instance_index, 4, t.N), params)
    assert np.max(np.abs(g[params[0]])) < 1e-6
    assert np.max(np.abs(np.tril(g[params[1]][0]))) < 1e-6


def test_bound_gradient():
    t, model, post = _bound_setup(seed=1, P=2, V=2, M=3)
    keys = ["vg.m", "vg.h_raw", "inducing.cont", "gp.0.log_mag", "gp.0.log_ls", "gp.1.log_ls", "gp.noise_raw"]
    base = {k: model.params[k] for k in keys}

    def f(*arrays):
        for k, a in zip(keys, arrays):
            model.params[k] = a
        model.inducing.trainable = model.params["inducing.cont"]
        return minibatch_kl_bound(model, t.X, post, t.instance_index, 2, t.N)

    err = ad.gradient_check(f, [base[k].data.copy() for k in keys])
    assert err < 1e-5


# -- ELBO ---------------------------------------------------------------------------------

def test_elbo_beta_zero_and_definition(table, small_model):
    data = PreparedTable.build(small_model, table)
    a = elbo(small_model, data, np.random.default_rng(0), beta=0.0)
    assert a.elbo.item() == pytest.approx(a.recon.item())
    b = elbo(small_model, data, np.random.default_rng(0))
    assert b.elbo.item() == pytest.approx(b.recon.item() - b.kl.item())
    with pytest.raises(ValueError):
        elbo(small_model, data, np.random.default_rng(0), instances=[0])


def test_elbo_below_closed_form_marginal():
    # one Gaussian feature, decoder fixed to y = z + N(0, s2): log p(Y|X) is Gaussian
    schema = make_schema([FeatureSpec("y", "gaussian")])
    X = np.column_stack([np.zeros(4), np.arange(4.0)])
    Y = np.array([[0.3], [0.9], [0.2], [-0.4]])
    table = DatasetTable(schema, X, Y, np.ones_like(Y, dtype=bool))
    model = HLVAE.initialize(table, ModelConfig(latent_dim=1, hidden=2, slot_width=1, kernel="se(time)"), seed=0)
    s2 = 0.2
    p = model.params
    p["dec.W1"].data = np.array([[1.0, -1.0]])
    p["dec.b1"].data = np.zeros(2)
    p["dec.W2"].data = np.array([[1.0], [-1.0]])
    p["dec.b2"].data = np.zeros(1)
    p["head.0.W"].data = np.array([[1.0, 0.0]])
    p["head.0.b"].data = np.array([0.0, np.log(np.expm1(s2 - 1e-6))])
    Sigma = model.gp.prior_covariance(p, X, 0).data
    C = Sigma + s2 * np.eye(4)
    logp = -0.5 * (4 * np.log(2 * np.pi) + np.linalg.slogdet(C)[1] + Y[:, 0] @ np.linalg.solve(C, Y[:, 0]))
    data = PreparedTable.build(model, table)
    rng = np.random.default_rng(0)
    with ad.no_grad():
        draws = [elbo(model, data, rng).elbo.item() for _ in range(2000)]
    se = np.std(draws) / np.sqrt(len(draws))
    assert np.mean(draws) <= logp + 3 * se


# -- training ---------------------------------------------------------------------------------

def test_zero_epochs_leave_parameters_unchanged(table, small_model):
    before = small_model.state()
    _, history = train(table, small_model, TrainConfig(epochs=0))
    assert history.records == []
    for k, v in small_model.state().items():
        np.testing.assert_array_equal(v, before[k])


@pytest.mark.parametrize("kl", ["exact", "bound"])
def test_training_is_deterministic(table, kl):
    runs = []
    for _ in range(2):
        model = HLVAE.initialize(table, ModelConfig(latent_dim=2, hidden=6, n_inducing=4), seed=5)
        _, h = train(table, model, TrainConfig(epochs=4, lr=1e-2, kl=kl, batch_size=2, seed=5), validation=table)
        runs.append((h, model.state()))
    assert runs[0][0].records == runs[1][0].records
    for k in runs[0][1]:
        np.testing.assert_array_equal(runs[0][1][k], runs[1][1][k])


def test_training_curve_rises_early():
    data = generate_synthetic_longitudinal(GeneratorConfig(n_instances=20, visits=10), seed=0)
    model = HLVAE.initialize(data.table, ModelConfig(latent_dim=2, hidden=16, n_inducing=10), seed=0)
    _, h = train(data.table, model, TrainConfig(epochs=14, lr=1e-2, seed=0))
    avg = np.convolve(h.column("elbo"), np.ones(5) / 5, mode="valid")[:10]
    assert np.all(np.diff(avg) > 0)


def test_non_finite_loss_restores_last_good_state(table, small_model):
    small_model.params["gp.noise_raw"].data = np.full(2, 800.0)   # exp overflows
    before = small_model.state()
    with pytest.raises(NonFiniteLoss) as info:
        train(table, small_model, TrainConfig(epochs=3))
    assert info.value.model is small_model
    np.testing.assert_array_equal(small_model.state()["enc.W1"], before["enc.W1"])


def test_early_stopping_keeps_best_validation_state(table):
    model = HLVAE.initialize(table, ModelConfig(latent_dim=2, hidden=6, n_inducing=4), seed=0)
    _, h = train(table, model, TrainConfig(epochs=200, lr=5e-2, early_stopping=True, patience=3), validation=table)
    vals = h.column("val_nll")
    assert len(vals) < 200
    from hlvae.inference import validation_nll
    assert validation_nll(model, table) == pytest.approx(vals.min())


def test_bad_batch_size_and_optimizer(table, small_model):
    with pytest.raises(ValueError):
        train(table, small_model, TrainConfig(epochs=1, kl="bound", batch_size=10))
    with pytest.raises(ValueError):
        train(table, small_model, TrainConfig(epochs=1, optimizer="sgd"))


def test_history_csv(tmp_path, table, small_model):
    _, h = train(table, small_model, TrainConfig(epochs=2))
    h.to_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,elbo,recon,kl,val_nll"
    assert len(lines) == 3
