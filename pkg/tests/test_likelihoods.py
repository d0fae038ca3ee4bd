import numpy as np
import pytest
from scipy.integrate import quad

from hlvae import autodiff as ad
from hlvae.autodiff import Tensor
from hlvae.errors import DomainViolation
from hlvae.likelihoods import (
    Categorical, Gaussian, LogNormal, Ordinal, Poisson, decode_head, head_outputs, log_prob,
    mixture_log_prob, mixture_summary, ordinal_thresholds,
)
from hlvae.schema import FeatureSpec

G = FeatureSpec("g", "gaussian")
GB = FeatureSpec("gb", "gaussian", bounded=True)
GF = FeatureSpec("gf", "gaussian-free-variance")
LN = FeatureSpec("ln", "lognormal")
PO = FeatureSpec("po", "poisson")


def cat(R):
    return FeatureSpec("c", "categorical", R)


def ordf(R):
    return FeatureSpec("o", "ordinal", R)


def T(*v):
    return Tensor(np.array(v, dtype=float))


def test_head_output_counts():
    assert [head_outputs(f) for f in (G, GF, LN, PO, cat(5), ordf(4))] == [2, 1, 2, 1, 4, 1]


def test_zero_outputs_decode_to_reference_values():
    slot = np.zeros((2, 3))
    g = decode_head(slot, G, np.zeros((3, 2)), np.zeros(2))
    np.testing.assert_allclose(g.mean.data, 0.0)
    np.testing.assert_allclose(g.var.data, np.log(2.0) + 1e-6)
    c = decode_head(slot, cat(4), np.zeros((3, 3)), np.zeros(3))
    np.testing.assert_array_equal(c.logits.data, np.zeros((2, 4)))
    o = decode_head(slot, ordf(4), np.zeros((3, 1)), np.zeros(1), theta=np.zeros(3))
    np.testing.assert_allclose(o.thresholds.data, np.log(2.0) * np.array([1, 2, 3]))
    b = decode_head(slot, GB, np.zeros((3, 2)), np.zeros(2))
    np.testing.assert_allclose(b.mean.data, 0.5)
    f = decode_head(slot, GF, np.zeros((3, 1)), np.zeros(1), free_var=np.zeros(1))
    np.testing.assert_allclose(f.var.data, np.log(2.0) + 1e-6)


def test_log_prob_examples():
    assert log_prob(0, Poisson(PO, T(1.0))).item() == pytest.approx(-1.0)
    assert log_prob(3, Categorical(cat(5), Tensor(np.zeros((1, 5))))).item() == pytest.approx(np.log(0.2))
    o = Ordinal(ordf(3), T(0.0), T(-1.0, 1.0))
    direct = np.log(1 / (1 + np.exp(-1.0)) - 1 / (1 + np.exp(1.0)))
    assert log_prob(1, o).item() == pytest.approx(direct, abs=1e-12)
    assert log_prob(1, o).item() == pytest.approx(-0.771935, abs=1e-5)
    assert np.exp(log_prob(1, o).item()) == pytest.approx(0.462117, abs=1e-6)
    g = Gaussian(G, T(1.0), T(4.0))
    assert log_prob(2.0, g).item() == pytest.approx(-0.5 * np.log(8 * np.pi) - 1 / 8)
    ln = LogNormal(LN, T(0.0), T(1.0))
    assert log_prob(np.e, ln).item() == pytest.approx(-1 - 0.5 * np.log(2 * np.pi) - 0.5)


@pytest.mark.parametrize("params, y", [
    (LogNormal(LN, T(0.0), T(1.0)), 0.0),
    (Poisson(PO, T(1.0)), -1.0),
    (Poisson(PO, T(1.0)), 1.5),
    (Categorical(cat(3), Tensor(np.zeros((1, 3)))), 3.0),
    (Ordinal(ordf(3), T(0.0), T(-1.0, 1.0)), -1.0),
])
def test_log_prob_domain_errors(params, y):
    with pytest.raises(DomainViolation):
        log_prob(y, params)


def test_probability_vectors_sum_to_one():
    rng = np.random.default_rng(0)
    for R in (2, 3, 7):
        c = Categorical(cat(R), Tensor(np.column_stack([np.zeros(50), rng.normal(0, 5, (50, R - 1))])))
        np.testing.assert_allclose(c.probs().sum(1), 1.0, atol=1e-10)
        o = Ordinal(ordf(R), Tensor(rng.normal(0, 5, 50)), ordinal_thresholds(rng.normal(size=R - 1)))
        p = o.probs()
        np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-10)
        assert np.all(p > 0)


def test_continuous_densities_integrate_to_one():
    g = Gaussian(G, T(0.7), T(2.3))
    total, _ = quad(lambda y: np.exp(g.log_prob(np.array([y])).item()), -np.inf, np.inf, epsabs=1e-12)
    assert total == pytest.approx(1.0, abs=1e-6)
    ln = LogNormal(LN, T(0.3), T(0.5))
    total, _ = quad(lambda y: np.exp(ln.log_prob(np.array([y])).item()), 0, np.inf, epsabs=1e-12, limit=200)
    assert total == pytest.approx(1.0, abs=1e-6)


def test_poisson_sums_to_one():
    lam = 4.0
    top = int(np.ceil(lam + 30 * np.sqrt(lam)))
    p = Poisson(PO, Tensor(np.full(top + 1, lam)))
    assert np.exp(p.log_prob(np.arange(top + 1.0)).data).sum() == pytest.approx(1.0, abs=1e-8)


def test_sampling():
    rng = np.random.default_rng(0)
    assert Gaussian(G, T(2.0), T(1e-12)).sample(rng)[0] == pytest.approx(2.0, abs=1e-4)
    logits = np.tile([0.0, 50.0, 0.0], (10_000, 1))
    draws = Categorical(cat(3), Tensor(logits)).sample(rng)
    assert np.mean(draws == 1) > 0.999
    assert abs(Poisson(PO, Tensor(np.full(100_000, 4.0))).sample(rng).mean() - 4.0) < 0.07
    o = Ordinal(ordf(4), Tensor(np.full(20_000, 0.3)), T(-1.0, 0.0, 1.5))
    freq = np.bincount(o.sample(rng).astype(int), minlength=4) / 20_000
    np.testing.assert_allclose(freq, o.probs()[0], atol=0.015)


def test_point_estimates():
    assert LogNormal(LN, T(0.0), T(0.0)).point_estimate()[0] == 1.0
    assert Categorical(cat(3), Tensor([[0.0, 3.0, 3.0]])).point_estimate()[0] == 1
    assert Poisson(PO, T(2.7)).point_estimate()[0] == 2.7
    assert Ordinal(ordf(3), T(0.0), T(-1.0, 1.0)).point_estimate()[0] == 1


def test_logit_shift_invariance():
    rng = np.random.default_rng(1)
    free = rng.normal(size=(5, 3))
    base = Categorical(cat(4), Tensor(np.column_stack([np.zeros(5), free]))).probs()
    shifted = Categorical(cat(4), Tensor(np.column_stack([np.full(5, 2.5), free + 2.5]))).probs()
    np.testing.assert_allclose(base, shifted, atol=1e-14)


@pytest.mark.parametrize("feature", [G, GB, GF, LN, PO, cat(4), ordf(5)])
def test_log_prob_gradients(feature):
    rng = np.random.default_rng(2)
    slot = rng.normal(size=(6, 3))
    W = rng.normal(size=(3, head_outputs(feature)))
    b = rng.normal(size=head_outputs(feature))
    if feature.likelihood == "lognormal":
        y = np.exp(rng.normal(size=6))
    elif feature.likelihood == "poisson":
        y = rng.poisson(2.0, 6).astype(float)
    elif feature.cardinality:
        y = rng.integers(0, feature.cardinality, 6).astype(float)
    elif feature.bounded:
        y = rng.uniform(size=6)
    else:
        y = rng.normal(size=6)
    extra = rng.normal(size=max(1, (feature.cardinality or 2) - 1))

    def f(s, w, bb, e):
        kw = {}
        if feature.likelihood == "ordinal":
            kw["theta"] = e
        if feature.likelihood == "gaussian-free-variance":
            kw["free_var"] = e[:1]
        return decode_head(s, feature, w, bb, **kw).log_prob(y).sum()

    assert ad.gradient_check(f, [slot, W, b, extra]) < 1e-5


def test_ordinal_extreme_scores_stay_finite():
    o = Ordinal(ordf(4), T(-500.0, 0.0, 500.0), T(-1.0, 0.0, 1.0))
    lp = o.log_probs().data
    assert np.all(np.isfinite(lp))
    np.testing.assert_allclose(np.exp(lp).sum(1), 1.0, atol=1e-10)


def test_mixture_summary_and_log_prob():
    s1 = Gaussian(G, T(0.0), T(1.0))
    s2 = Gaussian(G, T(2.0), T(1.0))
    summary = mixture_summary([s1, s2])
    assert summary["estimate"][0] == pytest.approx(1.0)
    assert summary["std"][0] == pytest.approx(np.sqrt(2.0))
    lp = mixture_log_prob([s1, s2], np.array([1.0]))[0]
    expected = np.log(0.5 * (np.exp(s1.log_prob([1.0]).item()) + np.exp(s2.log_prob([1.0]).item())))
    assert lp == pytest.approx(expected)
    c1 = Categorical(cat(3), Tensor([[0.0, 2.0, 0.0]]))
    c2 = Categorical(cat(3), Tensor([[0.0, 0.0, 2.1]]))
    mix = mixture_summary([c1, c2])
    np.testing.assert_allclose(mix["probs"], 0.5 * (c1.probs() + c2.probs()))
    assert mix["estimate"][0] == 2
