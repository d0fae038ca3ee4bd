"""GP-conditioned latent prediction, imputation and future-visit prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import log_ndtr

from . import autodiff as ad
from .errors import UnknownInstance
from .likelihoods import Gaussian, LikelihoodParams, mixture_log_prob, mixture_summary
from .model import HLVAE
from .schema import DatasetTable, Schema
from .splits import HeldOutCells

DEFAULT_SAMPLES = 50


@dataclass
class PredictiveLatent:
    """Per-row predictive mean and variance of each latent dimension, (Q, L)."""

    mean: np.ndarray
    var: np.ndarray


def _check_levels(model: HLVAE, X_query: np.ndarray, X_train: np.ndarray) -> None:
    """Strict categorical covariates must only take levels seen in training."""
    cols = {f.column for comp in model.gp.components for f in comp.ca_factors}
    for c in sorted(cols):
        spec = model.schema.covariates[c]
        if not spec.strict:
            continue
        unseen = np.setdiff1d(X_query[:, c], X_train[:, c])
        if unseen.size:
            raise UnknownInstance(f"covariate {spec.name!r}: level {unseen[0]:g} never seen in training")


def latent_predict(X_query: np.ndarray, model: HLVAE, training: DatasetTable) -> PredictiveLatent:
    """Predictive q(z* | x*) given the training rows' amortized encodings.

    mean = K*X S^-1 mu,  var = k** - K*X S^-1 KX* + K*X S^-1 W S^-1 KX* + noise,
    evaluated through Cholesky solves of S (the training prior covariance).
    Categorical levels never seen in training simply have zero covariance
    with every training row.
    """
    X_query = np.asarray(X_query, dtype=np.float64)
    X_train = training.X
    _check_levels(model, X_query, X_train)
    gp, params = model.gp, model.params
    Q, L = len(X_query), gp.latent_dim
    mean, var = np.zeros((Q, L)), np.zeros((Q, L))
    with ad.no_grad():
        post = model.encode(model.encode_table(training))
        mu_bar, W = post.means.data, post.variances.data
        for l in range(L):
            noise = float(gp.noise(params, l).data)
            # stationary kernels: k(x, x) is the sum of the component magnitudes
            prior = sum(float(np.exp(params[f"gp.{r}.log_mag"].data[l])) for r in range(len(gp.components)))
            if training.N == 0:
                mean[:, l], var[:, l] = 0.0, prior + noise
                continue
            S = gp.prior_covariance(params, X_train, l).data
            C, _ = ad.jittered_cholesky(S)
            Kq = gp.covariance(params, l, X_query, X_train).data      # (Q, N)
            A = solve_triangular(C, Kq.T, lower=True)                   # C^-1 K_Xq
            B = solve_triangular(C, A, lower=True, trans="T")           # S^-1 K_Xq
            alpha = solve_triangular(C, mu_bar[:, l], lower=True)
            mean[:, l] = A.T @ alpha
            shrink = np.maximum(prior - np.sum(A * A, axis=0), 0.0)
            var[:, l] = shrink + np.sum(W[:, l:l + 1] * B * B, axis=0) + noise
    return PredictiveLatent(mean, var)


@dataclass
class Imputation:
    """Outcome of :func:`impute` for a block of rows.

    ``filled`` keeps every observed cell and fills the rest with point
    estimates; ``estimates`` holds the (real-valued) point estimate of every
    cell, ``spread`` the predictive standard deviation of continuous
    features, and ``nll`` the per-cell predictive NLL wherever ground truth
    was scored (NaN elsewhere).
    """

    filled: DatasetTable
    estimates: np.ndarray
    spread: np.ndarray
    nll: np.ndarray
    modes: np.ndarray
    samples: int


def _discretized_log_prob(samples: list[Gaussian], y: np.ndarray, levels: int | None) -> np.ndarray:
    """log mean_s P(round(v) = y) for v ~ N(mean_s, var_s); end bins absorb the tails."""
    lp = []
    for s in samples:
        m, sd = s.mean.data, np.sqrt(s.var.data)
        lo = (y - 0.5 - m) / sd
        hi = (y + 0.5 - m) / sd
        lo = np.where(y <= 0, -np.inf, lo)
        if levels is not None:
            hi = np.where(y >= levels - 1, np.inf, hi)
        # P(lo < Z < hi) computed on the side of the bin away from the mode
        upper = lo > 0
        a = np.where(upper, log_ndtr(-lo), log_ndtr(hi))
        b = np.where(upper, log_ndtr(-hi), log_ndtr(lo))
        with np.errstate(divide="ignore"):
            lp.append(a + np.log1p(-np.exp(np.minimum(b - a, 0.0))))
    lp = np.stack(lp)
    top = lp.max(axis=0)
    return top + np.log(np.mean(np.exp(lp - top), axis=0))


def _as_target(estimate: np.ndarray, target) -> np.ndarray:
    """Snap a real-valued estimate onto an integer-valued feature's support."""
    if not target.is_integer:
        return estimate
    out = np.maximum(np.round(estimate), 0.0)
    if target.cardinality is not None:
        out = np.minimum(out, target.cardinality - 1)
    return out


def _latent_samples(rng, mean: np.ndarray, var: np.ndarray, n: int) -> np.ndarray:
    eps = rng.standard_normal((n,) + mean.shape)
    return mean[None] + np.sqrt(var)[None] * eps


def impute(table: DatasetTable, model: HLVAE, training: DatasetTable | None = None,
           n_samples: int = DEFAULT_SAMPLES, seed: int = 0, mode: str = "auto",
           truth: HeldOutCells | None = None, target_schema: Schema | None = None) -> Imputation:
    """Fill unobserved cells from Monte-Carlo latent samples.

    ``mode`` picks each row's latent distribution: ``"amortized"`` uses the
    encoder posterior of the (partially observed) row itself, ``"gp"`` the
    GP predictive given ``training``, and ``"auto"`` the former whenever the
    row has at least one observed cell. NLL is scored on the row's observed
    cells and on every ``truth`` cell that falls in the table.

    ``target_schema`` declares the feature types the results are judged
    against when the model's own heads differ (an all-Gaussian model scored
    on count or categorical columns): estimates are then rounded and clipped
    onto the target support and NLL uses the Gaussian mass of the unit bin
    around each level.
    """
    if mode not in ("auto", "amortized", "gp"):
        raise ValueError(f"unknown imputation mode {mode!r}")
    schema = model.schema
    target = target_schema or schema
    rng = np.random.default_rng(seed)
    N, D, L = table.N, table.D, model.gp.latent_dim
    observed_any = table.mask.any(axis=1)
    use_gp = np.full(N, mode == "gp") if mode != "auto" else ~observed_any
    if use_gp.any() and training is None:
        raise ValueError("GP-based imputation needs the training table")

    mean, var = np.zeros((N, L)), np.zeros((N, L))
    with ad.no_grad():
        if (~use_gp).any():
            post = model.encode(model.encode_table(table.subset(np.flatnonzero(~use_gp))))
            mean[~use_gp], var[~use_gp] = post.means.data, post.variances.data
        if use_gp.any():
            pred = latent_predict(table.X[use_gp], model, training)
            mean[use_gp], var[use_gp] = pred.mean, pred.var
        Z = _latent_samples(rng, mean, var, n_samples)
        decoded: list[list[LikelihoodParams]] = [model.decode(Z[s]) for s in range(n_samples)]

    estimates = np.zeros((N, D))
    spread = np.full((N, D), np.nan)
    per_feature = [[decoded[s][d] for s in range(n_samples)] for d in range(D)]
    for d in range(D):
        summary = mixture_summary(per_feature[d])
        estimates[:, d] = _as_target(summary["estimate"], target.features[d])
        if "std" in summary:
            spread[:, d] = summary["std"]

    Y = np.where(table.mask, table.Y, estimates)
    filled = DatasetTable(target, table.X, Y, np.ones_like(table.mask), table.row_ids)

    score = np.array(table.mask)
    values = np.where(table.mask, table.Y, np.nan)
    if truth is not None:
        where = {int(r): i for i, r in enumerate(table.row_ids)}
        for r, d, v in zip(truth.rows, truth.features, truth.values):
            i = where.get(int(r))
            if i is not None:
                score[i, d] = True
                values[i, d] = v
    nll = np.full((N, D), np.nan)
    for d in range(D):
        rows = np.flatnonzero(score[:, d])
        if not rows.size:
            continue
        samples = [_rows(p, rows) for p in per_feature[d]]
        y = values[rows, d]
        own, tgt = schema.features[d], target.features[d]
        if own.likelihood.startswith("gaussian") and tgt.is_integer:
            nll[rows, d] = -_discretized_log_prob(samples, y, tgt.cardinality)
        else:
            nll[rows, d] = -mixture_log_prob(samples, y)
    modes = np.where(use_gp, "gp", "amortized")
    return Imputation(filled, estimates, spread, nll, modes, n_samples)


def _rows(params: LikelihoodParams, rows: np.ndarray) -> LikelihoodParams:
    """Restrict vectorized likelihood parameters to a subset of rows."""
    kwargs = {}
    for name, value in vars(params).items():
        if name == "feature" or name == "thresholds":
            kwargs[name] = value
        else:
            kwargs[name] = ad.Tensor(value.data[rows])
    return type(params)(**kwargs)


def predict_future(query: DatasetTable, model: HLVAE, training: DatasetTable,
                   n_samples: int = DEFAULT_SAMPLES, seed: int = 0,
                   target_schema: Schema | None = None) -> Imputation:
    """Generate whole rows at new covariates from the GP predictive alone.

    Any observed values in ``query`` are treated as ground truth for the
    NLL and never shown to the model. Rows whose instance id appears in
    ``training`` (disclosed visits) are informed by that instance's
    individual-specific kernel component.
    """
    truth = HeldOutCells.from_table(query)
    hidden = query.with_mask(np.zeros_like(query.mask))
    return impute(hidden, model, training, n_samples, seed, "gp", truth, target_schema)
