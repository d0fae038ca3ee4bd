"""Per-feature likelihood heads: links, log-probabilities, sampling, point estimates.

Every head is a single affine map from the feature's slot of the
homogeneous layer to its W unconstrained outputs, followed by link
functions. Parameter objects are vectorized over rows: ``Gaussian.mean``
has shape (N,), ``Categorical.logits`` (N, R) and so on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, log_softmax

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainViolation, ShapeMismatch
from .schema import FeatureSpec, check_domain

GAUSSIAN_VAR_FLOOR = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


def head_outputs(feature: FeatureSpec) -> int:
    """W: number of network outputs the feature's head produces."""
    kind = feature.likelihood
    if kind in ("gaussian", "lognormal"):
        return 2
    if kind == "categorical":
        return feature.cardinality - 1
    return 1  # free-variance gaussian, poisson, ordinal


def placeholder(feature: FeatureSpec) -> float:
    """An in-domain stand-in for unobserved cells (multiplied by a zero mask)."""
    if feature.likelihood == "lognormal":
        return 1.0
    if feature.bounded:
        return 0.5
    return 0.0


class LikelihoodParams:
    """Decoded parameters gamma_nd for one feature over a block of rows."""

    feature: FeatureSpec

    def log_prob(self, y) -> Tensor:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def point_estimate(self) -> np.ndarray:
        raise NotImplementedError

    def _checked(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        check_domain(y, self.feature)
        return y


@dataclass
class Gaussian(LikelihoodParams):
    feature: FeatureSpec
    mean: Tensor
    var: Tensor

    def log_prob(self, y) -> Tensor:
        y = self._checked(y)
        return -0.5 * (LOG_2PI + ad.log(self.var)) - 0.5 * ad.square(y - self.mean) / self.var

    def sample(self, rng):
        return rng.normal(self.mean.data, np.sqrt(self.var.data))

    def point_estimate(self):
        return self.mean.data.copy()


@dataclass
class LogNormal(LikelihoodParams):
    feature: FeatureSpec
    mu: Tensor
    var: Tensor

    def log_prob(self, y) -> Tensor:
        y = self._checked(y)
        ly = np.log(y)
        return -ly - 0.5 * (LOG_2PI + ad.log(self.var)) - 0.5 * ad.square(ly - self.mu) / self.var

    def sample(self, rng):
        return np.exp(rng.normal(self.mu.data, np.sqrt(self.var.data)))

    def point_estimate(self):
        return np.exp(self.mu.data + 0.5 * self.var.data)


@dataclass
class Poisson(LikelihoodParams):
    feature: FeatureSpec
    rate: Tensor

    def log_prob(self, y) -> Tensor:
        y = self._checked(y)
        return y * ad.log(self.rate) - self.rate - gammaln(y + 1.0)

    def sample(self, rng):
        return rng.poisson(self.rate.data).astype(np.float64)

    def point_estimate(self):
        return self.rate.data.copy()


@dataclass
class Categorical(LikelihoodParams):
    """``logits`` (N, R) with the first column pinned to 0."""

    feature: FeatureSpec
    logits: Tensor

    def log_probs(self) -> Tensor:
        return self.logits - ad.logsumexp(self.logits, axis=1, keepdims=True)

    def probs(self) -> np.ndarray:
        return np.exp(log_softmax(self.logits.data, axis=1))

    def log_prob(self, y) -> Tensor:
        y = self._checked(y).astype(int)
        onehot = np.zeros(self.logits.shape)
        onehot[np.arange(len(y)), y] = 1.0
        return (self.log_probs() * onehot).sum(axis=1)

    def sample(self, rng):
        g = rng.gumbel(size=self.logits.shape)
        return np.argmax(self.logits.data + g, axis=1).astype(np.float64)

    def point_estimate(self):
        # np.argmax returns the first maximum: ties go to the lowest index
        return np.argmax(self.probs(), axis=1).astype(np.float64)


@dataclass
class Ordinal(LikelihoodParams):
    """Cumulative logit: P(y <= r) = sigmoid(t_r - c), thresholds shared across rows."""

    feature: FeatureSpec
    score: Tensor        # c, shape (N,)
    thresholds: Tensor   # t_1 < ... < t_{R-1}, shape (R-1,)

    def log_probs(self) -> Tensor:
        R = self.feature.cardinality
        n = self.score.shape[0]
        diff = self.thresholds.reshape(1, R - 1) - self.score.reshape(n, 1)
        log_cdf = -ad.softplus(-diff)   # log sigmoid(t_r - c)
        log_sf = -ad.softplus(diff)     # log (1 - sigmoid(t_r - c))
        cols = [log_cdf[:, 0:1]]
        if R > 2:
            gaps = self.thresholds[1:] - self.thresholds[:-1]
            # sigmoid(b) - sigmoid(a) = sigmoid(b) (1 - sigmoid(a)) (1 - exp(a - b))
            log_gap = ad.log1p(-ad.exp(-gaps)).reshape(1, R - 2)
            cols.append(log_cdf[:, 1:] + log_sf[:, :-1] + log_gap)
        cols.append(log_sf[:, R - 2:R - 1])
        return ad.concat(cols, axis=1)

    def probs(self) -> np.ndarray:
        with ad.no_grad():
            return np.exp(self.log_probs().data)

    def log_prob(self, y) -> Tensor:
        y = self._checked(y).astype(int)
        onehot = np.zeros((len(y), self.feature.cardinality))
        onehot[np.arange(len(y)), y] = 1.0
        return (self.log_probs() * onehot).sum(axis=1)

    def sample(self, rng):
        t = self.thresholds.data
        c = self.score.data
        cdf = 1.0 / (1.0 + np.exp(-(t[None, :] - c[:, None])))
        u = rng.uniform(size=len(c))
        return np.sum(u[:, None] > cdf, axis=1).astype(np.float64)

    def point_estimate(self):
        return np.argmax(self.probs(), axis=1).astype(np.float64)


def log_prob(y, params: LikelihoodParams) -> Tensor:
    return params.log_prob(np.atleast_1d(y))


def ordinal_thresholds(theta_raw) -> Tensor:
    """t_r = sum_{j<=r} softplus(theta_j): strictly increasing by construction."""
    theta_raw = ad.as_tensor(theta_raw)
    k = theta_raw.shape[0]
    upper = np.triu(np.ones((k, k)))
    return (ad.softplus(theta_raw).reshape(1, k) @ upper).reshape(k)


def decode_head(slot, feature: FeatureSpec, weight, bias, free_var=None, theta=None) -> LikelihoodParams:
    """Affine head on a slot block (N, s_d) followed by the feature's link functions."""
    slot = ad.as_tensor(slot)
    if slot.ndim == 1:
        slot = slot.reshape(1, slot.shape[0])
    weight = ad.as_tensor(weight)
    if slot.shape[1] != weight.shape[0]:
        raise ShapeMismatch(f"slot width {slot.shape[1]} does not match head input {weight.shape[0]}")
    h = slot @ weight + bias
    n = slot.shape[0]
    kind = feature.likelihood
    if kind in ("gaussian", "gaussian-free-variance"):
        mean = h[:, 0]
        if feature.bounded:
            mean = ad.sigmoid(mean)
        if kind == "gaussian":
            var = ad.softplus(h[:, 1]) + GAUSSIAN_VAR_FLOOR
        else:
            var = (ad.softplus(ad.as_tensor(free_var).reshape(1)) + GAUSSIAN_VAR_FLOOR) * np.ones(n)
        return Gaussian(feature, mean, var)
    if kind == "lognormal":
        return LogNormal(feature, h[:, 0], ad.softplus(h[:, 1]) + GAUSSIAN_VAR_FLOOR)
    if kind == "poisson":
        return Poisson(feature, ad.softplus(h[:, 0]))
    if kind == "categorical":
        return Categorical(feature, ad.concat([np.zeros((n, 1)), h], axis=1))
    if kind == "ordinal":
        return Ordinal(feature, ad.softplus(h[:, 0]), ordinal_thresholds(theta))
    raise DomainViolation(f"unsupported likelihood {kind!r}")


# -- Monte-Carlo mixtures of decoded parameters ---------------------------------

def mixture_summary(samples: list[LikelihoodParams]) -> dict:
    """Average sufficient statistics over latent samples of one feature.

    Returns a dict with the point ``estimate`` and, for continuous features,
    the predictive ``std`` of the mixture; discrete features also get the
    averaged ``probs``.
    """
    first = samples[0]
    if isinstance(first, Gaussian):
        means = np.stack([s.mean.data for s in samples])
        vars_ = np.stack([s.var.data for s in samples])
        return {"estimate": means.mean(0), "std": np.sqrt(vars_.mean(0) + means.var(0))}
    if isinstance(first, LogNormal):
        m = np.stack([np.exp(s.mu.data + 0.5 * s.var.data) for s in samples])
        second = np.stack([np.exp(2 * s.mu.data + 2 * s.var.data) for s in samples])
        return {"estimate": m.mean(0), "std": np.sqrt(np.maximum(second.mean(0) - m.mean(0) ** 2, 0))}
    if isinstance(first, Poisson):
        rates = np.stack([s.rate.data for s in samples])
        return {"estimate": rates.mean(0), "std": np.sqrt(rates.mean(0) + rates.var(0))}
    probs = np.mean([s.probs() for s in samples], axis=0)
    return {"estimate": np.argmax(probs, axis=1).astype(np.float64), "probs": probs}


def mixture_log_prob(samples: list[LikelihoodParams], y: np.ndarray) -> np.ndarray:
    """log mean_s p(y | gamma_s), elementwise over rows."""
    with ad.no_grad():
        lp = np.stack([s.log_prob(y).data for s in samples])
    top = lp.max(axis=0)
    return top + np.log(np.mean(np.exp(lp - top), axis=0))
