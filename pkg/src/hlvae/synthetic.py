"""Synthetic longitudinal heterogeneous data with known latent trajectories.

Latents follow an additive GP prior per dimension: a time effect shared by
all instances plus an instance-specific time effect, plus i.i.d. latent
noise. A fixed random decoder (linear map, tanh, per-feature linear read
out) turns latents into likelihood parameters, from which each cell is
sampled.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .schema import CovariateSpec, DatasetTable, FeatureSpec, Schema


def _default_features() -> list[dict]:
    return [
        {"name": "g1", "likelihood": "gaussian"},
        {"name": "g2", "likelihood": "gaussian"},
        {"name": "count", "likelihood": "poisson"},
        {"name": "cat", "likelihood": "categorical", "cardinality": 3},
        {"name": "ord", "likelihood": "ordinal", "cardinality": 4},
    ]


@dataclass
class GeneratorConfig:
    n_instances: int = 20
    visits: int = 10
    latent_dim: int = 2
    time_span: float = 10.0
    time_jitter: float = 0.0        # uniform jitter as a fraction of the visit spacing
    shared_magnitude: float = 1.0
    shared_lengthscale: float = 3.0
    individual_magnitude: float = 1.0
    individual_lengthscale: float = 3.0
    latent_noise: float = 0.01
    hidden: int = 8
    gaussian_noise: float = 0.1     # observation std of gaussian features
    lognormal_noise: float = 0.1    # std of log-values
    logit_scale: float = 3.0        # sharpness of categorical/ordinal responses
    features: list = field(default_factory=_default_features)

    def schema(self) -> Schema:
        feats = tuple(
            FeatureSpec(f["name"], f["likelihood"], f.get("cardinality"), bool(f.get("bounded", False)))
            for f in self.features
        )
        covs = (
            CovariateSpec("id", "categorical", is_id=True),
            CovariateSpec("time", "continuous", is_time=True),
        )
        return Schema(feats, covs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "GeneratorConfig":
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "GeneratorConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class SyntheticData:
    table: DatasetTable
    latents: np.ndarray          # (N, L) ground-truth latent values
    decoder: dict                # fixed random decoder weights
    config: GeneratorConfig
    noiseless: dict              # per-feature noise-free location (gaussian mean, etc.)


def _se(t1, t2, magnitude, lengthscale):
    d = t1[:, None] - t2[None, :]
    return magnitude * np.exp(-0.5 * d * d / lengthscale ** 2)


def _gp_draw(rng, times, magnitude, lengthscale):
    if magnitude <= 0:
        return np.zeros(len(times))
    K = _se(times, times, magnitude, lengthscale) + 1e-9 * magnitude * np.eye(len(times))
    w, V = np.linalg.eigh(K)
    return V @ (np.sqrt(np.clip(w, 0, None)) * rng.standard_normal(len(times)))


def generate_synthetic_longitudinal(cfg: GeneratorConfig, seed: int) -> SyntheticData:
    rng = np.random.default_rng(seed)
    schema = cfg.schema()
    P, V, L = cfg.n_instances, cfg.visits, cfg.latent_dim
    grid = np.linspace(0.0, cfg.time_span, V)
    spacing = cfg.time_span / max(V - 1, 1)

    ids = np.repeat(np.arange(P, dtype=float), V)
    jitter = rng.uniform(-0.5, 0.5, size=P * V) * cfg.time_jitter * spacing
    times = np.tile(grid, P) + jitter

    # shared effect evaluated on every distinct time, instance effect per instance
    uniq, inverse = np.unique(times, return_inverse=True)
    Z = np.zeros((P * V, L))
    for l in range(L):
        shared = _gp_draw(rng, uniq, cfg.shared_magnitude, cfg.shared_lengthscale)[inverse]
        indiv = np.concatenate([
            _gp_draw(rng, times[p * V:(p + 1) * V], cfg.individual_magnitude, cfg.individual_lengthscale)
            for p in range(P)
        ])
        noise = np.sqrt(cfg.latent_noise) * rng.standard_normal(P * V) if cfg.latent_noise > 0 else 0.0
        Z[:, l] = shared + indiv + noise

    W1 = rng.normal(0.0, 1.0 / np.sqrt(L), size=(L, cfg.hidden))
    b1 = rng.normal(0.0, 0.3, size=cfg.hidden)
    H = np.tanh(Z @ W1 + b1)
    N = P * V
    Y = np.zeros((N, len(schema.features)))
    decoder = {"W1": W1, "b1": b1, "heads": []}
    noiseless = {}
    for d, feat in enumerate(schema.features):
        kind = feat.likelihood
        if kind in ("gaussian", "gaussian-free-variance"):
            w = rng.normal(0.0, 1.0, size=cfg.hidden)
            b = rng.normal(0.0, 0.5)
            loc = H @ w + b
            if feat.bounded:
                loc = 1.0 / (1.0 + np.exp(-loc))
                Y[:, d] = np.clip(loc + cfg.gaussian_noise * rng.standard_normal(N), 0.0, 1.0)
            else:
                Y[:, d] = loc + cfg.gaussian_noise * rng.standard_normal(N)
            head = {"w": w, "b": b}
        elif kind == "lognormal":
            w = rng.normal(0.0, 0.5, size=cfg.hidden)
            b = rng.normal(1.0, 0.3)
            loc = H @ w + b
            Y[:, d] = np.exp(loc + cfg.lognormal_noise * rng.standard_normal(N))
            head = {"w": w, "b": b}
        elif kind == "poisson":
            w = rng.normal(0.0, 0.6, size=cfg.hidden)
            b = np.log(4.0)
            loc = np.exp(H @ w + b)
            Y[:, d] = rng.poisson(loc)
            head = {"w": w, "b": b}
        elif kind == "categorical":
            R = feat.cardinality
            Wc = rng.normal(0.0, 1.0, size=(cfg.hidden, R))
            logits = cfg.logit_scale * (H @ Wc)
            loc = logits
            g = rng.gumbel(size=(N, R))
            Y[:, d] = np.argmax(logits + g, axis=1)
            head = {"W": Wc}
        else:  # ordinal
            R = feat.cardinality
            w = rng.normal(0.0, 1.0, size=cfg.hidden)
            score = cfg.logit_scale * (H @ w)
            spread = np.std(score) if np.std(score) > 0 else 1.0
            thresholds = np.mean(score) + spread * np.linspace(-1.0, 1.0, R - 1)
            loc = score
            cdf = 1.0 / (1.0 + np.exp(-(thresholds[None, :] - score[:, None])))
            u = rng.uniform(size=N)
            Y[:, d] = np.sum(u[:, None] > cdf, axis=1)
            head = {"w": w, "thresholds": thresholds}
        noiseless[feat.name] = loc
        decoder["heads"].append(head)

    X = np.column_stack([ids, times])
    table = DatasetTable(schema, X, Y, np.ones_like(Y, dtype=bool))
    return SyntheticData(table, Z, decoder, cfg, noiseless)
