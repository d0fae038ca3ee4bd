"""Amortized encoder and heterogeneous decoder (one hidden ReLU layer each)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeMismatch
from .likelihoods import LikelihoodParams, decode_head, head_outputs
from .schema import Schema


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class LatentPosterior:
    """Diagonal Gaussian q(z_n) per row: means and variances of shape (N, L)."""

    means: Tensor
    variances: Tensor

    @property
    def N(self) -> int:
        return self.means.shape[0]

    @property
    def L(self) -> int:
        return self.means.shape[1]


def init_encoder(rng, in_width: int, hidden: int, latent: int) -> dict[str, np.ndarray]:
    return {
        "enc.W1": glorot(rng, in_width, hidden),
        "enc.b1": np.zeros(hidden),
        "enc.W2": glorot(rng, hidden, 2 * latent),
        "enc.b2": np.zeros(2 * latent),
    }


def slot_ranges(schema: Schema, slot_width: int) -> list[tuple[int, int]]:
    return [(d * slot_width, (d + 1) * slot_width) for d in range(len(schema.features))]


def init_decoder(rng, latent: int, hidden: int, schema: Schema, slot_width: int) -> dict[str, np.ndarray]:
    S = slot_width * len(schema.features)
    params = {
        "dec.W1": glorot(rng, latent, hidden),
        "dec.b1": np.zeros(hidden),
        "dec.W2": glorot(rng, hidden, S),
        "dec.b2": np.zeros(S),
    }
    for d, feat in enumerate(schema.features):
        W = head_outputs(feat)
        params[f"head.{d}.W"] = glorot(rng, slot_width, W)
        params[f"head.{d}.b"] = np.zeros(W)
        if feat.likelihood == "gaussian-free-variance":
            params[f"head.{d}.free_var"] = np.zeros(1)
        if feat.likelihood == "ordinal":
            params[f"head.{d}.theta"] = np.zeros(feat.cardinality - 1)
    return params


def encode(params, Ytilde) -> LatentPosterior:
    """Row-wise q(z_n | y_n): means and softplus variances from one hidden layer."""
    Ytilde = ad.as_tensor(Ytilde)
    W1 = params["enc.W1"]
    if Ytilde.ndim != 2 or Ytilde.shape[1] != W1.shape[0]:
        raise ShapeMismatch(f"encoder expects width {W1.shape[0]}, got input of shape {Ytilde.shape}")
    hidden = ad.relu(Ytilde @ W1 + params["enc.b1"])
    out = hidden @ params["enc.W2"] + params["enc.b2"]
    L = out.shape[1] // 2
    return LatentPosterior(out[:, :L], ad.softplus(out[:, L:]))


def reparameterize(posterior: LatentPosterior, noise: np.ndarray) -> Tensor:
    """z = mu + sigma * eps."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != posterior.means.shape:
        raise ShapeMismatch(f"noise shape {noise.shape} != posterior shape {posterior.means.shape}")
    return posterior.means + ad.sqrt(posterior.variances) * noise


def homogeneous_layer(params, Z) -> Tensor:
    Z = ad.as_tensor(Z)
    W1 = params["dec.W1"]
    if Z.ndim != 2 or Z.shape[1] != W1.shape[0]:
        raise ShapeMismatch(f"decoder expects latent width {W1.shape[0]}, got {Z.shape}")
    hidden = ad.relu(Z @ W1 + params["dec.b1"])
    return hidden @ params["dec.W2"] + params["dec.b2"]


def decode(params, Z, schema: Schema, slot_width: int) -> list[LikelihoodParams]:
    """Per-feature likelihood parameters for every row of Z."""
    A = homogeneous_layer(params, Z)
    out = []
    for d, (lo, hi) in enumerate(slot_ranges(schema, slot_width)):
        feat = schema.features[d]
        out.append(decode_head(
            A[:, lo:hi], feat, params[f"head.{d}.W"], params[f"head.{d}.b"],
            free_var=params.get(f"head.{d}.free_var"), theta=params.get(f"head.{d}.theta"),
        ))
    return out
