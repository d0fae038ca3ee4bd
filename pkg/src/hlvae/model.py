"""The HL-VAE model container and its checkpoint format."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kernels import AdditiveGP, InducingPointSet, init_inducing, parse_kernel
from .networks import LatentPosterior, decode, encode, init_decoder, init_encoder
from .schema import DatasetTable, EncodedMatrix, NormStats, Schema, encode_inputs, fit_normalization

CHECKPOINT_FORMAT = "hlvae-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    latent_dim: int = 8
    hidden: int = 50
    slot_width: int = 5
    kernel: str = "se(time) + ca(id)*se(time)"
    n_inducing: int = 32
    mask_input: bool = False
    init_noise: float = 0.1


class HLVAE:
    """Encoder, heterogeneous decoder and additive GP prior in one parameter dict.

    ``params`` maps names to leaf tensors; see ``networks`` and ``kernels``
    for the naming scheme. Inducing points (``inducing.cont``) and the
    variational inducing distribution (``vg.m``, ``vg.h_raw``) exist only
    when the kernel has an individual-specific component.
    """

    def __init__(self, schema: Schema, config: ModelConfig, stats: NormStats,
                 params: dict[str, np.ndarray], inducing_fixed=None, inducing_cols=None):
        self.schema = schema
        self.config = config
        self.stats = stats
        self.gp = AdditiveGP(parse_kernel(config.kernel, schema), config.latent_dim)
        self.params = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        self.inducing = None
        if inducing_fixed is not None:
            self.inducing = InducingPointSet(inducing_fixed, inducing_cols, self.params["inducing.cont"])

    # -- construction --------------------------------------------------------
    @classmethod
    def initialize(cls, table: DatasetTable, config: ModelConfig, seed: int = 0) -> "HLVAE":
        rng = np.random.default_rng(seed)
        schema = table.schema
        stats = fit_normalization(table)
        in_width = sum(f.encoded_width for f in schema.features)
        if config.mask_input:
            in_width += len(schema.features)
        params = {}
        params.update(init_encoder(rng, in_width, config.hidden, config.latent_dim))
        params.update(init_decoder(rng, config.latent_dim, config.hidden, schema, config.slot_width))
        gp = AdditiveGP(parse_kernel(config.kernel, schema), config.latent_dim)
        params.update(gp.init_params(table.X, noise=config.init_noise))
        fixed = cols = None
        if gp.individual is not None:
            ind = init_inducing(table.X, gp, config.n_inducing, rng)
            fixed, cols = ind.fixed, ind.cont_cols
            M = ind.M
            params["inducing.cont"] = ind.trainable.data.copy()
            params["vg.m"] = np.zeros((config.latent_dim, M))
            params["vg.h_raw"] = np.zeros((config.latent_dim, M, M))
        model = cls(schema, config, stats, params, fixed, cols)
        if model.inducing is not None:
            model.reset_vg()
        return model

    # -- forward pieces ------------------------------------------------------
    def encode_table(self, table: DatasetTable) -> EncodedMatrix:
        return encode_inputs(table, self.stats, mask_columns=self.config.mask_input)

    def encode(self, encoded) -> LatentPosterior:
        values = encoded.values if isinstance(encoded, EncodedMatrix) else encoded
        return encode(self.params, values)

    def decode(self, Z):
        return decode(self.params, Z, self.schema, self.config.slot_width)

    def vg_chol(self, l: int) -> Tensor:
        """Cholesky factor of H_l: strictly lower raw part plus softplus diagonal."""
        raw = self.params["vg.h_raw"][l]
        M = raw.shape[0]
        eye = np.eye(M)
        return raw * np.tril(np.ones((M, M)), -1) + ad.softplus(raw) * eye

    def set_vg(self, m: np.ndarray, H: np.ndarray) -> None:
        """Store q(u) = N(m, H) through the Cholesky / softplus parameterization."""
        raw = np.zeros_like(H)
        for l in range(H.shape[0]):
            LH, _ = ad.jittered_cholesky(H[l])
            d = np.diag(LH)
            # softplus^-1, written to stay finite for large diagonals
            raw[l] = np.tril(LH, -1) + np.diag(d + np.log(-np.expm1(-d)))
        self.params["vg.m"].data = np.array(m, dtype=np.float64)
        self.params["vg.h_raw"].data = raw

    def reset_vg(self) -> None:
        """q(u) back to the inducing prior N(0, K_SS)."""
        L = self.gp.latent_dim
        with ad.no_grad():
            H = np.stack([self.gp.inducing_covariance(self.params, l, self.inducing).data for l in range(L)])
        self.set_vg(np.zeros((L, self.inducing.M)), H)

    def noise(self, l: int) -> float:
        return float(self.gp.noise(self.params, l).data)

    # -- parameter bookkeeping ---------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=np.float64)

    def copy(self) -> "HLVAE":
        ind = self.inducing
        return HLVAE(self.schema, self.config, self.stats, self.state(),
                     None if ind is None else ind.fixed.copy(), None if ind is None else list(ind.cont_cols))

    # -- checkpoint ---------------------------------------------------------------
    def to_dict(self) -> dict:
        out = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "schema": self.schema.to_dict(),
            "model_config": asdict(self.config),
            "normalization": self.stats.to_dict(),
            "params": {
                k: {"shape": list(v.shape), "values": v.data.reshape(-1).tolist()}
                for k, v in sorted(self.params.items())
            },
        }
        if self.inducing is not None:
            out["inducing"] = {"fixed": self.inducing.fixed.tolist(), "cont_cols": self.inducing.cont_cols}
        return out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def from_dict(cls, obj: dict) -> "HLVAE":
        if obj.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not an HL-VAE checkpoint")
        if obj.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {obj.get('version')}")
        params = {
            k: np.array(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in obj["params"].items()
        }
        ind = obj.get("inducing")
        return cls(
            Schema.from_dict(obj["schema"]),
            ModelConfig(**obj["model_config"]),
            NormStats.from_dict(obj["normalization"]),
            params,
            None if ind is None else np.array(ind["fixed"], dtype=np.float64),
            None if ind is None else list(ind["cont_cols"]),
        )

    @classmethod
    def load(cls, path) -> "HLVAE":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))
