"""ELBO assembly, closed-form and mini-batch KL terms, and the training loop.

The mini-batch KL bound augments the prior with inducing outputs ``u`` of
the low-rank components, with ``q(u) = N(m, H)``. Writing the low-rank
part as ``f_A = A u + f_perp`` (``A = K_XS K_SS^-1``, ``f_perp`` carrying
the residual covariance ``K_XX - Q_XX``), the prior becomes
``z | u, f_perp ~ N(A u + f_perp, Sigma_hat)`` with block-diagonal
``Sigma_hat``. Bounding the marginal KL by the joint KL and integrating
``f_perp`` out under its prior gives, per latent dimension,

    KL <= 1/2 (P / P_hat) sum_{p in batch} Upsilon_p - N / 2 + KL(N(m, H) || N(0, K_SS))

    Upsilon_p = log|S_p| - sum log w_p + tr(S_p^-1 W_p)
                + (mu_p - A_p m)^T S_p^-1 (mu_p - A_p m)
                + tr(S_p^-1 A_p H A_p^T) + tr(S_p^-1 (K_pp - Q_pp))

with ``S_p`` the instance's block of ``Sigma_hat``. With all instances in
the batch the right-hand side is a KL between joint distributions whose
z-marginals are q(Z) and the exact prior, so it never undercuts the
exact KL.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    FactorizationFailure,
    IncompleteInstance,
    MissingIndividualComponent,
    NonFiniteError,
    NonFiniteLoss,
)
from .likelihoods import LikelihoodParams, placeholder
from .model import HLVAE
from .networks import LatentPosterior, reparameterize
from .schema import DatasetTable

log = logging.getLogger(__name__)


# -- reconstruction -----------------------------------------------------------------

def fill_missing(table: DatasetTable) -> np.ndarray:
    """Feature matrix with unobserved cells set to in-domain placeholders."""
    Y = np.array(table.Y)
    for d, feat in enumerate(table.schema.features):
        Y[~table.mask[:, d], d] = placeholder(feat)
    return Y


def reconstruction_term(Y: np.ndarray, mask: np.ndarray, params: Sequence[LikelihoodParams]) -> Tensor:
    """Sum of log p(y_nd | gamma_nd) over observed cells only.

    ``Y`` must hold in-domain values everywhere (see :func:`fill_missing`);
    unobserved cells are multiplied by zero and contribute no gradient.
    """
    mask = np.asarray(mask, dtype=np.float64)
    total = Tensor(0.0)
    for d, head in enumerate(params):
        if not mask[:, d].any():
            continue
        total = total + (head.log_prob(Y[:, d]) * mask[:, d]).sum()
    return total


# -- KL terms -----------------------------------------------------------------------

def _diag(M: Tensor) -> Tensor:
    n = M.shape[0]
    return M[np.arange(n), np.arange(n)]


def _gaussian_kl_dim(mu: Tensor, w: Tensor, Sigma: Tensor) -> Tensor:
    """KL(N(mu, diag w) || N(0, Sigma)) through a Cholesky factor."""
    n = mu.shape[0]
    L = ad.cholesky(Sigma)
    logdet = 2.0 * ad.log(_diag(L)).sum()
    Linv = ad.triangular_solve(L, np.eye(n))
    trace = (ad.square(Linv).sum(axis=0) * w).sum()
    alpha = ad.triangular_solve(L, mu.reshape(n, 1))
    quad = ad.square(alpha).sum()
    return 0.5 * (logdet - ad.log(w).sum() + trace + quad - n)


def exact_kl(posterior: LatentPosterior, covariances: Sequence) -> Tensor:
    """Closed-form KL(q(Z) || p(Z | X)) summed over latent dimensions."""
    total = Tensor(0.0)
    for l, Sigma in enumerate(covariances):
        total = total + _gaussian_kl_dim(posterior.means[:, l], posterior.variances[:, l], ad.as_tensor(Sigma))
    return total


def _kl_inducing(m: Tensor, LH: Tensor, LS: Tensor) -> Tensor:
    """KL(N(m, LH LH^T) || N(0, LS LS^T))."""
    M = m.shape[0]
    G = ad.triangular_solve(LS, LH)
    a = ad.triangular_solve(LS, m.reshape(M, 1))
    return 0.5 * (
        2.0 * ad.log(_diag(LS)).sum() - 2.0 * ad.log(_diag(LH)).sum()
        + ad.square(G).sum() + ad.square(a).sum() - M
    )


def minibatch_kl_bound(model: HLVAE, X: np.ndarray, posterior: LatentPosterior,
                       instance_index: np.ndarray, n_instances: int, n_total: int,
                       expected_counts: Sequence[int] | None = None) -> Tensor:
    """Inducing-point upper bound on the KL from a batch of whole instances.

    ``X`` and ``posterior`` cover the batch rows, grouped by instance
    (``instance_index`` gives each row's batch-local instance). ``n_instances``
    and ``n_total`` are P and N of the full training table. When
    ``expected_counts`` is given, each batch instance must contribute exactly
    that many rows.
    """
    gp = model.gp
    if gp.individual is None or model.inducing is None:
        raise MissingIndividualComponent(
            "the mini-batch bound needs an individual-specific (id x time) kernel component"
        )
    instance_index = np.asarray(instance_index)
    blocks = [np.flatnonzero(instance_index == p) for p in np.unique(instance_index)]
    if expected_counts is not None:
        for k, rows in enumerate(blocks):
            if len(rows) != expected_counts[k]:
                raise IncompleteInstance(
                    f"batch instance {k} has {len(rows)} rows, expected {expected_counts[k]}"
                )
    scale = n_instances / len(blocks)
    params = model.params
    S = model.inducing
    M = S.M
    total = Tensor(0.0)
    for l in range(gp.latent_dim):
        LS = ad.cholesky(gp.inducing_covariance(params, l, S))
        LH = model.vg_chol(l)
        m = params["vg.m"][l]
        Linv_m = ad.triangular_solve(LS, m.reshape(M, 1))
        G = ad.triangular_solve(LS, LH)
        noise = gp.noise(params, l)
        upsilon = Tensor(0.0)
        for rows in blocks:
            Xp = X[rows]
            n = len(rows)
            mu = posterior.means[rows, l]
            w = posterior.variances[rows, l]
            K_sp = gp.covariance(params, l, S, Xp, which="low_rank")
            K_pp = gp.covariance(params, l, Xp, Xp, which="low_rank")
            S_p = gp.covariance(params, l, Xp, Xp, which="individual") + noise * np.eye(n)
            Lp = ad.cholesky(S_p)
            V = ad.triangular_solve(LS, K_sp)          # (M, n): Q_pp = V^T V
            resid = mu.reshape(n, 1) - V.T @ Linv_m    # mu_p - A_p m
            VG = V.T @ G                               # A_p L_H
            inner = (K_pp - V.T @ V) + VG @ VG.T       # K_pp - Q_pp + A_p H A_p^T
            Lp_inv = ad.triangular_solve(Lp, np.eye(n))
            prec = Lp_inv.T @ Lp_inv
            alpha = ad.triangular_solve(Lp, resid)
            upsilon = upsilon + (
                2.0 * ad.log(_diag(Lp)).sum() - ad.log(w).sum()
                + (ad.square(Lp_inv).sum(axis=0) * w).sum()
                + ad.square(alpha).sum()
                + (prec * inner).sum()
            )
        total = total + 0.5 * scale * upsilon - 0.5 * n_total + _kl_inducing(m, LH, LS)
    return total


def optimal_inducing_posterior(model: HLVAE, X: np.ndarray, posterior: LatentPosterior,
                               instance_index: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form (m, H) minimizing the full-batch bound for fixed everything else."""
    gp = model.gp
    params = model.params
    S = model.inducing
    instance_index = np.asarray(instance_index)
    blocks = [np.flatnonzero(instance_index == p) for p in np.unique(instance_index)]
    L = gp.latent_dim
    ms, Hs = np.zeros((L, S.M)), np.zeros((L, S.M, S.M))
    with ad.no_grad():
        for l in range(L):
            KS = gp.inducing_covariance(params, l, S).data
            prec = np.linalg.inv(KS)
            rhs = np.zeros(S.M)
            noise = gp.noise(params, l).data
            for rows in blocks:
                Xp = X[rows]
                K_sp = gp.covariance(params, l, S, Xp, which="low_rank").data
                S_p = gp.covariance(params, l, Xp, Xp, which="individual").data + noise * np.eye(len(rows))
                A = np.linalg.solve(KS, K_sp).T
                SA = np.linalg.solve(S_p, A)
                prec = prec + A.T @ SA
                rhs = rhs + SA.T @ posterior.means.data[rows, l]
            H = np.linalg.inv(prec)
            H = 0.5 * (H + H.T)
            ms[l], Hs[l] = H @ rhs, H
    return ms, Hs


def set_inducing_posterior(model: HLVAE, m: np.ndarray, H: np.ndarray) -> None:
    """Write (m, H) into the model's unconstrained variational parameters."""
    model.set_vg(m, H)


# -- ELBO ---------------------------------------------------------------------------

@dataclass
class PreparedTable:
    """A training table sorted by instance with its encoder inputs cached."""

    table: DatasetTable
    encoded: np.ndarray
    Y: np.ndarray
    mask: np.ndarray
    blocks: list[np.ndarray]

    @classmethod
    def build(cls, model: HLVAE, table: DatasetTable) -> "PreparedTable":
        table = table.sorted_by_instance()
        return cls(table, model.encode_table(table).values, fill_missing(table), table.mask.astype(float),
                   table.instance_rows())

    @property
    def n_instances(self) -> int:
        return len(self.blocks)

    @property
    def N(self) -> int:
        return self.table.N

    @property
    def n_observed(self) -> float:
        return float(self.mask.sum())


@dataclass
class ElboTerms:
    elbo: Tensor
    recon: Tensor
    kl: Tensor


def elbo(model: HLVAE, data: PreparedTable, rng: np.random.Generator, kl_mode: str = "exact",
         instances: Sequence[int] | None = None, beta: float = 1.0) -> ElboTerms:
    """Single-sample ELBO estimate on the given instances (all by default).

    Exact mode evaluates the closed-form KL and needs the whole table;
    bound mode scales the batch reconstruction by total / batch observed
    cells and uses :func:`minibatch_kl_bound`.
    """
    if instances is None:
        instances = range(data.n_instances)
    instances = list(instances)
    rows = np.concatenate([data.blocks[p] for p in instances])
    local = np.concatenate([np.full(len(data.blocks[p]), k) for k, p in enumerate(instances)])
    post = model.encode(data.encoded[rows])
    eps = rng.standard_normal(post.means.shape)
    Z = reparameterize(post, eps)
    heads = model.decode(Z)
    recon = reconstruction_term(data.Y[rows], data.mask[rows], heads)
    X = data.table.X[rows]
    if kl_mode == "exact":
        if len(instances) != data.n_instances:
            raise ValueError("exact KL needs the full table in one batch")
        covs = [model.gp.prior_covariance(model.params, X, l) for l in range(model.gp.latent_dim)]
        kl = exact_kl(post, covs)
        scaled = recon
    elif kl_mode == "bound":
        counts = [len(data.blocks[p]) for p in instances]
        kl = minibatch_kl_bound(model, X, post, local, data.n_instances, data.N, counts)
        batch_obs = float(data.mask[rows].sum())
        scaled = recon * (data.n_observed / batch_obs) if batch_obs > 0 else recon
    else:
        raise ValueError(f"unknown KL mode {kl_mode!r}")
    return ElboTerms(scaled - beta * kl, scaled, kl)


# -- optimization -------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        """Descent step on the given gradients (missing entries count as zero)."""
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                g = np.zeros_like(p.data)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 10          # instances per step in bound mode
    lr: float = 1e-3
    optimizer: str = "adam"
    kl: str = "exact"             # "exact" or "bound"
    seed: int = 0
    warmup_epochs: int | None = None   # default: 10% of epochs in bound mode, none in exact mode
    early_stopping: bool = False
    patience: int = 20

    def resolved_warmup(self) -> int:
        if self.warmup_epochs is not None:
            return self.warmup_epochs
        return int(0.1 * self.epochs) if self.kl == "bound" else 0


@dataclass
class EpochRecord:
    epoch: int
    elbo: float
    recon: float
    kl: float
    val_nll: float


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "elbo", "recon", "kl", "val_nll"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.elbo), repr(r.recon), repr(r.kl), repr(r.val_nll)])


def validation_nll(model: HLVAE, table: DatasetTable) -> float:
    """Mean per-cell NLL of a table's observed cells, decoded from posterior means."""
    if table.N == 0 or not table.mask.any():
        return float("nan")
    with ad.no_grad():
        post = model.encode(model.encode_table(table))
        heads = model.decode(post.means)
        total = reconstruction_term(fill_missing(table), table.mask, heads).item()
    return -total / float(table.mask.sum())


def train(table: DatasetTable, model: HLVAE, config: TrainConfig,
          validation: DatasetTable | None = None) -> tuple[HLVAE, History]:
    """Adam on the negative ELBO over instance-level minibatches.

    The model is updated in place and returned along with the per-epoch
    history. A non-finite objective raises NonFiniteLoss carrying the
    model restored to its last finite state.
    """
    if config.optimizer != "adam":
        raise ValueError(f"unsupported optimizer {config.optimizer!r}")
    if config.kl == "bound" and model.gp.individual is None:
        raise MissingIndividualComponent("bound mode needs an individual-specific kernel component")
    data = PreparedTable.build(model, table)
    P = data.n_instances
    if config.kl == "bound" and not 1 <= config.batch_size <= P:
        raise ValueError(f"batch size {config.batch_size} must lie in [1, {P}]")
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params, lr=config.lr)
    history = History()
    warmup = config.resolved_warmup()
    names = list(model.params)
    best = (np.inf, model.state(), 0)
    last_good = model.state()

    for epoch in range(1, config.epochs + 1):
        beta = min(1.0, epoch / warmup) if warmup > 0 else 1.0
        if config.kl == "exact":
            batches = [list(range(P))]
        else:
            order = rng.permutation(P)
            batches = [sorted(order[i:i + config.batch_size]) for i in range(0, P, config.batch_size)]
        sums = np.zeros(3)
        for batch in batches:
            try:
                terms = elbo(model, data, rng, config.kl, batch, beta)
                loss = -terms.elbo
                if not np.isfinite(loss.item()):
                    raise NonFiniteError("ELBO is not finite")
                for p in model.params.values():
                    p.grad = None
                grads = ad.backward(loss, [model.params[k] for k in names])
                flat = {k: grads[model.params[k]] for k in names}
                if not all(np.all(np.isfinite(g)) for g in flat.values()):
                    raise NonFiniteError("non-finite gradient")
            except (NonFiniteError, FactorizationFailure) as exc:
                model.load_state(last_good)
                raise NonFiniteLoss(f"epoch {epoch}: {exc}", model=model, history=history) from exc
            last_good = model.state()
            opt.step(flat)
            sums += [terms.elbo.item(), terms.recon.item(), terms.kl.item()]
        sums /= len(batches)
        val = validation_nll(model, validation) if validation is not None else float("nan")
        history.records.append(EpochRecord(epoch, float(sums[0]), float(sums[1]), float(sums[2]), val))
        log.debug("epoch %d elbo %.4f recon %.4f kl %.4f val_nll %.4f", epoch, *sums, val)
        if config.early_stopping and np.isfinite(val):
            if val < best[0]:
                best = (val, model.state(), epoch)
            elif epoch - best[2] >= config.patience:
                model.load_state(best[1])
                break
    return model, history
