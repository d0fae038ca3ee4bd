"""Additive covariance functions over auxiliary covariates.

A kernel structure string such as ``se(time) + ca(id)*se(time)`` declares
the additive components shared by every latent dimension; each dimension
owns its own magnitudes and lengthscales. Grammar::

    kernel := term ('+' term)*
    term   := factor ('*' factor)*
    factor := ('se' | 'ca') '(' name ')'
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import KernelSyntaxError, NotSorted, UnknownCovariate
from .schema import Schema

NOISE_FLOOR = 1e-4
# inducing variables are f(S) plus a little noise, relative to the low-rank prior variance;
# keeps K_SS usable when inducing points crowd together
INDUCING_NOISE = 1e-4


@dataclass(frozen=True)
class Factor:
    kind: str    # "se" or "ca"
    name: str
    column: int

    def __str__(self):
        return f"{self.kind}({self.name})"


@dataclass(frozen=True)
class KernelComponent:
    """One additive term: a product of SE and categorical factors.

    All-SE products are a squared-exponential kernel over several continuous
    covariates, all-categorical products a categorical kernel over the joint
    level, mixed products an interaction. Only the term as a whole carries a
    magnitude.
    """

    factors: tuple[Factor, ...]
    individual: bool = False

    @property
    def kind(self) -> str:
        kinds = {f.kind for f in self.factors}
        if kinds == {"se"}:
            return "squared-exponential"
        if kinds == {"ca"}:
            return "categorical"
        return "interaction"

    @property
    def se_factors(self) -> list[Factor]:
        return [f for f in self.factors if f.kind == "se"]

    @property
    def ca_factors(self) -> list[Factor]:
        return [f for f in self.factors if f.kind == "ca"]

    @property
    def columns(self) -> list[int]:
        return [f.column for f in self.factors]

    def __str__(self):
        return "*".join(str(f) for f in self.factors)


_TOKEN = re.compile(r"\s*(?:(?P<name>[A-Za-z_][A-Za-z0-9_.\-]*)|(?P<sym>[()+*])|(?P<bad>\S))")


def _tokenize(text: str) -> list[tuple[str, int]]:
    tokens, pos = [], 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            break
        if m.group("bad"):
            raise KernelSyntaxError(f"unexpected character {m.group('bad')!r} at position {m.start('bad')}")
        tok = m.group("name") or m.group("sym")
        tokens.append((tok, m.start(m.lastgroup)))
        pos = m.end()
    return tokens


def parse_kernel(text: str, schema: Schema) -> tuple[KernelComponent, ...]:
    """Parse a kernel structure string and bind covariate names to columns.

    The first interaction that contains the instance-id covariate is flagged
    as the individual-specific component.
    """
    tokens = _tokenize(text)
    pos = 0

    def peek():
        return tokens[pos][0] if pos < len(tokens) else None

    def fail(expected):
        if pos < len(tokens):
            tok, at = tokens[pos]
            raise KernelSyntaxError(f"expected {expected} but found {tok!r} at position {at} in {text!r}")
        raise KernelSyntaxError(f"expected {expected} but the kernel string {text!r} ended")

    def expect(tok):
        nonlocal pos
        if peek() != tok:
            fail(repr(tok))
        pos += 1

    def factor():
        nonlocal pos
        kind = peek()
        if kind not in ("se", "ca"):
            fail("'se' or 'ca'")
        pos += 1
        expect("(")
        name = peek()
        if name is None or name in "()+*":
            fail("a covariate name")
        pos += 1
        expect(")")
        if name not in schema.covariate_names:
            raise UnknownCovariate(f"kernel refers to unknown covariate {name!r}")
        col = schema.covariate_index(name)
        cov = schema.covariates[col]
        if kind == "se" and cov.kind != "continuous":
            raise KernelSyntaxError(f"se({name}) needs a continuous covariate, {name!r} is {cov.kind}")
        return Factor(kind, name, col)

    def term():
        nonlocal pos
        fs = [factor()]
        while peek() == "*":
            pos += 1
            fs.append(factor())
        names = [f.name for f in fs]
        if len(set(names)) != len(names):
            raise KernelSyntaxError(f"term {'*'.join(map(str, fs))} repeats a covariate")
        return fs

    terms = [term()]
    while peek() == "+":
        pos += 1
        terms.append(term())
    if pos != len(tokens):
        fail("'+', '*' or the end of the kernel")

    id_col = schema.id_column
    comps, flagged = [], False
    for fs in terms:
        is_ind = (
            not flagged and id_col is not None and len(fs) > 1
            and any(f.kind == "ca" and f.column == id_col for f in fs)
        )
        flagged |= is_ind
        comps.append(KernelComponent(tuple(fs), individual=is_ind))
    return tuple(comps)


# -- evaluation ------------------------------------------------------------------

class InducingPointSet:
    """M pseudo-inputs in covariate space.

    Continuous coordinates used by the low-rank components are trainable
    (``trainable`` holds them, one column per entry of ``cont_cols``);
    categorical coordinates stay fixed in ``fixed``.
    """

    def __init__(self, fixed: np.ndarray, cont_cols: list[int], trainable: Tensor | None = None):
        self.fixed = np.asarray(fixed, dtype=np.float64)
        if self.fixed.ndim != 2 or self.fixed.shape[0] < 1:
            raise ValueError("need at least one inducing point")
        self.cont_cols = list(cont_cols)
        if trainable is None:
            trainable = Tensor(self.fixed[:, self.cont_cols], requires_grad=True)
        self.trainable = trainable

    @property
    def M(self) -> int:
        return self.fixed.shape[0]

    def values(self) -> np.ndarray:
        out = self.fixed.copy()
        out[:, self.cont_cols] = self.trainable.data
        return out


def _continuous(source, col: int) -> Tensor:
    if isinstance(source, InducingPointSet):
        if col in source.cont_cols:
            return source.trainable[:, source.cont_cols.index(col)]
        return Tensor(source.fixed[:, col])
    return Tensor(np.asarray(source)[:, col])


def _categorical(source, col: int) -> np.ndarray:
    if isinstance(source, InducingPointSet):
        return source.fixed[:, col]
    return np.asarray(source)[:, col]


def _n_rows(source) -> int:
    return source.M if isinstance(source, InducingPointSet) else np.asarray(source).shape[0]


def kernel_matrix(component: KernelComponent, rows, cols, log_magnitude, log_lengthscales=None) -> Tensor:
    """Covariance between two row sets under one additive component.

    SE factors contribute ``exp(-(x - x')^2 / (2 l^2))``, categorical factors
    the indicator ``[x == x']``; the product is scaled by ``exp(log_magnitude)``.
    ``log_lengthscales`` holds one entry per SE factor in order.
    """
    for src in (rows, cols):
        if not isinstance(src, InducingPointSet):
            width = np.asarray(src).shape[1]
            if max(component.columns) >= width:
                raise UnknownCovariate(f"row set has {width} covariate columns; {component} needs more")
    n, m = _n_rows(rows), _n_rows(cols)
    indicator = np.ones((n, m))
    for f in component.ca_factors:
        indicator = indicator * (_categorical(rows, f.column)[:, None] == _categorical(cols, f.column)[None, :])
    magnitude = ad.exp(ad.as_tensor(log_magnitude))
    se = component.se_factors
    if not se:
        return magnitude * indicator
    expo = None
    for k, f in enumerate(se):
        a = _continuous(rows, f.column).reshape(n, 1)
        b = _continuous(cols, f.column).reshape(1, m)
        inv_ls2 = ad.exp(-2.0 * log_lengthscales[k])
        term = ad.square(a - b) * inv_ls2
        expo = term if expo is None else expo + term
    return magnitude * (ad.exp(-0.5 * expo) * indicator)


class AdditiveGP:
    """Additive multi-output GP prior: one set of hyperparameters per latent dimension.

    Parameters live in a flat dict (shared with the rest of the model):
    ``gp.{r}.log_mag`` (L,), ``gp.{r}.log_ls`` (L, n_se) and ``gp.noise_raw``
    (L,), with latent noise ``1e-4 + exp(noise_raw)``.
    """

    def __init__(self, components, latent_dim: int):
        self.components = tuple(components)
        self.latent_dim = latent_dim
        flagged = [r for r, c in enumerate(self.components) if c.individual]
        if len(flagged) > 1:
            raise ValueError("at most one component can be individual-specific")
        self.individual = flagged[0] if flagged else None

    @property
    def low_rank(self) -> list[int]:
        return [r for r in range(len(self.components)) if r != self.individual]

    def low_rank_columns(self) -> list[int]:
        cols = sorted({c for r in self.low_rank for c in self.components[r].columns})
        return cols

    def init_params(self, X: np.ndarray, noise: float = 0.1) -> dict[str, np.ndarray]:
        """Lengthscale = half the covariate span, magnitudes = 1 / #components."""
        L, R = self.latent_dim, len(self.components)
        params = {}
        for r, comp in enumerate(self.components):
            params[f"gp.{r}.log_mag"] = np.full(L, np.log(1.0 / R))
            ls = []
            for f in comp.se_factors:
                span = float(np.ptp(X[:, f.column])) if len(X) else 0.0
                ls.append(np.log(span / 2.0) if span > 0 else 0.0)
            params[f"gp.{r}.log_ls"] = np.tile(np.array(ls, dtype=float), (L, 1))
        params["gp.noise_raw"] = np.full(L, np.log(max(noise - NOISE_FLOOR, 1e-12)))
        return params

    def noise(self, params, l: int) -> Tensor:
        return ad.exp(params["gp.noise_raw"][l]) + NOISE_FLOOR

    def component_matrix(self, params, r: int, l: int, rows, cols) -> Tensor:
        comp = self.components[r]
        log_ls = params[f"gp.{r}.log_ls"][l] if comp.se_factors else None
        return kernel_matrix(comp, rows, cols, params[f"gp.{r}.log_mag"][l], log_ls)

    def covariance(self, params, l: int, rows, cols, which: str = "all") -> Tensor:
        """Sum of component matrices; ``which`` is 'all', 'low_rank' or 'individual'."""
        if which == "all":
            rs = range(len(self.components))
        elif which == "low_rank":
            rs = self.low_rank
        elif which == "individual":
            rs = [] if self.individual is None else [self.individual]
        else:
            raise ValueError(which)
        total = None
        for r in rs:
            K = self.component_matrix(params, r, l, rows, cols)
            total = K if total is None else total + K
        if total is None:
            return Tensor(np.zeros((_n_rows(rows), _n_rows(cols))))
        return total

    def inducing_covariance(self, params, l: int, S) -> Tensor:
        """Covariance of the inducing variables: K^A_SS plus relative noise.

        The same matrix is used for p(u) and for projecting onto u, so the
        augmented model still has K^A as its marginal covariance.
        """
        K = self.covariance(params, l, S, S, which="low_rank")
        scale = 1.0     # no low-rank component: u carries no signal, any scale will do
        for k, r in enumerate(self.low_rank):
            mag = ad.exp(params[f"gp.{r}.log_mag"][l])
            scale = mag if k == 0 else scale + mag
        return K + (INDUCING_NOISE * scale) * np.eye(K.shape[0])

    def prior_covariance(self, params, X: np.ndarray, l: int) -> Tensor:
        """Sigma_l = sum_r K^(r,l) + sigma_zl^2 I."""
        eye = np.eye(len(X))
        return self.covariance(params, l, X, X) + self.noise(params, l) * eye

    def split_covariance(self, params, X: np.ndarray, l: int, instance_index: np.ndarray):
        """(K^A, Sigma_hat) with K^A + Sigma_hat equal to the prior covariance.

        Sigma_hat holds the individual-specific component plus the latent
        noise; it is block diagonal over instances, which must occupy
        contiguous rows.
        """
        instance_index = np.asarray(instance_index)
        changes = np.count_nonzero(np.diff(instance_index))
        if changes != len(np.unique(instance_index)) - 1:
            raise NotSorted("rows of each instance must be contiguous")
        KA = self.covariance(params, l, X, X, which="low_rank")
        eye = np.eye(len(X))
        Sigma_hat = self.covariance(params, l, X, X, which="individual") + self.noise(params, l) * eye
        return KA, Sigma_hat


def init_inducing(X: np.ndarray, gp: AdditiveGP, M: int, rng: np.random.Generator) -> InducingPointSet:
    """k-means style subsample of training rows restricted to low-rank covariates.

    Categorical coordinates are copied from the chosen rows and stay fixed;
    continuous coordinates are refined by a few Lloyd iterations within each
    categorical configuration.
    """
    cols = gp.low_rank_columns()
    cont = sorted({f.column for r in gp.low_rank for f in gp.components[r].se_factors})
    cat = [c for c in cols if c not in cont]
    Xr = np.zeros_like(X)
    Xr[:, cols] = X[:, cols]
    uniq = np.unique(Xr, axis=0)
    if len(uniq) <= M:
        chosen = uniq
    else:
        pick = rng.choice(len(uniq), size=M, replace=False)
        chosen = uniq[np.sort(pick)].copy()
        if cont:
            scale = np.ptp(X[:, cont], axis=0)
            scale[scale == 0] = 1.0
            for _ in range(10):
                d = ((Xr[:, None, cont] - chosen[None, :, cont]) / scale) ** 2
                same = np.all(Xr[:, None, cat] == chosen[None, :, cat], axis=2) if cat else True
                d = np.where(same, d.sum(axis=2), np.inf)
                assign = np.argmin(d, axis=1)
                for k in range(len(chosen)):
                    members = assign == k
                    if members.any():
                        chosen[k, cont] = Xr[members][:, cont].mean(axis=0)
    return InducingPointSet(chosen, cont)
