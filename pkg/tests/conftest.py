import sys

import numpy as np
import pytest

from hlvae.model import HLVAE, ModelConfig
from hlvae.schema import CovariateSpec, DatasetTable, FeatureSpec, Schema
from hlvae.synthetic import GeneratorConfig, generate_synthetic_longitudinal


def make_schema(features=None, extra_covariates=()):
    feats = features or [
        FeatureSpec("g", "gaussian"),
        FeatureSpec("pos", "lognormal"),
        FeatureSpec("n", "poisson"),
        FeatureSpec("c", "categorical", 3),
        FeatureSpec("o", "ordinal", 4),
    ]
    covs = [CovariateSpec("id", "categorical", is_id=True), CovariateSpec("time", "continuous", is_time=True)]
    return Schema(tuple(feats), tuple(covs) + tuple(extra_covariates))


def toy_table(n_instances=3, visits=3, seed=0, missing=0.2):
    """Small heterogeneous table over make_schema() with random holes."""
    rng = np.random.default_rng(seed)
    schema = make_schema()
    N = n_instances * visits
    X = np.column_stack([np.repeat(np.arange(n_instances), visits),
                         np.tile(np.linspace(0, 4, visits), n_instances)]).astype(float)
    Y = np.column_stack([
        rng.normal(size=N),
        np.exp(rng.normal(size=N)),
        rng.poisson(3.0, size=N),
        rng.integers(0, 3, size=N),
        rng.integers(0, 4, size=N),
    ]).astype(float)
    mask = rng.uniform(size=Y.shape) > missing
    return DatasetTable(schema, X, Y, mask)


@pytest.fixture
def table():
    return toy_table()


@pytest.fixture
def small_model(table):
    cfg = ModelConfig(latent_dim=2, hidden=6, slot_width=3, n_inducing=4)
    return HLVAE.initialize(table, cfg, seed=0)


@pytest.fixture(scope="session")
def synthetic():
    return generate_synthetic_longitudinal(GeneratorConfig(n_instances=6, visits=5), seed=0)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
