# tests/conftest.py

import numpy as np
import pytest

from wgmm_tools.gmm_utils import Gmm, LabeledGmm


def make_gmm(means, sigmas=None, weights=None) -> Gmm:
    means = np.atleast_2d(np.asarray(means, dtype=float))
    K = means.shape[0]
    sigmas = np.ones_like(means) if sigmas is None else np.atleast_2d(np.asarray(sigmas, dtype=float))
    weights = np.full(K, 1.0 / K) if weights is None else np.asarray(weights, dtype=float)
    return Gmm(weights, means, sigmas)


def make_labeled(means, labels, sigmas=None, weights=None) -> LabeledGmm:
    return LabeledGmm(make_gmm(means, sigmas, weights), np.asarray(labels, dtype=float))


def random_labeled(rng, K: int, d: int, n_c: int, one_hot: bool = True) -> LabeledGmm:
    means = rng.normal(scale=3.0, size=(K, d))
    sigmas = rng.uniform(0.5, 2.0, size=(K, d))
    weights = rng.dirichlet(np.ones(K))
    if one_hot:
        labels = np.eye(n_c)[rng.integers(n_c, size=K)]
    else:
        labels = rng.dirichlet(np.ones(n_c), size=K)
    return LabeledGmm(Gmm(weights, means, sigmas), labels)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
