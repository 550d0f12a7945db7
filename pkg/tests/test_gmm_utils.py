# tests/test_gmm_utils.py

import logging
import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.stats import norm

from conftest import make_gmm, make_labeled
from wgmm_tools.errors import DataError
from wgmm_tools.gmm_utils import (
    Gmm, LabeledGmm, bic, em_fit, fit_labeled, get_best_gmm, log_likelihood, map_classify,
    map_predict, n_parameters, predict_proba, responsibilities, sample, score_samples
)


def _three_blobs(n_per_blob=100, seed=7):
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    X = np.vstack([c + rng.standard_normal((n_per_blob, 2)) for c in centers])
    y = np.repeat(np.arange(3), n_per_blob)
    return X, y


# ==============================================================================
# TYPES & DENSITIES
# ==============================================================================

def test_gmm_validation():
    with pytest.raises(DataError):
        Gmm([0.6, 0.6], np.zeros((2, 1)), np.ones((2, 1)))
    with pytest.raises(DataError):
        Gmm([1.0], np.zeros((1, 2)), np.ones((1, 3)))
    with pytest.raises(DataError):
        Gmm([1.0], np.zeros((1, 1)), np.zeros((1, 1)))
    with pytest.raises(DataError):
        LabeledGmm(make_gmm([[0.0]]), [[0.5, 0.6]])


def test_gmm_is_read_only():
    gmm = make_gmm([[0.0], [1.0]])
    with pytest.raises(ValueError):
        gmm.means[0, 0] = 5.0


def test_loglik_standard_normal_at_zero():
    gmm = make_gmm([[0.0]])
    assert log_likelihood(gmm, np.array([[0.0]])) == pytest.approx(-0.9189385332, abs=1e-9)


def test_loglik_matches_scipy(rng):
    X = rng.normal(size=(50, 1))
    gmm = make_gmm([[-1.0], [2.0]], [[0.5], [1.5]], [0.3, 0.7])
    expected = np.log(0.3 * norm.pdf(X[:, 0], -1.0, 0.5) + 0.7 * norm.pdf(X[:, 0], 2.0, 1.5))
    assert_allclose(score_samples(gmm, X), expected, rtol=1e-10)


def test_loglik_duplicated_component_unchanged(rng):
    X = rng.normal(size=(20, 2))
    single = make_gmm([[0.5, -0.5]], [[1.2, 0.8]])
    doubled = make_gmm([[0.5, -0.5], [0.5, -0.5]], [[1.2, 0.8], [1.2, 0.8]])
    assert log_likelihood(doubled, X) == pytest.approx(log_likelihood(single, X), abs=1e-12)


def test_loglik_translation_invariant(rng):
    X = rng.normal(size=(30, 2))
    shift = np.array([3.0, -7.0])
    gmm = make_gmm([[0.0, 0.0], [1.0, 1.0]])
    moved = make_gmm([[0.0, 0.0] + shift, [1.0, 1.0] + shift])
    assert log_likelihood(moved, X + shift) == pytest.approx(log_likelihood(gmm, X), abs=1e-10)


def test_loglik_dimension_mismatch():
    with pytest.raises(DataError):
        log_likelihood(make_gmm([[0.0, 0.0]]), np.zeros((3, 3)))


def test_responsibilities_sum_to_one(rng):
    gmm = make_gmm(rng.normal(size=(4, 3)))
    R = responsibilities(gmm, rng.normal(scale=50.0, size=(25, 3)))
    assert_allclose(R.sum(axis=1), 1.0)
    assert np.all(np.isfinite(R))


# ==============================================================================
# EM
# ==============================================================================

def test_em_single_component_moments(rng):
    X = rng.normal(loc=[1.0, -2.0], scale=[0.5, 3.0], size=(200, 2))
    gmm = em_fit(X, 1)
    assert_allclose(gmm.weights, [1.0])
    assert_allclose(gmm.means[0], X.mean(axis=0))
    assert_allclose(gmm.sigmas[0], X.std(axis=0))


def test_em_recovers_two_blobs(rng):
    X = np.vstack([rng.normal(-5.0, 1.0, size=(300, 2)), rng.normal(5.0, 1.0, size=(300, 2))])
    gmm = em_fit(X, 2, seed=0)
    order = np.argsort(gmm.means[:, 0])
    assert_allclose(gmm.means[order], [[-5.0, -5.0], [5.0, 5.0]], atol=0.3)
    assert_allclose(gmm.weights[order], [0.5, 0.5], atol=0.05)
    assert_allclose(gmm.sigmas, 1.0, atol=0.2)


def test_em_recovers_distant_1d_blobs(rng):
    X = np.concatenate([rng.normal(0.0, 1.0, 100), rng.normal(100.0, 1.0, 100)])[:, None]
    gmm = em_fit(X, 2, seed=0)
    order = np.argsort(gmm.means[:, 0])
    assert_allclose(gmm.means[order, 0], [0.0, 100.0], atol=0.5)
    assert_allclose(gmm.weights, [0.5, 0.5], atol=0.05)


def test_em_history_is_monotone():
    X, _ = _three_blobs()
    history = []
    em_fit(X, 3, seed=1, history=history)
    assert len(history) >= 2
    assert np.all(np.diff(history) >= -1e-9)


def test_em_history_only_drops_on_reseed(monkeypatch, caplog):
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal(0.0, 1.0, 50), rng.normal(10.0, 1.0, 50)])[:, None]

    def _far_seeds(X, n_clusters, random_state=None, n_local_trials=None):
        return np.array([[0.0], [10.0], [1000.0]]), np.zeros(n_clusters, dtype=int)

    monkeypatch.setattr("wgmm_tools.gmm_utils.kmeans_plusplus", _far_seeds)
    caplog.set_level(logging.WARNING, logger="wgmm_tools.gmm_utils")
    history = []
    gmm = em_fit(X, 3, history=history)

    reseeds = sum("re-seeded" in r.getMessage() for r in caplog.records)
    assert reseeds >= 1
    assert np.sum(np.diff(history) < -1e-9) <= reseeds
    assert np.all(np.isfinite(gmm.means)) and np.all(gmm.sigmas > 0)
    assert_allclose(gmm.weights.sum(), 1.0)


def test_em_is_deterministic():
    X, _ = _three_blobs()
    a, b = em_fit(X, 4, seed=3), em_fit(X, 4, seed=3)
    assert_array_equal(a.means, b.means)
    assert_array_equal(a.sigmas, b.sigmas)
    assert_array_equal(a.weights, b.weights)


def test_em_identical_points():
    gmm = em_fit(np.ones((10, 1)), 2)
    assert gmm.K == 2
    assert np.all(gmm.sigmas > 0)
    assert_allclose(gmm.means, 1.0)


def test_em_too_few_samples():
    with pytest.raises(DataError):
        em_fit(np.zeros((2, 1)), 3)


# ==============================================================================
# MODEL SELECTION
# ==============================================================================

def test_n_parameters():
    assert n_parameters(3, 2) == 14
    assert n_parameters(1, 1) == 2


def test_bic_single_gaussian(rng):
    X = rng.normal(size=(100, 1))
    gmm = make_gmm([[0.0]])
    expected = 2 * np.log(100) - 2 * norm.logpdf(X[:, 0]).sum()
    assert bic(gmm, X) == pytest.approx(expected, rel=1e-10)


def test_bic_penalty_grows_with_log_n(rng):
    X = rng.normal(size=(60, 2))
    gmm = make_gmm([[0.0, 0.0], [1.0, 1.0]])
    P = n_parameters(gmm.K, gmm.d)
    doubled = np.vstack([X, X])
    penalty = bic(gmm, X) + 2 * X.shape[0] * log_likelihood(gmm, X)
    penalty_doubled = bic(gmm, doubled) + 2 * doubled.shape[0] * log_likelihood(gmm, doubled)
    assert penalty_doubled - penalty == pytest.approx(P * np.log(2.0))


def test_best_gmm_single_k_matches_em():
    X, _ = _three_blobs()
    best = get_best_gmm(X, 2, 2, seed=5)
    direct = em_fit(X, 2, seed=5)
    assert_array_equal(best.means, direct.means)


def test_best_gmm_clamps_to_sample_count():
    gmm = get_best_gmm(np.array([[0.0], [1.0]]), 1, 5)
    assert gmm.K <= 2


def test_best_gmm_invalid_range():
    with pytest.raises(DataError):
        get_best_gmm(np.zeros((10, 1)), 3, 2)


@pytest.mark.parametrize("seed", range(20))
def test_best_gmm_finds_three_blobs(seed):
    X, _ = _three_blobs()
    assert get_best_gmm(X, 1, 5, seed=seed).K == 3


@pytest.mark.slow
def test_best_gmm_selection_rate():
    hits = 0
    for seed in range(100):
        X, _ = _three_blobs(n_per_blob=167, seed=1000 + seed)
        hits += get_best_gmm(X, 1, 6, seed=seed).K == 3
    assert hits >= 95


# ==============================================================================
# LABELED MIXTURES
# ==============================================================================

def test_fit_labeled_class_frequencies(rng):
    X = np.vstack([rng.normal(c * 10.0, 1.0, size=(n, 2)) for c, n in enumerate([25, 50, 25])])
    y = np.repeat(np.arange(3), [25, 50, 25])
    model = fit_labeled(X, y, k_per_class=1)
    assert model.K == 3
    assert_allclose(model.weights, [0.25, 0.5, 0.25])
    assert_array_equal(model.labels, np.eye(3))


def test_fit_labeled_single_class(rng):
    model = fit_labeled(rng.normal(size=(40, 2)), np.zeros(40), k_per_class=2)
    assert model.n_c == 1
    assert_allclose(model.labels, 1.0)


def test_fit_labeled_empty_class(rng):
    y = np.array([0] * 10 + [2] * 10)
    with pytest.raises(DataError, match="Class 1"):
        fit_labeled(rng.normal(size=(20, 2)), y, k_per_class=1)


def test_fit_labeled_length_mismatch(rng):
    with pytest.raises(DataError):
        fit_labeled(rng.normal(size=(20, 2)), np.zeros(19), k_per_class=1)


def test_map_classify_examples():
    model = make_labeled([[-1.0], [1.0]], np.eye(2))
    assert map_classify(model, [-3.0]) == 0
    assert map_classify(model, [3.0]) == 1


def test_map_classify_tie_goes_to_smallest_class():
    model = make_labeled([[-1.0], [1.0]], np.eye(2))
    assert map_classify(model, [0.0]) == 0


def test_map_predict_permutation_invariant(rng):
    means = rng.normal(scale=3.0, size=(4, 2))
    labels = np.eye(3)[[0, 1, 2, 1]]
    weights = rng.dirichlet(np.ones(4))
    perm = np.array([2, 0, 3, 1])
    a = make_labeled(means, labels, weights=weights)
    b = make_labeled(means[perm], labels[perm], weights=weights[perm])
    X = rng.normal(scale=3.0, size=(100, 2))
    assert_array_equal(map_predict(a, X), map_predict(b, X))
    assert_allclose(predict_proba(a, X), predict_proba(b, X))


def test_classes_follow_blobs():
    X, y = _three_blobs()
    model = fit_labeled(X, y, k_per_class=2)
    assert np.mean(map_predict(model, X) == y) > 0.99


# ==============================================================================
# SAMPLING
# ==============================================================================

def test_sample_deterministic():
    model = make_labeled([[-1.0], [1.0]], np.eye(2))
    X1, y1 = sample(model, 100, seed=4)
    X2, y2 = sample(model, 100, seed=4)
    assert_array_equal(X1, X2)
    assert_array_equal(y1, y2)


def test_sample_unlabeled_has_no_labels():
    X, y = sample(make_gmm([[0.0]]), 10)
    assert X.shape == (10, 1)
    assert y is None


def test_sample_skips_zero_weight_component():
    model = make_labeled([[0.0], [1000.0]], np.eye(2), weights=[1.0, 0.0])
    X, y = sample(model, 500, seed=2)
    assert np.all(np.abs(X) < 100.0)
    assert np.all(y == 0)


def test_sample_moments():
    X, _ = sample(make_gmm([[3.0]], [[2.0]]), 20000, seed=0)
    assert X.mean() == pytest.approx(3.0, abs=0.06)
    assert X.std() == pytest.approx(2.0, abs=0.06)


def test_sample_invalid_size():
    with pytest.raises(DataError):
        sample(make_gmm([[0.0]]), 0)
