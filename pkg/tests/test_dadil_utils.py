# tests/test_dadil_utils.py

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from pydantic import ValidationError

from conftest import make_gmm, make_labeled, random_labeled
from wgmm_tools import dadil_utils
from wgmm_tools.dadil_utils import (
    ATOM_SIGMA_FLOOR, DadilParams, Dictionary, DictionaryArrays, dadil_loss, dadil_step, evaluate,
    fit_offline, fit_online, frozen_gradients, frozen_loss, init_dictionary, project_simplex,
    reconstruct_target, source_only_baseline, target_classify, target_predict
)
from wgmm_tools.errors import DataError, NumericalError
from wgmm_tools.gmm_utils import Gmm, map_predict
from wgmm_tools.online_utils import StreamParams, init_stream


def _domains(seed=0, K=3, d=2, n_c=2, n_sources=2):
    rng = np.random.default_rng(seed)
    sources = []
    for _ in range(n_sources):
        labels = np.eye(n_c)[np.arange(K) % n_c]
        sources.append(make_labeled(rng.normal(scale=3.0, size=(K, d)), labels, rng.uniform(0.5, 1.5, size=(K, d))))
    target = make_gmm(rng.normal(scale=3.0, size=(K, d)), rng.uniform(0.5, 1.5, size=(K, d)))
    return sources, target


def _exact_dictionary(sources, target, mean_noise=0.0, seed=0):
    """Atoms equal to the domains (target atom labeled with class 0), Lambda the identity."""
    rng = np.random.default_rng(seed)
    n_c = sources[0].n_c
    target_labels = np.tile(np.eye(n_c)[0], (target.K, 1))
    domains = [(s.means, s.sigmas, s.labels) for s in sources] + [(target.means, target.sigmas, target_labels)]
    atoms = tuple(make_labeled(m + mean_noise * rng.standard_normal(m.shape), y, s) for m, s, y in domains)
    return Dictionary(atoms, np.eye(len(atoms)))


def _arrays_equal(a: Dictionary, b: Dictionary):
    for x, y in zip(a.arrays(), b.arrays()):
        assert_array_equal(x, y)


# ==============================================================================
# PARAMETERS & DICTIONARY
# ==============================================================================

def test_params_require_beta():
    with pytest.raises(ValidationError):
        DadilParams()
    params = DadilParams(beta=1.0)
    assert params.n_atoms is None
    assert params.steps_per_batch == 1
    assert params.barycenter_config(2).seed == params.seed + 2


def test_dictionary_validation():
    atom = make_labeled([[0.0]], [[1.0]])
    with pytest.raises(DataError):
        Dictionary((atom,), [[1.0]])
    with pytest.raises(DataError):
        Dictionary((atom, atom), [[0.7, 0.7], [0.5, 0.5]])
    with pytest.raises(DataError):
        Dictionary((atom, make_labeled([[0.0], [1.0]], np.ones((2, 1)))), [[0.5, 0.5], [0.5, 0.5]])


def test_dictionary_array_round_trip():
    sources, target = _domains()
    dictionary = _exact_dictionary(sources, target)
    _arrays_equal(Dictionary.from_arrays(dictionary.arrays()), dictionary)
    assert (dictionary.C, dictionary.K, dictionary.d, dictionary.n_c, dictionary.n_sources) == (3, 3, 2, 2, 2)


def test_project_simplex():
    assert_allclose(project_simplex([[0.5, 0.5]]), [[0.5, 0.5]])
    assert_allclose(project_simplex([[2.0, 0.0]]), [[1.0, 0.0]])
    assert_allclose(project_simplex([[0.0, 1.0, 0.0]]), [[0.0, 1.0, 0.0]])
    assert_allclose(project_simplex([[1.0, 1.0]]), [[0.5, 0.5]])


def test_project_simplex_rows(rng):
    V = rng.normal(scale=2.0, size=(50, 4))
    P = project_simplex(V)
    assert_allclose(P.sum(axis=1), 1.0)
    assert np.all(P >= 0)


def test_init_dictionary_shapes_and_determinism():
    sources, target = _domains()
    a = init_dictionary(sources, target, C=3, K=4, seed=2)
    b = init_dictionary(sources, target, C=3, K=4, seed=2)
    _arrays_equal(a, b)
    assert (a.C, a.K) == (3, 4)
    assert_allclose(a.Lambda, np.full((3, 3), 1.0 / 3))
    for atom in a.atoms:
        assert_allclose(atom.weights, 0.25)
        assert set(np.argmax(atom.labels, axis=1)) == {0, 1}
        assert np.all(atom.sigmas >= ATOM_SIGMA_FLOOR)


def test_init_dictionary_cycles_over_sources():
    sources, target = _domains(n_sources=2)
    dictionary = init_dictionary(sources, target, C=3, K=3, seed=4)
    for c, atom in enumerate(dictionary.atoms):
        owner = sources[c % 2]
        nearest = [int(np.argmin(np.abs(owner.means - m).max(axis=1))) for m in atom.means]
        assert np.abs(owner.means[nearest] - atom.means).max() < 0.5
        assert_array_equal(owner.labels[nearest], atom.labels)
        assert len(set(nearest)) == 3


def test_init_dictionary_single_atom():
    sources, target = _domains()
    dictionary = init_dictionary(sources, target, C=1, K=2)
    assert_allclose(dictionary.Lambda, np.ones((3, 1)))


def test_init_dictionary_errors():
    sources, target = _domains()
    with pytest.raises(DataError):
        init_dictionary([], target, 2, 2)
    with pytest.raises(DataError):
        init_dictionary(sources, make_gmm([[0.0, 0.0, 0.0]]), 2, 2)


# ==============================================================================
# LOSS & GRADIENTS
# ==============================================================================

def test_exact_recovery_has_zero_loss_and_fixed_step():
    sources, target = _domains()
    dictionary = _exact_dictionary(sources, target)
    params = DadilParams(beta=1.0, n_components=3)
    assert dadil_loss(dictionary, sources, target, 1.0, params) < 1e-8

    stepped, loss = dadil_step(dictionary, sources, target, 1.0, params.lr_atoms, params.lr_lambda, params)
    assert loss < 1e-8
    for x, y in zip(stepped.arrays(), dictionary.arrays()):
        assert_allclose(x, y, atol=1e-8)


def test_single_gaussian_loss_and_step():
    source = make_labeled([[1.0]], [[1.0]], [[1.0]])
    target = source.base
    atom = make_labeled([[3.0]], [[1.0]], [[2.0]])
    dictionary = Dictionary((atom,), [[1.0], [1.0]])
    params = DadilParams(beta=1.0, n_components=1)

    assert dadil_loss(dictionary, [source], target, 1.0, params) == pytest.approx(2 * (4.0 + 1.0))
    stepped, loss = dadil_step(dictionary, [source], target, 1.0, 0.1, 0.01, params)
    assert_allclose(stepped.atoms[0].means, [[3.0 - 0.4 * 2.0]])
    assert_allclose(stepped.atoms[0].sigmas, [[2.0 - 0.4 * 1.0]])
    assert loss == pytest.approx(2 * (1.2 ** 2 + 0.6 ** 2))


def test_frozen_loss_matches_loss():
    sources, target = _domains(seed=4)
    dictionary = init_dictionary(sources, target, C=3, K=2, seed=1)
    params = DadilParams(beta=2.0, n_components=3)
    evaluation = evaluate(dictionary, sources, target, 2.0, params)
    assert frozen_loss(dictionary.arrays(), evaluation.frozen) == pytest.approx(evaluation.loss, rel=1e-9)
    assert len(evaluation.terms) == 3
    assert len(evaluation.reconstructions) == 3


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    sources = [random_labeled(rng, 3, 2, 2, one_hot=False) for _ in range(2)]
    target = random_labeled(rng, 3, 2, 2).base
    base = init_dictionary(sources, target, C=3, K=2, seed=seed)
    dictionary = Dictionary(base.atoms, rng.dirichlet(np.ones(3), size=3))
    params = DadilParams(beta=1.5, n_components=3, seed=seed)
    frozen = evaluate(dictionary, sources, target, 1.5, params).frozen

    arrays = dictionary.arrays()
    grads = frozen_gradients(arrays, frozen)
    h = 1e-5
    analytic, numeric = [], []
    for name in ("means", "sigmas", "labels", "Lambda"):
        values = getattr(arrays, name)
        fd = np.zeros_like(values)
        for idx in np.ndindex(values.shape):
            plus, minus = values.copy(), values.copy()
            plus[idx] += h
            minus[idx] -= h
            fd[idx] = (frozen_loss(arrays._replace(**{name: plus}), frozen)
                       - frozen_loss(arrays._replace(**{name: minus}), frozen)) / (2 * h)
        analytic.append(getattr(grads, name).ravel())
        numeric.append(fd.ravel())
    analytic, numeric = np.concatenate(analytic), np.concatenate(numeric)
    assert np.linalg.norm(analytic - numeric) <= 1e-4 * max(np.linalg.norm(analytic), 1e-8)


def test_step_rejects_non_finite_gradient(monkeypatch):
    sources, target = _domains()
    dictionary = init_dictionary(sources, target, C=2, K=2)
    params = DadilParams(beta=1.0, n_components=2)

    def _nan_gradients(arrays, frozen):
        return DictionaryArrays(*(np.full_like(a, np.nan) for a in arrays))

    monkeypatch.setattr(dadil_utils, "frozen_gradients", _nan_gradients)
    with pytest.raises(NumericalError):
        dadil_step(dictionary, sources, target, 1.0, 0.1, 0.01, params)


def test_step_rejects_bad_learning_rate():
    sources, target = _domains()
    dictionary = init_dictionary(sources, target, C=2, K=2)
    with pytest.raises(DataError):
        dadil_step(dictionary, sources, target, 1.0, 0.0, 0.01, DadilParams(beta=1.0))


def test_step_source_count_mismatch():
    sources, target = _domains()
    dictionary = init_dictionary(sources, target, C=2, K=2)
    with pytest.raises(DataError):
        dadil_loss(dictionary, sources[:1], target, 1.0, DadilParams(beta=1.0, n_components=2))


# ==============================================================================
# FITTING
# ==============================================================================

def test_fit_offline_zero_iterations():
    sources, target = _domains()
    params = DadilParams(beta=1.0, n_components=2, n_iters=0, seed=3)
    history = []
    dictionary = fit_offline(sources, target, params, history=history)
    _arrays_equal(dictionary, init_dictionary(sources, target, C=3, K=2, seed=3))
    assert len(history) == 1


def test_fit_offline_history_is_non_increasing():
    sources, target = _domains(seed=2)
    params = DadilParams(beta=1.0, n_components=2, n_iters=5)
    history = []
    dictionary = fit_offline(sources, target, params, history=history)
    assert len(history) == 6
    assert np.all(np.diff(history) <= 0.0)
    assert_allclose(dictionary.Lambda.sum(axis=1), 1.0)
    assert np.all(dictionary.Lambda >= 0)
    for atom in dictionary.atoms:
        assert np.all(atom.sigmas >= ATOM_SIGMA_FLOOR)
        assert_allclose(atom.labels.sum(axis=1), 1.0)


def test_fit_offline_recovers_perturbed_domains():
    sources, target = _domains(seed=5)
    start = _exact_dictionary(sources, target, mean_noise=0.3, seed=1)
    params = DadilParams(beta=1.0, n_components=3, n_iters=10, lr_atoms=1.0, lr_lambda=1e-3)
    history = []
    fit_offline(sources, target, params, history=history, dictionary=start)
    assert history[-1] < 0.1 * history[0]


def test_fit_online_single_batch_matches_offline(rng):
    sources, target = _domains(seed=6)
    X = rng.normal(size=(40, 2))
    stream = StreamParams(K_min=2, K_max=4, delta_K=2, batch_size=40, seed=1)
    params = DadilParams(beta=1.0, n_components=2, steps_per_batch=2, post_stream_iters=2)

    online, online_target, metrics = fit_online(sources, [X], stream, params)
    offline_target = init_stream(X, 2, 4, 2, seed=1).model
    offline = fit_offline(sources, offline_target, params.model_copy(update={"n_iters": 4}))
    _arrays_equal(online, offline)
    assert_array_equal(online_target.means, offline_target.means)
    assert len(metrics) == 3


def test_fit_online_metrics(rng):
    sources, target = _domains(seed=7)
    batches = [rng.normal(size=(20, 2)) for _ in range(3)]
    X_eval = rng.normal(size=(30, 2))
    y_eval = rng.integers(2, size=30)
    stream = StreamParams(K_min=2, K_max=4, delta_K=2, batch_size=20)
    params = DadilParams(beta=1.0, n_components=2)

    _, target_gmm, metrics = fit_online(sources, batches, stream, params, post_stream_iters=2,
                                        eval_data=(X_eval, y_eval))
    assert [r["step"] for r in metrics] == [1, 2, 3, 4, 5]
    assert [r["phase"] for r in metrics] == ["stream"] * 3 + ["post"] * 2
    assert [r.get("stream_end", False) for r in metrics] == [False, False, True, False, False]
    assert all(0.0 <= r["accuracy"] <= 1.0 for r in metrics)
    assert all(r["recon_mw2_sq"] >= 0 and r["wall_ms"] >= 0 for r in metrics)
    assert target_gmm.K <= 4


def test_fit_online_empty_stream():
    sources, _ = _domains()
    with pytest.raises(DataError):
        fit_online(sources, [], StreamParams(), DadilParams(beta=1.0))


# ==============================================================================
# CLASSIFICATION & BASELINES
# ==============================================================================

def test_target_classify_single_atom():
    atom = make_labeled([[0.0, 0.0]], [[0.0, 0.0, 1.0]])
    dictionary = Dictionary((atom,), [[1.0], [1.0]])
    params = DadilParams(beta=1.0, n_components=1)
    for x in ([0.0, 0.0], [100.0, -50.0], [-3.0, 7.0]):
        assert target_classify(dictionary, x, params) == 2


def test_target_classify_two_classes():
    atom = make_labeled([[-5.0], [5.0]], np.eye(2))
    dictionary = Dictionary((atom,), [[1.0], [1.0]])
    params = DadilParams(beta=10.0, n_components=2)
    assert target_classify(dictionary, [-5.0], params) == 0
    assert target_classify(dictionary, [5.0], params) == 1
    assert_array_equal(target_predict(dictionary, np.array([[-4.0], [6.0]]), params), [0, 1])


def test_target_classify_atom_order_invariant():
    a = make_labeled([[0.0]], [[1.0, 0.0]])
    b = make_labeled([[1.0]], [[0.0, 1.0]])
    params = DadilParams(beta=1.0, n_components=1)
    forward = Dictionary((a, b), [[0.5, 0.5], [0.3, 0.7]])
    backward = Dictionary((b, a), [[0.5, 0.5], [0.7, 0.3]])
    for x in ([-2.0], [0.5], [3.0]):
        assert target_classify(forward, x, params) == target_classify(backward, x, params) == 1
    assert_allclose(reconstruct_target(forward, params).labels, [[0.3, 0.7]])


def test_source_only_baseline():
    source = make_labeled([[-5.0], [5.0]], np.eye(2))
    model = source_only_baseline([source, source], n_replay=200, k_per_class=1, seed=0)
    assert model.n_c == 2
    assert_array_equal(map_predict(model, np.array([[-5.0], [5.0]])), [0, 1])
    assert isinstance(model.base, Gmm)
