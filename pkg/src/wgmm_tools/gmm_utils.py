# src/wgmm_tools/gmm_utils.py

import logging
import numpy as np
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union
from scipy.special import logsumexp
from sklearn.cluster import kmeans_plusplus

from wgmm_tools.errors import DataError
from wgmm_tools.gaussian_utils import (
    DiagGaussian, apply_sigma_floor, check_simplex, sigma_floor
)

logger = logging.getLogger(__name__)

# --- EM Configuration ---
EM_TOL = 1e-4
EM_MAX_ITER = 200
DEAD_COMPONENT_MASS = 1e-10
KMEANS_LOCAL_TRIALS = 8
LOG_2PI = np.log(2.0 * np.pi)


def _frozen(values, ndim: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise DataError(f"{name} must have {ndim} dimension(s), got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Gmm:
    """
    Axis-aligned Gaussian mixture. Parameters are stored as stacked arrays:
    weights (K,), means (K, d) and sigmas (K, d).
    """
    weights: np.ndarray
    means: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        weights = _frozen(self.weights, 1, "weights")
        means = _frozen(self.means, 2, "means")
        sigmas = _frozen(self.sigmas, 2, "sigmas")
        if weights.size == 0:
            raise DataError("A GMM needs at least one component")
        if means.shape != sigmas.shape or means.shape[0] != weights.size or means.shape[1] == 0:
            raise DataError(f"Inconsistent GMM shapes: weights {weights.shape}, means {means.shape}, sigmas {sigmas.shape}")
        check_simplex(weights, "weights")
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(sigmas))):
            raise DataError("GMM parameters must be finite")
        if np.any(sigmas <= 0):
            raise DataError("GMM sigmas must be strictly positive")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "sigmas", sigmas)

    @classmethod
    def from_components(cls, weights, components: Sequence[DiagGaussian]) -> "Gmm":
        if len(components) == 0:
            raise DataError("A GMM needs at least one component")
        return cls(weights, np.stack([c.mu for c in components]), np.stack([c.sigma for c in components]))

    @property
    def K(self) -> int:
        return self.weights.size

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def components(self) -> List[DiagGaussian]:
        return [self.component(k) for k in range(self.K)]

    def component(self, k: int) -> DiagGaussian:
        return DiagGaussian(self.means[k], self.sigmas[k])


@dataclass(frozen=True, eq=False)
class LabeledGmm:
    """GMM whose components each carry a class-probability row."""
    base: Gmm
    labels: np.ndarray

    def __post_init__(self):
        labels = _frozen(self.labels, 2, "labels")
        if labels.shape[0] != self.base.K:
            raise DataError(f"labels has {labels.shape[0]} rows for {self.base.K} components")
        for k, row in enumerate(labels):
            check_simplex(row, f"labels[{k}]")
        object.__setattr__(self, "labels", labels)

    @property
    def weights(self) -> np.ndarray:
        return self.base.weights

    @property
    def means(self) -> np.ndarray:
        return self.base.means

    @property
    def sigmas(self) -> np.ndarray:
        return self.base.sigmas

    @property
    def K(self) -> int:
        return self.base.K

    @property
    def d(self) -> int:
        return self.base.d

    @property
    def n_c(self) -> int:
        return self.labels.shape[1]


AnyGmm = Union[Gmm, LabeledGmm]


def as_gmm(model: AnyGmm) -> Gmm:
    return model.base if isinstance(model, LabeledGmm) else model


def as_data(X, d: Optional[int] = None) -> np.ndarray:
    """Validates a data matrix: 2-D, nonempty, finite, with d columns when given."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1) if d in (None, 1) else X.reshape(1, -1)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError(f"Expected a nonempty n x d matrix, got shape {X.shape}")
    if d is not None and X.shape[1] != d:
        raise DataError(f"Dimension mismatch: data has {X.shape[1]} columns, model has d={d}")
    if not np.all(np.isfinite(X)):
        raise DataError("Data contains NaN or infinite values")
    return X


# ==============================================================================
# DENSITIES
# ==============================================================================

def component_log_density(X: np.ndarray, means: np.ndarray, sigmas: np.ndarray) -> np.ndarray:
    """log N(x_i; mu_k, diag(sigma_k^2)) for every sample/component pair, shape (n, K)."""
    z = (X[:, None, :] - means[None, :, :]) / sigmas[None, :, :]
    return -0.5 * np.sum(z ** 2, axis=2) - np.sum(np.log(sigmas), axis=1)[None, :] - 0.5 * X.shape[1] * LOG_2PI


def _log_joint(model: AnyGmm, X: np.ndarray) -> np.ndarray:
    gmm = as_gmm(model)
    with np.errstate(divide="ignore"):
        log_w = np.log(gmm.weights)
    return log_w[None, :] + component_log_density(X, gmm.means, gmm.sigmas)


def score_samples(model: AnyGmm, X) -> np.ndarray:
    """Per-sample mixture log-density."""
    X = as_data(X, as_gmm(model).d)
    return logsumexp(_log_joint(model, X), axis=1)


def log_likelihood(model: AnyGmm, X) -> float:
    """Average log-likelihood of X under the mixture."""
    return float(np.mean(score_samples(model, X)))


def responsibilities(model: AnyGmm, X) -> np.ndarray:
    """Posterior component probabilities r_k(x), computed in the log domain."""
    X = as_data(X, as_gmm(model).d)
    log_joint = _log_joint(model, X)
    return np.exp(log_joint - logsumexp(log_joint, axis=1, keepdims=True))


# ==============================================================================
# EM & MODEL SELECTION
# ==============================================================================

def _e_step(X, weights, means, sigmas) -> Tuple[np.ndarray, np.ndarray]:
    with np.errstate(divide="ignore"):
        log_joint = np.log(weights)[None, :] + component_log_density(X, means, sigmas)
    log_norm = logsumexp(log_joint, axis=1)
    return log_norm, np.exp(log_joint - log_norm[:, None])


def em_fit(X, k: int, seed: int = 0, tol: float = EM_TOL, max_iter: int = EM_MAX_ITER,
           history: Optional[List[float]] = None) -> Gmm:
    """
    Fits a k-component axis-aligned GMM by EM.

    Means are seeded by greedy k-means++ (KMEANS_LOCAL_TRIALS candidates per
    center), sigmas start at the batch std and weights uniform. Iterates until
    the relative log-likelihood change drops below tol or max_iter is reached.

    When history is given, the average log-likelihood of every iterate is
    appended to it. The sequence is non-decreasing except at an iteration that
    re-seeds an empty component; each re-seed logs a warning.
    """
    X = as_data(X)
    n, d = X.shape
    if k < 1 or n < k:
        raise DataError(f"Cannot fit {k} components to {n} samples")

    floor = sigma_floor(X)
    batch_std = apply_sigma_floor(X.std(axis=0), floor)

    if k == 1:
        gmm = Gmm(np.ones(1), X.mean(axis=0)[None, :], batch_std[None, :])
        if history is not None:
            history.append(log_likelihood(gmm, X))
        return gmm

    means, _ = kmeans_plusplus(X, n_clusters=k, random_state=seed, n_local_trials=KMEANS_LOCAL_TRIALS)
    sigmas = np.tile(batch_std, (k, 1))
    weights = np.full(k, 1.0 / k)

    log_norm, resp = _e_step(X, weights, means, sigmas)
    ll = float(log_norm.mean())
    if history is not None:
        history.append(ll)

    for it in range(max_iter):
        nk = resp.sum(axis=0)
        dead = nk <= DEAD_COMPONENT_MASS * n
        nk_safe = np.where(dead, 1.0, nk)

        weights = nk / nk.sum()
        means = (resp.T @ X) / nk_safe[:, None]
        var = np.einsum("nk,nkd->kd", resp, (X[:, None, :] - means[None, :, :]) ** 2) / nk_safe[:, None]
        sigmas = apply_sigma_floor(np.sqrt(var), floor)

        if dead.any():
            # Re-seed empty components on the least explained samples
            order = np.argsort(log_norm, kind="stable")
            for slot, j in enumerate(np.flatnonzero(dead)):
                means[j] = X[order[slot % n]]
                sigmas[j] = batch_std
                weights[j] = 1.0 / n
            weights = weights / weights.sum()
            logger.warning(f"EM re-seeded {int(dead.sum())} empty component(s) at iteration {it}")

        log_norm, resp = _e_step(X, weights, means, sigmas)
        new_ll = float(log_norm.mean())
        if history is not None:
            history.append(new_ll)
        logger.debug(f"EM k={k} iter={it} avg_loglik={new_ll:.6f}")

        converged = abs(new_ll - ll) <= tol * abs(ll)
        ll = new_ll
        if converged:
            break

    return Gmm(weights, means, sigmas)


def n_parameters(K: int, d: int) -> int:
    """Free parameters of an axis-aligned mixture: (K - 1) weights, K*d means, K*d stds."""
    return (K - 1) + 2 * K * d


def bic(model: AnyGmm, X) -> float:
    gmm = as_gmm(model)
    X = as_data(X, gmm.d)
    n = X.shape[0]
    return n_parameters(gmm.K, gmm.d) * np.log(n) - 2.0 * n * log_likelihood(gmm, X)


def get_best_gmm(X, k1: int, k2: int, seed: int = 0) -> Gmm:
    """
    Fits EM for every k in [k1, k2] and keeps the lowest BIC (smallest k on ties).
    k2 is clamped to the number of samples.
    """
    X = as_data(X)
    n = X.shape[0]
    if k1 < 1 or k1 > k2:
        raise DataError(f"Invalid component range [{k1}, {k2}]")
    if k2 > n:
        logger.warning(f"Clamping component range [{k1}, {k2}] to n={n}")
        k2 = n
        k1 = min(k1, k2)

    best, best_bic = None, np.inf
    for k in range(k1, k2 + 1):
        gmm = em_fit(X, k, seed=seed)
        score = bic(gmm, X)
        if best is None or score < best_bic:
            best, best_bic = gmm, score
    return best


def fit_labeled(X, y, k_per_class: int, seed: int = 0, n_classes: Optional[int] = None) -> LabeledGmm:
    """
    Fits a GMM on each class-conditional subset and stacks them, scaling each
    class block by its sample frequency. Component labels are one-hot.
    """
    X = as_data(X)
    y = np.asarray(y).astype(int).ravel()
    if y.size != X.shape[0]:
        raise DataError(f"Got {y.size} labels for {X.shape[0]} samples")
    if np.any(y < 0):
        raise DataError("Class indices must be nonnegative")
    n_classes = int(n_classes if n_classes is not None else y.max() + 1)
    n = X.shape[0]

    weights, means, sigmas, labels = [], [], [], []
    for c in range(n_classes):
        mask = y == c
        if not mask.any():
            raise DataError(f"Class {c} has no samples")
        gmm = get_best_gmm(X[mask], 1, k_per_class, seed=seed + c)
        weights.append(gmm.weights * (mask.sum() / n))
        means.append(gmm.means)
        sigmas.append(gmm.sigmas)
        labels.append(np.tile(np.eye(n_classes)[c], (gmm.K, 1)))

    weights = np.concatenate(weights)
    base = Gmm(weights / weights.sum(), np.vstack(means), np.vstack(sigmas))
    return LabeledGmm(base, np.vstack(labels))


# ==============================================================================
# CLASSIFICATION & SAMPLING
# ==============================================================================

def predict_proba(model: LabeledGmm, X) -> np.ndarray:
    """Class scores sum_k y_k r_k(x), one row per sample."""
    return responsibilities(model, X) @ model.labels


def map_predict(model: LabeledGmm, X) -> np.ndarray:
    # np.argmax keeps the first maximum, i.e. the smallest class index on ties
    return np.argmax(predict_proba(model, X), axis=1)


def map_classify(model: LabeledGmm, x) -> int:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return int(map_predict(model, x)[0])


def sample(model: AnyGmm, n: int, seed: int = 0) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Draws n samples (and class labels for labeled mixtures); deterministic given seed."""
    if n < 1:
        raise DataError("Sample size must be >= 1")
    gmm = as_gmm(model)
    rng = np.random.default_rng(seed)
    comp = rng.choice(gmm.K, size=n, p=gmm.weights)
    X = gmm.means[comp] + gmm.sigmas[comp] * rng.standard_normal((n, gmm.d))
    if not isinstance(model, LabeledGmm):
        return X, None
    cdf = np.cumsum(model.labels[comp], axis=1)
    u = rng.random(n)
    y = np.minimum((u[:, None] >= cdf).sum(axis=1), model.n_c - 1)
    return X, y
