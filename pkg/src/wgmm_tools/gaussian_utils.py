# src/wgmm_tools/gaussian_utils.py

import numpy as np
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

from wgmm_tools.errors import DataError

# --- Numerical constants ---
VAR_FLOOR_SCALE = 1e-6
SIMPLEX_TOL = 1e-9


def _readonly(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise DataError(f"{name} must be a vector, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DiagGaussian:
    """
    Axis-aligned Gaussian stored as (mu, sigma), sigma being the per-dimension
    standard deviation.
    """
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = _readonly(self.mu, "mu")
        sigma = _readonly(self.sigma, "sigma")
        if mu.shape != sigma.shape or mu.size == 0:
            raise DataError(f"mu and sigma must share a length d >= 1, got {mu.size} and {sigma.size}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise DataError("Gaussian parameters must be finite")
        if np.any(sigma <= 0):
            raise DataError("sigma must be strictly positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def d(self) -> int:
        return self.mu.size

    def params(self) -> np.ndarray:
        """Point (mu, sigma) in R^{2d}."""
        return np.concatenate([self.mu, self.sigma])


# ==============================================================================
# FLOORS & SIMPLEX CHECKS
# ==============================================================================

def sigma_floor(X: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Per-dimension lower bound on sigma: VAR_FLOOR_SCALE times the global data std,
    with 1.0 standing in for dimensions (or calls) without data spread.
    """
    if X is None:
        return np.array(VAR_FLOOR_SCALE)
    X = np.asarray(X, dtype=np.float64)
    std = X.std(axis=0) if X.shape[0] > 1 else np.ones(X.shape[1])
    std = np.where(std > 0, std, 1.0)
    return VAR_FLOOR_SCALE * std


def apply_sigma_floor(sigma: np.ndarray, floor) -> np.ndarray:
    return np.maximum(np.asarray(sigma, dtype=np.float64), floor)


def check_simplex(vec, name: str = "weights", tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Returns vec as a float array, raising DataError when it is off the probability simplex."""
    arr = np.asarray(vec, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DataError(f"{name} must be a non-empty vector")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise DataError(f"{name} must be finite and nonnegative")
    if abs(arr.sum() - 1.0) > tol:
        raise DataError(f"{name} must sum to 1 (got {arr.sum():.12g})")
    return arr


# ==============================================================================
# WASSERSTEIN GEOMETRY
# ==============================================================================

def w2_diag(a: DiagGaussian, b: DiagGaussian) -> float:
    """W2 between axis-aligned Gaussians: the Euclidean distance between (mu, sigma) pairs."""
    if a.d != b.d:
        raise DataError(f"Dimension mismatch: {a.d} vs {b.d}")
    return float(np.sqrt(np.sum((a.mu - b.mu) ** 2) + np.sum((a.sigma - b.sigma) ** 2)))


def gaussian_barycenter(components: Sequence[DiagGaussian], lam) -> DiagGaussian:
    """
    W2 barycenter of axis-aligned Gaussians, which is the lam-weighted average
    of their parameters.
    """
    if len(components) == 0:
        raise DataError("Cannot take the barycenter of an empty list")
    lam = check_simplex(lam, "lambda")
    if lam.size != len(components):
        raise DataError(f"lambda has {lam.size} entries for {len(components)} components")
    d = components[0].d
    if any(c.d != d for c in components):
        raise DataError("All components must share the same dimension")

    mus = np.stack([c.mu for c in components])
    sigmas = np.stack([c.sigma for c in components])
    mu = np.clip(lam @ mus, mus.min(axis=0), mus.max(axis=0))
    sigma = np.clip(lam @ sigmas, sigmas.min(axis=0), sigmas.max(axis=0))
    return DiagGaussian(mu, sigma)


def gauss_merge(weights: Tuple[float, float], comps: Tuple[DiagGaussian, DiagGaussian]) -> Tuple[float, DiagGaussian]:
    """Merges two weighted components into one carrying their summed mass."""
    w_i, w_j = float(weights[0]), float(weights[1])
    if w_i <= 0 or w_j <= 0:
        raise DataError(f"Merge weights must be positive, got ({w_i}, {w_j})")
    total = w_i + w_j
    merged = gaussian_barycenter(comps, (w_i / total, w_j / total))
    return total, merged
