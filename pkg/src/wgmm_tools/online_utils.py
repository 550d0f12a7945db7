# src/wgmm_tools/online_utils.py

import logging
import numpy as np
from dataclasses import dataclass, replace
from typing import Iterable, Iterator, Optional, Tuple
from pydantic import BaseModel, ConfigDict, Field, model_validator

from wgmm_tools.errors import DataError
from wgmm_tools.gaussian_utils import DiagGaussian, gauss_merge
from wgmm_tools.gmm_utils import Gmm, as_data, get_best_gmm

logger = logging.getLogger(__name__)


def step_seed(seed: int, step: int) -> int:
    """Derives the 32-bit seed used for the EM fits of one stream step."""
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


class StreamParams(BaseModel):
    """Hyper-parameters of the online GMM fit (defaults: the toy stream configuration)."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    K_min: int = Field(default=5, ge=1)
    K_max: int = Field(default=15, ge=1)
    delta_K: int = Field(default=3, ge=1)
    batch_size: int = Field(default=32, ge=1)
    seed: int = 0
    forgetting: Optional[float] = Field(default=None, gt=0, lt=1)

    @model_validator(mode="after")
    def _check_orders(self):
        if self.K_min > self.K_max:
            raise ValueError(f"K_min={self.K_min} exceeds K_max={self.K_max}")
        return self


@dataclass(frozen=True, eq=False)
class StreamState:
    """
    Online GMM plus the bookkeeping needed to continue the stream.
    step_index counts the batches consumed so far (the first batch included).
    """
    model: Gmm
    n_seen: int
    K_min: int
    K_max: int
    delta_K: int
    seed: int
    step_index: int = 1
    forgetting: Optional[float] = None

    def __post_init__(self):
        if not (1 <= self.K_min <= self.K_max):
            raise DataError(f"Need 1 <= K_min <= K_max, got K_min={self.K_min}, K_max={self.K_max}")
        if self.delta_K < 1:
            raise DataError(f"delta_K must be >= 1, got {self.delta_K}")
        if self.forgetting is not None and not (0.0 < self.forgetting < 1.0):
            raise DataError(f"forgetting must lie in (0, 1), got {self.forgetting}")
        if self.model.K > self.K_max:
            raise DataError(f"Model has {self.model.K} components, above K_max={self.K_max}")


def init_stream(X0, K_min: int, K_max: int, delta_K: int, seed: int = 0,
                forgetting: Optional[float] = None) -> StreamState:
    """Fits exactly K_min components to the first batch."""
    X0 = as_data(X0)
    if X0.shape[0] < K_min:
        raise DataError(f"First batch has {X0.shape[0]} samples, fewer than K_min={K_min}")
    model = get_best_gmm(X0, K_min, K_min, seed=step_seed(seed, 0))
    return StreamState(model, X0.shape[0], K_min, K_max, delta_K, seed, 1, forgetting)


def concat_components(old: Gmm, n_old: int, new: Gmm, n_batch: int,
                      forgetting: Optional[float] = None) -> Gmm:
    """
    Stacks the components of two mixtures. Weights are scaled by sample counts,
    n_old / (n_old + n_batch) and n_batch / (n_old + n_batch), or by (1 - f, f)
    when a forgetting factor f is set.
    """
    if old.d != new.d:
        raise DataError(f"Dimension mismatch: {old.d} vs {new.d}")
    if forgetting is None:
        total = float(n_old + n_batch)
        w_old, w_new = n_old / total, n_batch / total
    else:
        w_old, w_new = 1.0 - forgetting, forgetting
    weights = np.concatenate([old.weights * w_old, new.weights * w_new])
    return Gmm(weights / weights.sum(),
               np.vstack([old.means, new.means]),
               np.vstack([old.sigmas, new.sigmas]))


def compress_gmm(gmm: Gmm, K_max: int) -> Gmm:
    """
    Merges the W2-closest pair of components until at most K_max remain.
    The merged component replaces i*, j* is deleted; ties go to the smallest (i, j).
    """
    if K_max < 1:
        raise DataError(f"K_max must be >= 1, got {K_max}")
    if gmm.K <= K_max:
        return gmm

    weights = gmm.weights.copy()
    means = gmm.means.copy()
    sigmas = gmm.sigmas.copy()

    while weights.size > K_max:
        K = weights.size
        params = np.hstack([means, sigmas])
        dist = np.sqrt(np.sum((params[:, None, :] - params[None, :, :]) ** 2, axis=2))
        np.fill_diagonal(dist, np.inf)
        # row-major argmin returns the first minimum, hence i < j
        i, j = divmod(int(np.argmin(dist)), K)

        if weights[i] > 0 and weights[j] > 0:
            pair = (DiagGaussian(means[i], sigmas[i]), DiagGaussian(means[j], sigmas[j]))
            w, merged = gauss_merge((weights[i], weights[j]), pair)
            means[i], sigmas[i] = merged.mu, merged.sigma
        else:
            w = weights[i] + weights[j]
            if weights[i] == 0:
                means[i], sigmas[i] = means[j], sigmas[j]
        weights[i] = w

        weights = np.delete(weights, j)
        means = np.delete(means, j, axis=0)
        sigmas = np.delete(sigmas, j, axis=0)

    return Gmm(weights, means, sigmas)


def stream_step(state: StreamState, X_t) -> StreamState:
    """Fits the new batch, appends its components and compresses back to K_max."""
    X_t = as_data(X_t, state.model.d)
    n_batch = X_t.shape[0]
    k2 = min(state.delta_K, n_batch)
    batch_model = get_best_gmm(X_t, 1, k2, seed=step_seed(state.seed, state.step_index))
    grown = concat_components(state.model, state.n_seen, batch_model, n_batch, state.forgetting)
    model = compress_gmm(grown, state.K_max)
    logger.debug(f"Stream step {state.step_index}: batch K={batch_model.K}, grown K={grown.K}, kept K={model.K}")
    return replace(state, model=model, n_seen=state.n_seen + n_batch, step_index=state.step_index + 1)


def iter_stream(stream: Iterable, K_min: int, K_max: int, delta_K: int, seed: int = 0,
                forgetting: Optional[float] = None,
                state: Optional[StreamState] = None) -> Iterator[Tuple[StreamState, np.ndarray]]:
    """
    Yields (state, batch) after every consumed batch. Passing a state resumes
    an earlier run instead of initializing on the first batch.
    """
    for batch in stream:
        batch = as_data(batch)
        if state is None:
            state = init_stream(batch, K_min, K_max, delta_K, seed, forgetting)
        else:
            state = stream_step(state, batch)
        yield state, batch
    if state is None:
        raise DataError("The stream is empty")


def online_gmm_fit(stream: Iterable, K_min: int, K_max: int, delta_K: int, seed: int = 0,
                   forgetting: Optional[float] = None) -> Gmm:
    state = None
    for state, _ in iter_stream(stream, K_min, K_max, delta_K, seed, forgetting):
        pass
    return state.model
