# src/wgmm_tools/dadil_utils.py
"""
Dictionary learning over labeled GMMs.

Every domain (each source, then the target as the last row) is reconstructed as a
mixture-Wasserstein barycenter of the atoms, weighted by its row of Lambda. The
loss adds the unsupervised MW2 term of the target reconstruction to the SMW2
terms of the source reconstructions.

Gradients treat every optimal plan as constant: the plans between each domain
and its reconstruction, and the atom plans of the final fixed-point update.
With plans frozen the loss is quadratic in the atom parameters and linear maps
of Lambda, so the gradients below are exact for that frozen objective.
"""

import logging
import time
import numpy as np
from dataclasses import dataclass
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple
from pydantic import BaseModel, ConfigDict, Field

from wgmm_tools.barycenter_utils import BarycenterConfig, solve_barycenter
from wgmm_tools.errors import DataError, NumericalError
from wgmm_tools.gaussian_utils import SIMPLEX_TOL, VAR_FLOOR_SCALE
from wgmm_tools.gmm_utils import (
    Gmm, LabeledGmm, as_data, fit_labeled, map_predict, sample
)
from wgmm_tools.online_utils import StreamParams, iter_stream
from wgmm_tools.ot_utils import mw2_sq, smw2_sq

logger = logging.getLogger(__name__)

ATOM_SIGMA_FLOOR = VAR_FLOOR_SCALE
ATOM_JITTER_SCALE = 0.01


class DadilParams(BaseModel):
    """Hyper-parameters of (online) GMM dictionary learning."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    beta: float = Field(ge=0, description="weight of the label term in SMW2 (no default endorsed)")
    n_atoms: Optional[int] = Field(default=None, ge=1, description="C; defaults to N_S + 1")
    n_components: int = Field(default=10, ge=1, description="K, components per atom")
    lr_atoms: float = Field(default=2.0, gt=0)
    lr_lambda: float = Field(default=0.01, gt=0)
    n_iters: int = Field(default=100, ge=0, description="offline optimization steps")
    steps_per_batch: int = Field(default=1, ge=1, description="u, dictionary steps per stream batch")
    post_stream_iters: int = Field(default=100, ge=0)
    max_halvings: int = Field(default=10, ge=0)
    max_fp_iters: int = Field(default=50, ge=1)
    fp_tol: float = Field(default=1e-5, gt=0)
    seed: int = 0

    def barycenter_config(self, row: int) -> BarycenterConfig:
        return BarycenterConfig(n_components=self.n_components, max_fp_iters=self.max_fp_iters,
                                fp_tol=self.fp_tol, seed=self.seed + row)


# ==============================================================================
# DICTIONARY
# ==============================================================================

class DictionaryArrays(NamedTuple):
    """Raw dictionary parameters; no simplex or floor constraint is enforced here."""
    weights: np.ndarray   # (C, K), fixed
    means: np.ndarray     # (C, K, d)
    sigmas: np.ndarray    # (C, K, d)
    labels: np.ndarray    # (C, K, n_c)
    Lambda: np.ndarray    # (N_S + 1, C)


@dataclass(frozen=True, eq=False)
class Dictionary:
    atoms: Tuple[LabeledGmm, ...]
    Lambda: np.ndarray

    def __post_init__(self):
        atoms = tuple(self.atoms)
        if len(atoms) == 0:
            raise DataError("A dictionary needs at least one atom")
        K, d, n_c = atoms[0].K, atoms[0].d, atoms[0].n_c
        for c, atom in enumerate(atoms):
            if (atom.K, atom.d, atom.n_c) != (K, d, n_c):
                raise DataError(f"Atom {c} has (K, d, n_c)=({atom.K}, {atom.d}, {atom.n_c}), expected ({K}, {d}, {n_c})")
        Lambda = np.array(self.Lambda, dtype=np.float64, copy=True)
        if Lambda.ndim != 2 or Lambda.shape[1] != len(atoms) or Lambda.shape[0] < 2:
            raise DataError(f"Lambda must have shape (N_S + 1, C={len(atoms)}), got {Lambda.shape}")
        if np.any(Lambda < 0) or np.any(np.abs(Lambda.sum(axis=1) - 1.0) > SIMPLEX_TOL):
            raise DataError("Every Lambda row must lie on the simplex")
        Lambda.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "Lambda", Lambda)

    @property
    def C(self) -> int:
        return len(self.atoms)

    @property
    def K(self) -> int:
        return self.atoms[0].K

    @property
    def d(self) -> int:
        return self.atoms[0].d

    @property
    def n_c(self) -> int:
        return self.atoms[0].n_c

    @property
    def n_sources(self) -> int:
        return self.Lambda.shape[0] - 1

    def arrays(self) -> DictionaryArrays:
        return DictionaryArrays(
            np.stack([a.weights for a in self.atoms]),
            np.stack([a.means for a in self.atoms]),
            np.stack([a.sigmas for a in self.atoms]),
            np.stack([a.labels for a in self.atoms]),
            self.Lambda.copy(),
        )

    @classmethod
    def from_arrays(cls, arrays: DictionaryArrays) -> "Dictionary":
        atoms = tuple(
            LabeledGmm(Gmm(arrays.weights[c], arrays.means[c], arrays.sigmas[c]), arrays.labels[c])
            for c in range(arrays.means.shape[0])
        )
        return cls(atoms, arrays.Lambda)


def project_simplex(V: np.ndarray) -> np.ndarray:
    """Euclidean projection of every row of V onto the probability simplex."""
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    n = V.shape[1]
    U = -np.sort(-V, axis=1)
    css = np.cumsum(U, axis=1) - 1.0
    cond = U - css / np.arange(1, n + 1) > 0
    rho = n - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(V.shape[0]), rho] / (rho + 1)
    return np.maximum(V - theta[:, None], 0.0)


def _check_domains(sources: Sequence[LabeledGmm], target: Gmm, d: int, n_c: int):
    if len(sources) == 0:
        raise DataError("At least one source domain is required")
    for ell, source in enumerate(sources):
        if source.d != d or source.n_c != n_c:
            raise DataError(f"Source {ell} has (d={source.d}, n_c={source.n_c}), expected (d={d}, n_c={n_c})")
    if target.d != d:
        raise DataError(f"Target has d={target.d}, expected d={d}")


def init_dictionary(sources: Sequence[LabeledGmm], target: Gmm, C: int, K: int, seed: int = 0) -> Dictionary:
    """
    Draws atom components from the pooled source components. Atom c takes its
    components from source c mod N_S where that source has the class, and slot
    k holds class k mod n_c, so each atom covers every class when K >= n_c.
    Means get a jitter of 0.01 x the global std of the pooled means; Lambda
    starts uniform.
    """
    if len(sources) == 0:
        raise DataError("At least one source domain is required")
    if C < 1 or K < 1:
        raise DataError(f"Need C >= 1 and K >= 1, got C={C}, K={K}")
    _check_domains(sources, target, sources[0].d, sources[0].n_c)

    means = np.vstack([s.means for s in sources])
    sigmas = np.vstack([s.sigmas for s in sources])
    labels = np.vstack([s.labels for s in sources])
    weights = np.concatenate([s.weights for s in sources])
    owners = np.concatenate([np.full(s.K, ell) for ell, s in enumerate(sources)])
    classes = np.argmax(labels, axis=1)
    present = np.unique(classes)

    std = means.std(axis=0) if means.shape[0] > 1 else np.ones(means.shape[1])
    jitter = ATOM_JITTER_SCALE * np.where(std > 0, std, 1.0)

    rng = np.random.default_rng(seed)
    atoms = []
    for c in range(C):
        picked, drawn = [], {}
        for slot in range(K):
            cls = present[slot % present.size]
            if cls not in drawn:
                in_class = classes == cls
                members = np.flatnonzero(in_class & (owners == c % len(sources)))
                if members.size == 0:
                    members = np.flatnonzero(in_class)
                mass = weights[members]
                p = mass / mass.sum() if np.all(mass > 0) else None
                # weighted order without replacement; repeats only once the class is exhausted
                drawn[cls] = rng.choice(members, size=members.size, replace=False, p=p)
            order = drawn[cls]
            picked.append(order[(slot // present.size) % order.size])
        picked = np.array(picked)
        atom_means = means[picked] + jitter * rng.standard_normal((K, means.shape[1]))
        atom_sigmas = np.maximum(sigmas[picked], ATOM_SIGMA_FLOOR)
        atoms.append(LabeledGmm(Gmm(np.full(K, 1.0 / K), atom_means, atom_sigmas), labels[picked]))

    Lambda = np.full((len(sources) + 1, C), 1.0 / C)
    return Dictionary(tuple(atoms), Lambda)


# ==============================================================================
# LOSS & PLAN-FIXED GRADIENTS
# ==============================================================================

@dataclass(frozen=True, eq=False)
class FrozenRow:
    """Plans of one domain reconstruction, held fixed for differentiation."""
    row: int
    atom_plans: Tuple[np.ndarray, ...]   # (K_B, K) per atom
    data_plan: np.ndarray                # (K_Q, K_B)
    q_means: np.ndarray
    q_sigmas: np.ndarray
    q_labels: Optional[np.ndarray]
    label_weight: float


@dataclass(frozen=True, eq=False)
class Evaluation:
    loss: float
    terms: Tuple[float, ...]
    frozen: Tuple[FrozenRow, ...]
    reconstructions: Tuple[LabeledGmm, ...]


def evaluate(dictionary: Dictionary, sources: Sequence[LabeledGmm], target: Gmm, beta: float,
             params: DadilParams) -> Evaluation:
    """Reconstructs every domain and returns the loss with the plans that produced it."""
    _check_domains(sources, target, dictionary.d, dictionary.n_c)
    if len(sources) != dictionary.n_sources:
        raise DataError(f"Dictionary has {dictionary.n_sources} source rows, got {len(sources)} sources")

    terms, frozen, recons = [], [], []
    domains = [(s, True) for s in sources] + [(target, False)]
    for row, (domain, supervised) in enumerate(domains):
        solution = solve_barycenter(dictionary.Lambda[row], dictionary.atoms,
                                    params.barycenter_config(row), beta)
        recon = solution.barycenter
        if supervised:
            value, plan = smw2_sq(domain, recon, beta)
        else:
            value, plan = mw2_sq(domain, recon)
        terms.append(value)
        recons.append(recon)
        frozen.append(FrozenRow(
            row=row,
            atom_plans=tuple(p.matrix for p in solution.plans),
            data_plan=plan.matrix,
            q_means=domain.means,
            q_sigmas=domain.sigmas,
            q_labels=domain.labels if supervised else None,
            label_weight=beta if supervised else 0.0,
        ))
    return Evaluation(float(sum(terms)), tuple(terms), tuple(frozen), tuple(recons))


def dadil_loss(dictionary: Dictionary, sources: Sequence[LabeledGmm], target: Gmm, beta: float,
               params: DadilParams) -> float:
    return evaluate(dictionary, sources, target, beta, params).loss


def _linear_barycenter(arrays: DictionaryArrays, lam: np.ndarray, atom_plans) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    # The label renormalization of the barycenter is the identity on the simplex and is left out here
    K_B = atom_plans[0].shape[0]
    mu = sum(lam[c] * K_B * (atom_plans[c] @ arrays.means[c]) for c in range(len(atom_plans)))
    sigma = sum(lam[c] * K_B * (atom_plans[c] @ arrays.sigmas[c]) for c in range(len(atom_plans)))
    labels = sum(lam[c] * K_B * (atom_plans[c] @ arrays.labels[c]) for c in range(len(atom_plans)))
    return mu, sigma, labels


def _coupled_sq(plan: np.ndarray, A: np.ndarray, B: np.ndarray) -> float:
    """sum_{i,k} plan[i, k] * ||A_i - B_k||^2"""
    return float(np.sum(plan * np.sum((A[:, None, :] - B[None, :, :]) ** 2, axis=2)))


def _coupled_grad(plan: np.ndarray, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Gradient of _coupled_sq with respect to B."""
    return 2.0 * (plan.sum(axis=0)[:, None] * B - plan.T @ A)


def frozen_loss(arrays: DictionaryArrays, frozen: Sequence[FrozenRow]) -> float:
    total = 0.0
    for fr in frozen:
        mu, sigma, labels = _linear_barycenter(arrays, arrays.Lambda[fr.row], fr.atom_plans)
        total += _coupled_sq(fr.data_plan, fr.q_means, mu) + _coupled_sq(fr.data_plan, fr.q_sigmas, sigma)
        if fr.label_weight > 0:
            total += fr.label_weight * _coupled_sq(fr.data_plan, fr.q_labels, labels)
    return total


def frozen_gradients(arrays: DictionaryArrays, frozen: Sequence[FrozenRow]) -> DictionaryArrays:
    """Exact gradients of frozen_loss; the weights slot is returned as zeros."""
    g_means = np.zeros_like(arrays.means)
    g_sigmas = np.zeros_like(arrays.sigmas)
    g_labels = np.zeros_like(arrays.labels)
    g_Lambda = np.zeros_like(arrays.Lambda)

    for fr in frozen:
        lam = arrays.Lambda[fr.row]
        mu, sigma, labels = _linear_barycenter(arrays, lam, fr.atom_plans)
        g_mu = _coupled_grad(fr.data_plan, fr.q_means, mu)
        g_sigma = _coupled_grad(fr.data_plan, fr.q_sigmas, sigma)
        g_y = (fr.label_weight * _coupled_grad(fr.data_plan, fr.q_labels, labels)
               if fr.label_weight > 0 else np.zeros_like(labels))

        for c, plan in enumerate(fr.atom_plans):
            K_B = plan.shape[0]
            g_means[c] += lam[c] * K_B * (plan.T @ g_mu)
            g_sigmas[c] += lam[c] * K_B * (plan.T @ g_sigma)
            g_labels[c] += lam[c] * K_B * (plan.T @ g_y)
            g_Lambda[fr.row, c] += K_B * (np.sum(g_mu * (plan @ arrays.means[c]))
                                          + np.sum(g_sigma * (plan @ arrays.sigmas[c]))
                                          + np.sum(g_y * (plan @ arrays.labels[c])))

    return DictionaryArrays(np.zeros_like(arrays.weights), g_means, g_sigmas, g_labels, g_Lambda)


def _apply_step(arrays: DictionaryArrays, grads: DictionaryArrays, lr_atoms: float, lr_lambda: float) -> Dictionary:
    C, K, n_c = arrays.labels.shape
    stepped = DictionaryArrays(
        arrays.weights,
        arrays.means - lr_atoms * grads.means,
        np.maximum(arrays.sigmas - lr_atoms * grads.sigmas, ATOM_SIGMA_FLOOR),
        project_simplex((arrays.labels - lr_atoms * grads.labels).reshape(C * K, n_c)).reshape(C, K, n_c),
        project_simplex(arrays.Lambda - lr_lambda * grads.Lambda),
    )
    return Dictionary.from_arrays(stepped)


def dadil_step(dictionary: Dictionary, sources: Sequence[LabeledGmm], target: Gmm, beta: float,
               lr_atoms: float, lr_lambda: float, params: DadilParams) -> Tuple[Dictionary, float]:
    """
    One projected gradient step on atoms and Lambda. A step that raises the loss
    is retried with halved learning rates (params.max_halvings times at most);
    when none improves, the input dictionary is kept.
    """
    if lr_atoms <= 0 or lr_lambda <= 0:
        raise DataError("Learning rates must be positive")
    current = evaluate(dictionary, sources, target, beta, params)
    arrays = dictionary.arrays()
    grads = frozen_gradients(arrays, current.frozen)

    finite = [np.all(np.isfinite(g)) for g in grads[1:]]
    if not all(finite):
        norms = {name: float(np.linalg.norm(np.nan_to_num(g))) for name, g in zip(DictionaryArrays._fields[1:], grads[1:])}
        raise NumericalError(f"Non-finite dictionary gradient (loss={current.loss:.6e}, finite-part norms={norms})")

    scale = 1.0
    for attempt in range(params.max_halvings + 1):
        candidate = _apply_step(arrays, grads, lr_atoms * scale, lr_lambda * scale)
        loss = dadil_loss(candidate, sources, target, beta, params)
        if loss <= current.loss:
            if attempt:
                logger.debug(f"Dictionary step accepted after {attempt} halving(s)")
            return candidate, loss
        scale *= 0.5

    logger.warning(f"Dictionary step rejected after {params.max_halvings} halvings (loss={current.loss:.6e})")
    return dictionary, current.loss


# ==============================================================================
# FITTING
# ==============================================================================

def _n_atoms(params: DadilParams, n_sources: int) -> int:
    return params.n_atoms if params.n_atoms is not None else n_sources + 1


def fit_offline(sources: Sequence[LabeledGmm], target: Gmm, params: DadilParams,
                history: Optional[List[float]] = None,
                dictionary: Optional[Dictionary] = None) -> Dictionary:
    """
    Runs params.n_iters dictionary steps against a fixed target GMM. The loss of
    the starting dictionary and of every step is appended to history.
    """
    if dictionary is None:
        dictionary = init_dictionary(sources, target, _n_atoms(params, len(sources)), params.n_components, params.seed)
    if history is not None:
        history.append(dadil_loss(dictionary, sources, target, params.beta, params))
    for it in range(params.n_iters):
        dictionary, loss = dadil_step(dictionary, sources, target, params.beta,
                                      params.lr_atoms, params.lr_lambda, params)
        if history is not None:
            history.append(loss)
        logger.debug(f"Offline step {it}: loss={loss:.6e}")
    return dictionary


def reconstruct_target(dictionary: Dictionary, params: DadilParams) -> LabeledGmm:
    """Labeled barycenter B(lambda_T, P) of the target row."""
    row = dictionary.n_sources
    return solve_barycenter(dictionary.Lambda[row], dictionary.atoms, params.barycenter_config(row), params.beta).barycenter


def target_predict(dictionary: Dictionary, X, params: DadilParams) -> np.ndarray:
    recon = reconstruct_target(dictionary, params)
    return map_predict(recon, as_data(X, dictionary.d))


def target_classify(dictionary: Dictionary, x, params: DadilParams) -> int:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return int(target_predict(dictionary, x, params)[0])


def _metrics_record(step: int, phase: str, dictionary: Dictionary, target: Gmm, loss: float,
                    params: DadilParams, started: float, eval_data) -> Dict:
    recon = reconstruct_target(dictionary, params)
    record = {
        "step": step,
        "phase": phase,
        "recon_mw2_sq": mw2_sq(target, recon)[0],
        "loss": loss,
    }
    if eval_data is not None:
        X_eval, y_eval = eval_data
        record["accuracy"] = float(np.mean(map_predict(recon, X_eval) == np.asarray(y_eval)))
    record["wall_ms"] = (time.perf_counter() - started) * 1000.0
    return record


def fit_online(sources: Sequence[LabeledGmm], target_stream: Iterable, stream: StreamParams,
               params: DadilParams, post_stream_iters: Optional[int] = None,
               eval_data: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Tuple[Dictionary, Gmm, List[Dict]]:
    """
    Online GMM-DaDiL: after every target batch the online target GMM is updated,
    then params.steps_per_batch dictionary steps run against it. Once the stream
    ends, optimization continues for post_stream_iters steps on the final GMM.
    The record of the last stream step carries "stream_end": true.
    """
    post_stream_iters = params.post_stream_iters if post_stream_iters is None else post_stream_iters
    metrics: List[Dict] = []
    dictionary, target, step = None, None, 0

    for state, _ in iter_stream(target_stream, stream.K_min, stream.K_max, stream.delta_K,
                                stream.seed, stream.forgetting):
        started = time.perf_counter()
        target = state.model
        if dictionary is None:
            dictionary = init_dictionary(sources, target, _n_atoms(params, len(sources)), params.n_components, params.seed)
        for _ in range(params.steps_per_batch):
            dictionary, loss = dadil_step(dictionary, sources, target, params.beta,
                                          params.lr_atoms, params.lr_lambda, params)
        step += 1
        metrics.append(_metrics_record(step, "stream", dictionary, target, loss, params, started, eval_data))
        logger.info(f"Batch {state.step_index}: n_seen={state.n_seen}, target K={target.K}, loss={loss:.6e}")

    metrics[-1]["stream_end"] = True

    for _ in range(post_stream_iters):
        started = time.perf_counter()
        dictionary, loss = dadil_step(dictionary, sources, target, params.beta,
                                      params.lr_atoms, params.lr_lambda, params)
        step += 1
        metrics.append(_metrics_record(step, "post", dictionary, target, loss, params, started, eval_data))

    return dictionary, target, metrics


# ==============================================================================
# BASELINES
# ==============================================================================

def source_only_baseline(sources: Sequence[LabeledGmm], n_replay: int, k_per_class: int, seed: int = 0) -> LabeledGmm:
    """
    Replays n_replay samples from every source GMM and fits one labeled GMM on
    the pooled replay; classifying target data with it ignores the shift.
    """
    Xs, ys = [], []
    for ell, source in enumerate(sources):
        X, y = sample(source, n_replay, seed=seed + ell)
        Xs.append(X)
        ys.append(y)
    return fit_labeled(np.vstack(Xs), np.concatenate(ys), k_per_class, seed=seed, n_classes=sources[0].n_c)
