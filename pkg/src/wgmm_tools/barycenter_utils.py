# src/wgmm_tools/barycenter_utils.py

import logging
import numpy as np
from dataclasses import dataclass
from typing import List, Optional, Sequence
from pydantic import BaseModel, ConfigDict, Field

from wgmm_tools.errors import DataError
from wgmm_tools.gaussian_utils import check_simplex
from wgmm_tools.gmm_utils import Gmm, LabeledGmm
from wgmm_tools.ot_utils import TransportPlan, smw2_sq

logger = logging.getLogger(__name__)


class BarycenterConfig(BaseModel):
    """Settings of the fixed-point barycenter solver."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_components: int = Field(default=5, ge=1, description="K_B, component count of the barycenter")
    max_fp_iters: int = Field(default=50, ge=1)
    fp_tol: float = Field(default=1e-5, gt=0)
    seed: int = 0


@dataclass(frozen=True, eq=False)
class BarycenterSolution:
    """Barycenter plus the atom plans of its final fixed-point update."""
    barycenter: LabeledGmm
    plans: List[TransportPlan]
    objective: float
    n_iters: int


def normalize_label_rows(labels: np.ndarray) -> np.ndarray:
    labels = np.clip(labels, 0.0, None)
    sums = labels.sum(axis=1, keepdims=True)
    uniform = np.full_like(labels, 1.0 / labels.shape[1])
    return np.where(sums > 0, labels / np.where(sums > 0, sums, 1.0), uniform)


def fixed_point_update(lam: np.ndarray, atoms: Sequence[LabeledGmm], plans: Sequence[TransportPlan], K_B: int):
    """
    One barycentric projection: every barycenter component moves to the
    lam-weighted average of the atom components it is coupled with.
    """
    mu = sum(lam[c] * K_B * (plans[c].matrix @ atom.means) for c, atom in enumerate(atoms))
    sigma = sum(lam[c] * K_B * (plans[c].matrix @ atom.sigmas) for c, atom in enumerate(atoms))
    labels = sum(lam[c] * K_B * (plans[c].matrix @ atom.labels) for c, atom in enumerate(atoms))
    return mu, sigma, normalize_label_rows(labels)


def _check_atoms(lam, atoms: Sequence[LabeledGmm]) -> np.ndarray:
    if len(atoms) == 0:
        raise DataError("At least one atom is required")
    lam = check_simplex(lam, "lambda")
    if lam.size != len(atoms):
        raise DataError(f"lambda has {lam.size} entries for {len(atoms)} atoms")
    d, n_c = atoms[0].d, atoms[0].n_c
    for c, atom in enumerate(atoms):
        if atom.d != d or atom.n_c != n_c:
            raise DataError(f"Atom {c} has (d={atom.d}, n_c={atom.n_c}), expected (d={d}, n_c={n_c})")
    return lam


def solve_barycenter(lam, atoms: Sequence[LabeledGmm], cfg: BarycenterConfig, beta: float,
                     history: Optional[List[float]] = None) -> BarycenterSolution:
    """
    Fixed-point iteration for the mixture-Wasserstein barycenter with uniform
    weights 1/K_B. Each sweep solves the SMW2 plan to every atom, then applies
    fixed_point_update; stops once no parameter moves by fp_tol or more.
    """
    lam = _check_atoms(lam, atoms)
    K_B = cfg.n_components
    weights = np.full(K_B, 1.0 / K_B)

    # Components drawn from atoms proportionally to lambda. Atoms of size K_B
    # keep their slot order, otherwise the component follows the atom weights.
    rng = np.random.default_rng(cfg.seed)
    picked_atoms = rng.choice(len(atoms), size=K_B, p=lam)
    if all(atom.K == K_B for atom in atoms):
        picked = list(zip(picked_atoms, range(K_B)))
    else:
        picked = [(c, rng.choice(atoms[c].K, p=atoms[c].weights)) for c in picked_atoms]
    mu = np.stack([atoms[c].means[j] for c, j in picked])
    sigma = np.stack([atoms[c].sigmas[j] for c, j in picked])
    labels = np.stack([atoms[c].labels[j] for c, j in picked])

    objective = np.inf
    for it in range(cfg.max_fp_iters):
        current = LabeledGmm(Gmm(weights, mu, sigma), labels)
        solved = [smw2_sq(current, atom, beta) for atom in atoms]
        plans = [plan for _, plan in solved]
        objective = float(sum(lam[c] * value for c, (value, _) in enumerate(solved)))
        if history is not None:
            history.append(objective)

        new_mu, new_sigma, new_labels = fixed_point_update(lam, atoms, plans, K_B)
        change = max(np.abs(new_mu - mu).max(), np.abs(new_sigma - sigma).max(), np.abs(new_labels - labels).max())
        mu, sigma, labels = new_mu, new_sigma, new_labels
        logger.debug(f"Barycenter iter={it} objective={objective:.6e} change={change:.3e}")
        if change < cfg.fp_tol:
            break

    barycenter = LabeledGmm(Gmm(weights, mu, sigma), labels)
    return BarycenterSolution(barycenter, plans, objective, it + 1)


def mixture_barycenter(lam, atoms: Sequence[LabeledGmm], cfg: BarycenterConfig, beta: float,
                       history: Optional[List[float]] = None) -> LabeledGmm:
    return solve_barycenter(lam, atoms, cfg, beta, history).barycenter
