# src/wgmm_tools/ot_utils.py

import numpy as np
import ot
from dataclasses import dataclass
from typing import Tuple

from wgmm_tools.errors import DataError, NumericalError
from wgmm_tools.gaussian_utils import check_simplex
from wgmm_tools.gmm_utils import AnyGmm, LabeledGmm, as_gmm

# Upper bound on network-simplex pivots; instances here stay around 100 x 100
EMD_MAX_ITER = 1_000_000


@dataclass(frozen=True, eq=False)
class TransportPlan:
    """Optimal coupling between two discrete marginals and its total cost."""
    matrix: np.ndarray
    cost_value: float

    def marginal_residual(self, p, q) -> float:
        return float(max(np.abs(self.matrix.sum(axis=1) - p).max(), np.abs(self.matrix.sum(axis=0) - q).max()))


def solve_exact_ot(cost, p, q) -> TransportPlan:
    """
    Exact discrete OT via the network simplex. Zero-mass rows/columns are dropped
    before solving and reinserted as zeros, so the returned plan is a vertex of
    the full transportation polytope.
    """
    cost = np.asarray(cost, dtype=np.float64)
    p = check_simplex(p, "source marginal")
    q = check_simplex(q, "target marginal")
    if cost.shape != (p.size, q.size):
        raise DataError(f"Cost shape {cost.shape} does not match marginals ({p.size}, {q.size})")
    if not np.all(np.isfinite(cost)):
        raise NumericalError("Cost matrix contains NaN or infinite entries")

    rows = np.flatnonzero(p > 0)
    cols = np.flatnonzero(q > 0)
    p_sub = p[rows] / p[rows].sum()
    q_sub = q[cols] / q[cols].sum()
    sub_cost = np.ascontiguousarray(cost[np.ix_(rows, cols)])

    plan_sub, log = ot.emd(p_sub, q_sub, sub_cost, numItermax=EMD_MAX_ITER, log=True)
    if log.get("warning"):
        raise NumericalError(f"Network simplex did not converge: {log['warning']}")

    plan = np.zeros_like(cost)
    plan[np.ix_(rows, cols)] = np.maximum(plan_sub, 0.0)
    plan.setflags(write=False)
    return TransportPlan(plan, float(np.sum(plan * cost)))


# ==============================================================================
# MIXTURE-WASSERSTEIN DISTANCES
# ==============================================================================

def pairwise_w2_sq(P: AnyGmm, Q: AnyGmm) -> np.ndarray:
    """Squared W2 between every component of P and every component of Q."""
    P, Q = as_gmm(P), as_gmm(Q)
    if P.d != Q.d:
        raise DataError(f"Dimension mismatch: {P.d} vs {Q.d}")
    return (np.sum((P.means[:, None, :] - Q.means[None, :, :]) ** 2, axis=2)
            + np.sum((P.sigmas[:, None, :] - Q.sigmas[None, :, :]) ** 2, axis=2))


def label_cost(P: LabeledGmm, Q: LabeledGmm) -> np.ndarray:
    if P.n_c != Q.n_c:
        raise DataError(f"Class-count mismatch: {P.n_c} vs {Q.n_c}")
    return np.sum((P.labels[:, None, :] - Q.labels[None, :, :]) ** 2, axis=2)


def mw2_sq(P: AnyGmm, Q: AnyGmm) -> Tuple[float, TransportPlan]:
    """Squared mixture-Wasserstein distance, with the optimal component plan."""
    cost = pairwise_w2_sq(P, Q)
    plan = solve_exact_ot(cost, as_gmm(P).weights, as_gmm(Q).weights)
    return plan.cost_value, plan


def smw2_sq(P: LabeledGmm, Q: LabeledGmm, beta: float) -> Tuple[float, TransportPlan]:
    """Supervised variant: beta * ||y_k1 - y_k2||^2 is added to the component cost."""
    if beta < 0:
        raise DataError(f"beta must be nonnegative, got {beta}")
    cost = pairwise_w2_sq(P, Q) + beta * label_cost(P, Q)
    plan = solve_exact_ot(cost, P.weights, Q.weights)
    return plan.cost_value, plan
