# src/wgmm_tools/dataset_utils.py

import logging
import numpy as np
import pandas as pd
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple, Union
from sklearn.model_selection import KFold, StratifiedKFold

from wgmm_tools.errors import DataError

logger = logging.getLogger(__name__)

# --- Toy stream (three interleaved arcs) ---
TOY_N_PER_CLUSTER = 200
TOY_NOISE = 0.1
TOY_ARC_RADIUS = 1.0
# (center, orientation): orientation +1 draws the upper half-circle, -1 the lower one
TOY_ARCS = (((0.0, 0.0), 1.0), ((1.0, 0.5), -1.0), ((2.0, 0.0), 1.0))

# --- Synthetic MSDA benchmark ---
MSDA_CLASS_SPREAD = 3.0
MSDA_CLASS_STD = 1.0

LABEL_COLUMN = "label"


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    X: np.ndarray
    y: Optional[np.ndarray] = None
    domain_id: str = ""

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64, copy=True)
        if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
            raise DataError(f"Dataset '{self.domain_id}' needs a nonempty n x d matrix, got shape {X.shape}")
        X.setflags(write=False)
        object.__setattr__(self, "X", X)
        if self.y is not None:
            y = np.array(self.y, copy=True)
            if y.shape != (X.shape[0],):
                raise DataError(f"Dataset '{self.domain_id}' has {X.shape[0]} samples but {y.size} labels")
            if y.size and (not np.all(np.equal(np.mod(y, 1), 0)) or y.min() < 0):
                raise DataError(f"Dataset '{self.domain_id}' labels must be nonnegative integers")
            y = y.astype(np.int64)
            y.setflags(write=False)
            object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def labeled(self) -> bool:
        return self.y is not None

    @property
    def n_classes(self) -> int:
        return int(self.y.max()) + 1 if self.labeled else 0

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.X[idx], None if self.y is None else self.y[idx], self.domain_id)


# ==============================================================================
# GENERATORS
# ==============================================================================

def gen_toy_clusters(seed: int = 0, shuffle: bool = False, n_per_cluster: int = TOY_N_PER_CLUSTER,
                     noise: float = TOY_NOISE) -> LabeledDataset:
    """
    Three noisy half-circle arcs in 2-d, interleaved like crescents. Samples are
    emitted cluster by cluster (y is the cluster id) unless shuffle is set.
    """
    if n_per_cluster < 1:
        raise DataError(f"n_per_cluster must be >= 1, got {n_per_cluster}")
    rng = np.random.default_rng(seed)
    Xs, ys = [], []
    for c, (center, orientation) in enumerate(TOY_ARCS):
        t = rng.uniform(0.0, np.pi, size=n_per_cluster)
        arc = np.column_stack([center[0] + TOY_ARC_RADIUS * np.cos(t),
                               center[1] + orientation * TOY_ARC_RADIUS * np.sin(t)])
        Xs.append(arc + noise * rng.standard_normal(arc.shape))
        ys.append(np.full(n_per_cluster, c))
    X, y = np.vstack(Xs), np.concatenate(ys)
    if shuffle:
        order = rng.permutation(X.shape[0])
        X, y = X[order], y[order]
    return LabeledDataset(X, y, "toy")


def gen_msda_synthetic(N_S: int, n_c: int, d: int, shift_scale: float, n_per_domain: int,
                       seed: int = 0) -> Tuple[List[LabeledDataset], LabeledDataset]:
    """
    Class-conditional Gaussian blobs shared by all domains. Every source domain
    is translated by shift_scale times a random unit vector; the target shift is
    a random convex combination of the source shifts. Each domain holds
    n_per_domain // n_c samples per class, in class order.
    """
    if N_S < 1 or n_c < 2 or d < 1:
        raise DataError(f"Need N_S >= 1, n_c >= 2 and d >= 1, got N_S={N_S}, n_c={n_c}, d={d}")
    if shift_scale < 0:
        raise DataError(f"shift_scale must be nonnegative, got {shift_scale}")
    n_per_class = n_per_domain // n_c
    if n_per_class < 1:
        raise DataError(f"n_per_domain={n_per_domain} is smaller than the class count {n_c}")

    rng = np.random.default_rng(seed)
    class_means = MSDA_CLASS_SPREAD * rng.standard_normal((n_c, d))
    directions = rng.standard_normal((N_S, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    shifts = shift_scale * directions
    target_shift = rng.dirichlet(np.ones(N_S)) @ shifts

    def _domain(shift, domain_id):
        X = np.vstack([class_means[c] + shift + MSDA_CLASS_STD * rng.standard_normal((n_per_class, d))
                       for c in range(n_c)])
        return LabeledDataset(X, np.repeat(np.arange(n_c), n_per_class), domain_id)

    sources = [_domain(shifts[ell], f"source_{ell}") for ell in range(N_S)]
    target = _domain(target_shift, "target")
    logger.debug(f"MSDA synthetic: N_S={N_S}, n_c={n_c}, d={d}, shift_scale={shift_scale}, n_per_class={n_per_class}")
    return sources, target


# ==============================================================================
# CSV
# ==============================================================================

def load_csv(path, label_column: Optional[Union[str, int]] = None, header: bool = True,
             require_labels: bool = True) -> LabeledDataset:
    """
    Reads one sample per row. label_column selects the label by name, or by
    position when no column carries that name; with require_labels=False a
    missing label column yields an unlabeled dataset instead of an error.
    """
    try:
        df = pd.read_csv(path, header=0 if header else None, float_precision="round_trip")
    except FileNotFoundError:
        raise DataError(f"File not found: {path}")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: malformed CSV ({e})")

    if label_column is not None and label_column not in df.columns:
        index = int(label_column) if str(label_column).isdigit() else None
        if index is not None and index < df.shape[1]:
            label_column = df.columns[index]
        elif require_labels:
            raise DataError(f"{path}: label column '{label_column}' not found")
        else:
            label_column = None

    features = df.drop(columns=[label_column]) if label_column is not None else df
    if features.shape[1] == 0:
        raise DataError(f"{path}: no feature columns")
    first_line = 2 if header else 1

    X = features.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    bad = ~np.isfinite(X)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise DataError(f"{path}: line {row + first_line}: non-numeric or non-finite value "
                        f"'{features.iat[row, col]}' in column '{features.columns[col]}'")

    y = None
    if label_column is not None:
        labels = pd.to_numeric(df[label_column], errors="coerce").to_numpy(dtype=np.float64)
        bad = ~np.isfinite(labels) | (np.mod(labels, 1) != 0) | (labels < 0)
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise DataError(f"{path}: line {row + first_line}: label '{df[label_column].iat[row]}' is not a class index")
        y = labels.astype(np.int64)

    return LabeledDataset(X, y, str(path))


def save_csv(dataset: LabeledDataset, path) -> None:
    df = pd.DataFrame(dataset.X, columns=[f"x{j}" for j in range(dataset.d)])
    if dataset.labeled:
        df[LABEL_COLUMN] = dataset.y
    df.to_csv(path, index=False, float_format="%.17g")


# ==============================================================================
# PARTITIONS & STREAMS
# ==============================================================================

def kfold_split(dataset: LabeledDataset, k: int, seed: int = 0) -> List[Tuple[np.ndarray, np.ndarray]]:
    """k (train, test) index pairs, stratified by class whenever every class has at least k samples."""
    if k < 2:
        raise DataError(f"k must be >= 2, got {k}")
    if k > dataset.n:
        raise DataError(f"Cannot split {dataset.n} samples into {k} folds")
    counts = np.bincount(dataset.y) if dataset.labeled else np.array([])
    if dataset.labeled and counts[counts > 0].min() >= k:
        splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
        return [(train, test) for train, test in splitter.split(dataset.X, dataset.y)]
    splitter = KFold(n_splits=k, shuffle=True, random_state=seed)
    return [(train, test) for train, test in splitter.split(dataset.X)]


def as_stream(data: Union[LabeledDataset, np.ndarray], n_b: int, start: int = 0) -> Iterator[np.ndarray]:
    """Yields consecutive batches of n_b rows, beginning at row start."""
    if n_b < 1:
        raise DataError(f"Batch size must be >= 1, got {n_b}")
    X = data.X if isinstance(data, LabeledDataset) else np.asarray(data, dtype=np.float64)
    for i in range(start, X.shape[0], n_b):
        yield X[i:i + n_b]
