# src/wgmm_tools/io_utils.py
"""
JSON files for GMMs, stream checkpoints and dictionaries, plus JSON-lines metrics.

Floats are written with Python's shortest round-trip repr, so save/load is
lossless. Loading validates against pydantic schemas; any violation surfaces
as a SchemaError whose message starts with the dotted field path.
"""

import json
import logging
import os
import numpy as np
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Tuple, Union
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from wgmm_tools.dadil_utils import Dictionary
from wgmm_tools.errors import DataError, SchemaError
from wgmm_tools.gaussian_utils import SIMPLEX_TOL
from wgmm_tools.gmm_utils import AnyGmm, Gmm, LabeledGmm
from wgmm_tools.online_utils import StreamState

logger = logging.getLogger(__name__)


# ==============================================================================
# SCHEMAS
# ==============================================================================

class ComponentSchema(BaseModel):
    model_config = ConfigDict(extra="forbid")
    mu: List[float]
    sigma: List[float]


class MetaSchema(BaseModel):
    model_config = ConfigDict(extra="allow")
    seed: Optional[int] = None
    created: Optional[str] = None


class GmmSchema(BaseModel):
    model_config = ConfigDict(extra="forbid")
    d: int = Field(ge=1)
    K: int = Field(ge=1)
    weights: List[float]
    components: List[ComponentSchema]
    labels: Optional[List[List[float]]] = None
    meta: MetaSchema = Field(default_factory=MetaSchema)


class CheckpointSchema(GmmSchema):
    n_seen: int = Field(ge=1)
    K_min: int = Field(ge=1)
    K_max: int = Field(ge=1)
    delta_K: int = Field(ge=1)
    seed: int
    step_index: int = Field(ge=1)
    forgetting: Optional[float] = None


class DictionarySchema(BaseModel):
    model_config = ConfigDict(extra="forbid")
    C: int = Field(ge=1)
    K: int = Field(ge=1)
    d: int = Field(ge=1)
    n_c: int = Field(ge=1)
    beta: float = Field(ge=0)
    atoms: List[GmmSchema]
    Lambda: List[List[float]]
    meta: MetaSchema = Field(default_factory=MetaSchema)


def _validated(schema, data, prefix: str = ""):
    try:
        return schema.model_validate(data)
    except ValidationError as e:
        err = e.errors()[0]
        path = ".".join(str(p) for p in (prefix,) + tuple(err["loc"]) if p != "") or "$"
        raise SchemaError(path, err["msg"])


def _join(*parts) -> str:
    return ".".join(str(p) for p in parts if p != "")


def _check_vector(values, path: str, length: int, positive: bool = False):
    if len(values) != length:
        raise SchemaError(path, f"expected {length} entries, got {len(values)}")
    for i, v in enumerate(values):
        if not np.isfinite(v):
            raise SchemaError(_join(path, i), "value is not finite")
        if positive and v <= 0:
            raise SchemaError(_join(path, i), f"must be > 0, got {v}")


def _check_simplex_row(values, path: str, length: int):
    _check_vector(values, path, length)
    for i, v in enumerate(values):
        if v < 0:
            raise SchemaError(_join(path, i), f"must be >= 0, got {v}")
    if abs(sum(values) - 1.0) > SIMPLEX_TOL:
        raise SchemaError(path, f"entries sum to {sum(values)!r}, expected 1")


# ==============================================================================
# GMM
# ==============================================================================

def file_meta(meta: Optional[Dict[str, Any]]) -> Dict[str, Any]:
    out = {"created": datetime.now(timezone.utc).isoformat()}
    out.update(meta or {})
    return out


def gmm_to_dict(model: AnyGmm, meta: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    data = {
        "d": model.d,
        "K": model.K,
        "weights": model.weights.tolist(),
        "components": [{"mu": model.means[k].tolist(), "sigma": model.sigmas[k].tolist()} for k in range(model.K)],
    }
    if isinstance(model, LabeledGmm):
        data["labels"] = model.labels.tolist()
    data["meta"] = file_meta(meta)
    return data


def _gmm_from_schema(doc: GmmSchema, prefix: str = "") -> AnyGmm:
    _check_simplex_row(doc.weights, _join(prefix, "weights"), doc.K)
    if len(doc.components) != doc.K:
        raise SchemaError(_join(prefix, "components"), f"expected {doc.K} components, got {len(doc.components)}")
    for k, comp in enumerate(doc.components):
        _check_vector(comp.mu, _join(prefix, "components", k, "mu"), doc.d)
        _check_vector(comp.sigma, _join(prefix, "components", k, "sigma"), doc.d, positive=True)
    base = Gmm(np.array(doc.weights),
               np.array([c.mu for c in doc.components]),
               np.array([c.sigma for c in doc.components]))
    if doc.labels is None:
        return base
    if len(doc.labels) != doc.K:
        raise SchemaError(_join(prefix, "labels"), f"expected {doc.K} label rows, got {len(doc.labels)}")
    n_c = len(doc.labels[0])
    if n_c == 0:
        raise SchemaError(_join(prefix, "labels", 0), "label rows must be nonempty")
    for k, row in enumerate(doc.labels):
        _check_simplex_row(row, _join(prefix, "labels", k), n_c)
    return LabeledGmm(base, np.array(doc.labels))


def gmm_from_dict(data: Dict[str, Any]) -> AnyGmm:
    return _gmm_from_schema(_validated(GmmSchema, data))


# ==============================================================================
# STREAM CHECKPOINTS
# ==============================================================================

def checkpoint_to_dict(state: StreamState, meta: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    data = gmm_to_dict(state.model, meta)
    data.update({
        "n_seen": state.n_seen,
        "K_min": state.K_min,
        "K_max": state.K_max,
        "delta_K": state.delta_K,
        "seed": state.seed,
        "step_index": state.step_index,
        "forgetting": state.forgetting,
    })
    return data


def checkpoint_from_dict(data: Dict[str, Any]) -> StreamState:
    doc = _validated(CheckpointSchema, data)
    model = _gmm_from_schema(doc)
    if isinstance(model, LabeledGmm):
        raise SchemaError("labels", "stream checkpoints hold unlabeled GMMs")
    try:
        return StreamState(model, doc.n_seen, doc.K_min, doc.K_max, doc.delta_K, doc.seed,
                           doc.step_index, doc.forgetting)
    except DataError as e:
        raise SchemaError("$", str(e))


# ==============================================================================
# DICTIONARIES
# ==============================================================================

def dictionary_to_dict(dictionary: Dictionary, beta: float, meta: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    atoms = [gmm_to_dict(atom, {}) for atom in dictionary.atoms]
    for atom in atoms:
        atom.pop("meta")
    return {
        "C": dictionary.C,
        "K": dictionary.K,
        "d": dictionary.d,
        "n_c": dictionary.n_c,
        "beta": beta,
        "atoms": atoms,
        "Lambda": dictionary.Lambda.tolist(),
        "meta": file_meta(meta),
    }


def dictionary_from_dict(data: Dict[str, Any]) -> Tuple[Dictionary, float]:
    doc = _validated(DictionarySchema, data)
    if len(doc.atoms) != doc.C:
        raise SchemaError("atoms", f"expected {doc.C} atoms, got {len(doc.atoms)}")
    atoms = []
    for c, atom_doc in enumerate(doc.atoms):
        path = _join("atoms", c)
        if (atom_doc.K, atom_doc.d) != (doc.K, doc.d):
            raise SchemaError(path, f"atom has (K={atom_doc.K}, d={atom_doc.d}), expected (K={doc.K}, d={doc.d})")
        atom = _gmm_from_schema(atom_doc, path)
        if not isinstance(atom, LabeledGmm) or atom.n_c != doc.n_c:
            raise SchemaError(_join(path, "labels"), f"expected label rows of length n_c={doc.n_c}")
        atoms.append(atom)
    if len(doc.Lambda) < 2:
        raise SchemaError("Lambda", f"expected at least 2 rows, got {len(doc.Lambda)}")
    for r, row in enumerate(doc.Lambda):
        _check_simplex_row(row, _join("Lambda", r), doc.C)
    return Dictionary(tuple(atoms), np.array(doc.Lambda)), doc.beta


# ==============================================================================
# FILES
# ==============================================================================

def write_json(path, data: Dict[str, Any]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, allow_nan=False)
        f.write("\n")
    logger.debug(f"Wrote {path}")


def read_json(path) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise DataError(f"File not found: {path}")
    except json.JSONDecodeError as e:
        raise SchemaError("$", f"invalid JSON in {path} ({e})")
    if not isinstance(data, dict):
        raise SchemaError("$", f"{path} must hold a JSON object")
    return data


def save_gmm(model: AnyGmm, path, meta: Optional[Dict[str, Any]] = None) -> None:
    write_json(path, gmm_to_dict(model, meta))


def load_gmm(path) -> AnyGmm:
    return gmm_from_dict(read_json(path))


def save_checkpoint(state: StreamState, path, meta: Optional[Dict[str, Any]] = None) -> None:
    write_json(path, checkpoint_to_dict(state, meta))


def load_checkpoint(path) -> StreamState:
    return checkpoint_from_dict(read_json(path))


def save_dictionary(dictionary: Dictionary, path, beta: float, meta: Optional[Dict[str, Any]] = None) -> None:
    write_json(path, dictionary_to_dict(dictionary, beta, meta))


def load_dictionary(path) -> Tuple[Dictionary, float]:
    return dictionary_from_dict(read_json(path))


def load_any(path) -> Tuple[str, Union[AnyGmm, StreamState, Tuple[Dictionary, float]]]:
    """Loads a GMM, checkpoint or dictionary file, returning (kind, object)."""
    data = read_json(path)
    if "atoms" in data:
        return "dictionary", dictionary_from_dict(data)
    if "n_seen" in data:
        return "checkpoint", checkpoint_from_dict(data)
    return "gmm", gmm_from_dict(data)


class MetricsWriter:
    """
    JSON-lines sink. The file is truncated when the writer opens, unless
    append is set (resumed runs). Every record is flushed as soon as it is written.
    """

    def __init__(self, path, append: bool = False):
        self.path = path
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self._f = open(path, "a" if append else "w", encoding="utf-8")

    def write(self, record: Dict[str, Any]) -> None:
        self._f.write(json.dumps(record, allow_nan=False) + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_metrics(path) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
