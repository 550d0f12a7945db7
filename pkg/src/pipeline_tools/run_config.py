# src/pipeline_tools/run_config.py

import logging
import os
import yaml
from typing import Any, Dict, List, Literal, Optional, Type
from pydantic import BaseModel, ConfigDict, Field, model_validator

from wgmm_tools.dadil_utils import DadilParams
from wgmm_tools.errors import DataError
from wgmm_tools.online_utils import StreamParams

logger = logging.getLogger(__name__)


class _CommandConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")


class _StreamOptions(_CommandConfig):
    kmin: int = Field(default=5, ge=1)
    kmax: int = Field(default=15, ge=1)
    dk: int = Field(default=3, ge=1)
    batch: int = Field(default=32, ge=1)
    forgetting: Optional[float] = Field(default=None, gt=0, lt=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check_orders(self):
        if self._uses_kmin() and self.kmin > self.kmax:
            raise ValueError(f"kmin={self.kmin} exceeds kmax={self.kmax}")
        return self

    def _uses_kmin(self) -> bool:
        return True

    def stream_params(self, seed: Optional[int] = None) -> StreamParams:
        return StreamParams(K_min=self.kmin, K_max=self.kmax, delta_K=self.dk, batch_size=self.batch,
                            seed=self.seed if seed is None else seed, forgetting=self.forgetting)


class GenConfig(_CommandConfig):
    dataset: Literal["toy", "msda"]
    out: Optional[str] = None
    seed: int = 0
    # toy
    shuffle: bool = False
    n_per_cluster: int = Field(default=200, ge=1)
    noise: float = Field(default=0.1, ge=0)
    # msda
    domains: int = Field(default=3, ge=1)
    classes: int = Field(default=5, ge=2)
    dim: int = Field(default=8, ge=1)
    shift_scale: float = Field(default=4.0, ge=0)
    n_per_domain: int = Field(default=500, ge=2)


class FitStreamConfig(_StreamOptions):
    input: str
    out: Optional[str] = None
    label_column: Optional[str] = "label"
    header: bool = True
    offline: bool = False
    checkpoint: Optional[str] = None
    resume: Optional[str] = None

    def _uses_kmin(self) -> bool:
        # --offline fits K = kmax directly
        return not self.offline


class FitOfflineConfig(_CommandConfig):
    input: str
    out: Optional[str] = None
    label_column: Optional[str] = "label"
    header: bool = True
    k: int = Field(default=15, ge=1)
    seed: int = 0


class MsdaConfig(_StreamOptions):
    sources: List[str] = Field(min_length=1)
    target: str
    out: Optional[str] = None
    label_column: str = "label"
    header: bool = True
    folds: int = Field(default=5, ge=2)
    workers: int = Field(default=1, ge=1)
    k_per_class: int = Field(default=2, ge=1)
    beta: float = Field(ge=0)
    n_atoms: Optional[int] = Field(default=None, ge=1)
    n_components: int = Field(default=10, ge=1)
    lr_atoms: float = Field(default=2.0, gt=0)
    lr_lambda: float = Field(default=0.01, gt=0)
    steps_per_batch: int = Field(default=1, ge=1)
    post_stream_iters: int = Field(default=100, ge=0)
    offline: bool = False
    baseline: bool = False
    oracle: bool = False
    n_replay: int = Field(default=500, ge=1)

    def dadil_params(self, seed: int) -> DadilParams:
        return DadilParams(beta=self.beta, n_atoms=self.n_atoms, n_components=self.n_components,
                           lr_atoms=self.lr_atoms, lr_lambda=self.lr_lambda,
                           steps_per_batch=self.steps_per_batch, post_stream_iters=self.post_stream_iters,
                           seed=seed)


class EvalConfig(_CommandConfig):
    model_a: str
    model_b: str
    beta: Optional[float] = Field(default=None, ge=0)
    out: Optional[str] = None


class InspectConfig(_CommandConfig):
    model: str
    data: Optional[str] = None
    label_column: Optional[str] = "label"
    header: bool = True


COMMAND_CONFIGS: Dict[str, Type[_CommandConfig]] = {
    "gen": GenConfig,
    "fit-stream": FitStreamConfig,
    "fit-offline": FitOfflineConfig,
    "msda": MsdaConfig,
    "eval": EvalConfig,
    "inspect": InspectConfig,
}


def load_yaml(filepath) -> Dict[str, Any]:
    """Reads a YAML config, expanding ${VARS} from the environment first."""
    try:
        with open(filepath, "r") as f:
            content = os.path.expandvars(f.read())
    except FileNotFoundError:
        raise DataError(f"Config file not found: {filepath}")
    try:
        data = yaml.safe_load(content)
    except yaml.YAMLError as e:
        raise DataError(f"Invalid YAML in {filepath}: {e}")
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise DataError(f"{filepath} must hold a mapping of command sections")
    return data


def resolve_config(command: str, flags: Dict[str, Any], config_path: Optional[str] = None) -> _CommandConfig:
    """
    Merges model defaults < the command's section of the YAML file < CLI flags.
    Flags left at None do not override. Raises pydantic.ValidationError on
    invalid or unknown keys.
    """
    model = COMMAND_CONFIGS[command]
    merged: Dict[str, Any] = {}
    if config_path:
        section = load_yaml(config_path).get(command) or {}
        if not isinstance(section, dict):
            raise DataError(f"Section '{command}' of {config_path} must be a mapping")
        merged.update(section)
    merged.update({k: v for k, v in flags.items() if v is not None})
    cfg = model.model_validate(merged)
    logger.debug(f"Resolved {command} config: {cfg.model_dump()}")
    return cfg
