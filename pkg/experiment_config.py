"""Experiment configuration: one JSON file, validated into frozen pydantic models.

Missing sections fall back to desk-scale defaults. Every result record echoes
the resolved config and its SHA-256 hash.
"""
import hashlib
import json
import logging
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import ConfigError
from GeometryLab import KLGapConfig
from LaplaceInference import COMPONENTS, HESSIAN_MODES, DistillConfig, TrainConfig
from MatrixLangevin import PriorConfig
from SyntheticData import DataSpec

METHODS = ("map_only", "sba", "gauss_proj", "deep_ensemble", "sba_distilled")
ABLATION_AXES = ("kappa0", "samples", "rank", "components", "hessian_points", "hessian_mode")


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    hidden: int = Field(16, gt=0)
    rank: int = Field(4, gt=0)
    activation: Literal["linear", "tanh"] = "linear"
    layers: tuple[int, ...] = (0,)

    @field_validator("layers")
    @classmethod
    def _check_layers(cls, layers):
        if not layers or len(set(layers)) != len(layers) or any(i not in (0, 1) for i in layers):
            raise ValueError(f"layers must be distinct indices from (0, 1), got {layers}")
        return tuple(sorted(layers))


class NormalizerGrid(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    dims: tuple[int, ...] = (32, 64, 128)
    ranks: tuple[int, ...] = (4, 8)
    kappas: tuple[float, ...] = (0.1, 0.5, 1.0, 2.0, 5.0)
    n_mc: int = Field(1_000_000, gt=1)
    method: Literal["wishart", "bessel"] = "wishart"
    # Relative-error tolerance for d at or above each key.
    tolerances: dict[int, float] = {64: 0.02, 128: 0.005}
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_grid(self):
        if not (self.dims and self.ranks and self.kappas):
            raise ValueError("normalizer grid axes must be non-empty")
        if any(k > d for d in self.dims for k in self.ranks):
            raise ValueError(f"every rank in {self.ranks} must be at most every dim in {self.dims}")
        if any(kappa < 0 for kappa in self.kappas):
            raise ValueError("kappas must be non-negative")
        return self

    def tolerance(self, d):
        keys = [key for key in self.tolerances if key <= d]
        return self.tolerances[max(keys)] if keys else None


class AblationGrids(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kappa0: tuple[float, ...] = (0.1, 0.5, 1.0, 2.0, 5.0)
    samples: tuple[int, ...] = (1, 2, 5, 10, 20, 50)
    rank: tuple[int, ...] = (2, 4, 8)
    components: tuple[Literal["none", "sigma", "u", "u_v", "u_sigma_v"], ...] = COMPONENTS
    hessian_points: tuple[int, ...] = (64, 256, 1024)
    hessian_mode: tuple[Literal["exact_fd", "ggn", "diagonal"], ...] = HESSIAN_MODES

    @model_validator(mode="after")
    def _check_values(self):
        if any(v < 0 for v in self.kappa0):
            raise ValueError("kappa0 values must be non-negative")
        for name in ("samples", "rank", "hessian_points"):
            if any(v < 1 for v in getattr(self, name)):
                raise ValueError(f"{name} values must be positive")
        return self


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    data: DataSpec = DataSpec()
    model: ModelConfig = ModelConfig()
    prior: PriorConfig = PriorConfig(kappa0=1.0, tau=1.0)
    train: TrainConfig = TrainConfig()
    method: Literal["map_only", "sba", "gauss_proj", "deep_ensemble", "sba_distilled"] = "sba"
    samples: int = Field(10, gt=0)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    ensemble_size: int = Field(5, ge=2)
    components: Literal["none", "sigma", "u", "u_v", "u_sigma_v"] = "u_sigma_v"
    distill: DistillConfig = DistillConfig()
    geometry: KLGapConfig = KLGapConfig()
    normalizer: NormalizerGrid = NormalizerGrid()
    ablation: AblationGrids = AblationGrids()
    ood_score: Literal["entropy", "mutual_information"] = "entropy"
    selective_score: Literal["entropy", "max_prob"] = "entropy"

    @field_validator("seeds")
    @classmethod
    def _check_seeds(cls, seeds):
        if not seeds:
            raise ValueError("at least one seed is required")
        if len(set(seeds)) != len(seeds) or any(s < 0 for s in seeds):
            raise ValueError(f"seeds must be distinct non-negative integers, got {seeds}")
        return seeds

    @model_validator(mode="after")
    def _check_rank(self):
        widths = {0: (self.model.hidden, self.data.d_in), 1: (self.data.n_classes, self.model.hidden)}
        for index in self.model.layers:
            if self.model.rank > min(widths[index]):
                raise ValueError(f"model.rank={self.model.rank} exceeds the dimensions {widths[index]} of layer {index}")
        return self


def config_hash(config):
    payload = json.dumps(config.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def _field_path(error):
    return ".".join(str(part) for part in error["loc"]) or "<root>"


def validate_config(raw, source="<config>"):
    """ExperimentConfig from a plain dict; the first validation error becomes a ConfigError."""
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        logging.error(f"[config] {source}: {e.error_count()} invalid field(s); first at {_field_path(first)}")
        raise ConfigError(first["msg"], field_path=_field_path(first)) from e


def load_config(path=None, seed_override: Optional[int] = None):
    if path is None:
        raw = {}
    else:
        try:
            with open(path) as f:
                raw = json.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"config file {path} does not exist") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e.msg} (line {e.lineno})") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} must contain a JSON object")
    if seed_override is not None:
        raw = {**raw, "seeds": [seed_override]}
    config = validate_config(raw, source=path or "<defaults>")
    logging.info(f"[config] Loaded {path or 'defaults'}: method {config.method}, seeds {list(config.seeds)}, "
                 f"hash {config_hash(config)[:12]}")
    return config


def override(config, dotted, value):
    """Copy of config with one dotted field replaced, re-validated."""
    raw = config.model_dump(mode="json")
    node = raw
    parts = dotted.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError("no such section", field_path=dotted)
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError("no such field", field_path=dotted)
    node[parts[-1]] = value
    return validate_config(raw, source=f"override {dotted}")
