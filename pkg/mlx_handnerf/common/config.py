"""
Configuration settings for HandNeRF training, rendering and evaluation.

Defaults live here; a JSON file (``--config``) and ``HANDNERF_*`` environment
variables override them.
"""
import json
from pathlib import Path
from typing import Literal, Optional, Tuple, Union

import mlx.core as mx
from pydantic import BaseModel, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigurationError


class EncodingConfig(BaseModel):
    position_degree: int = Field(default=10, ge=1)
    direction_degree: int = Field(default=4, ge=1)


class NetworkConfig(BaseModel):
    density_depth: int = Field(default=4, ge=1)
    density_width: int = Field(default=128, ge=1)
    density_skips: Tuple[int, ...] = (2,)
    color_depth: int = Field(default=2, ge=1)
    color_width: int = Field(default=64, ge=1)
    correction_depth: int = Field(default=4, ge=1)
    correction_width: int = Field(default=128, ge=1)
    latent_dim: int = Field(default=8, ge=1)
    feature_dim: int = Field(default=16, ge=1)
    hidden_activation: Literal["silu", "relu", "softplus"] = "silu"

    @field_validator("density_skips")
    @classmethod
    def _skips_inside_trunk(cls, v, info):
        depth = info.data.get("density_depth", 4)
        if any(s <= 0 or s >= depth for s in v):
            raise ValueError(f"skip indices {v} must lie in [1, {depth})")
        return v


class SamplingConfig(BaseModel):
    samples_per_hand: int = Field(default=64, ge=1)
    budget_fraction: float = Field(default=0.05, gt=0.0, le=1.0)
    foreground_fraction: float = Field(default=0.8, ge=0.0, le=1.0)
    images_per_step: int = Field(default=1, ge=1)
    chunk_size: int = Field(default=1024, ge=1)
    aabb_margin: float = Field(default=0.05, ge=0.0)
    empty_space_factor: float = Field(default=1.5, gt=0.0)
    normalization_inflation: float = Field(default=2.0, ge=1.0)
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)


class LossWeights(BaseModel):
    """Coefficients of the total objective; L_rgb always has weight ``rgb``."""

    rgb: float = Field(default=1.0, ge=0.0)
    depth: float = Field(default=0.1, ge=0.0)
    distill: float = Field(default=0.1, ge=0.0)
    deform: float = Field(default=0.01, ge=0.0)
    hard_surface: float = Field(default=0.001, ge=0.0)
    color_variance: float = Field(default=0.01, ge=0.0)
    beta: float = Field(default=0.01, gt=0.0)
    cvar_beta: float = Field(default=0.01, gt=0.0)
    depth_kind: Literal["smooth_l1", "gnll"] = "smooth_l1"


class OptimizerConfig(BaseModel):
    learning_rate: float = Field(default=5e-4, ge=0.0)
    final_learning_rate: float = Field(default=5e-5, ge=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(default=1e-8, gt=0.0)


class TrainConfig(BaseModel):
    iterations: int = Field(default=3000, ge=0)
    seed: int = 0
    log_every: int = Field(default=50, ge=1)
    val_every: int = Field(default=500, ge=0)
    checkpoint_every: int = Field(default=1000, ge=0)
    distillation: Literal["teacher", "random", "none"] = "teacher"
    train_views: Optional[int] = Field(default=None, ge=1)


class AdaptConfig(BaseModel):
    iterations: int = Field(default=200, ge=0)
    use_rgb: bool = False
    learning_rate: float = Field(default=5e-4, ge=0.0)


class NumericsConfig(BaseModel):
    precision: Literal["float32", "float64"] = "float32"
    single_thread: bool = False


class HandNeRFSettings(BaseSettings):
    """Full configuration with environment variable support."""

    encoding: EncodingConfig = Field(default_factory=EncodingConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    sampling: SamplingConfig = Field(default_factory=SamplingConfig)
    loss: LossWeights = Field(default_factory=LossWeights)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    adapt: AdaptConfig = Field(default_factory=AdaptConfig)
    numerics: NumericsConfig = Field(default_factory=NumericsConfig)

    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="HANDNERF_",
        env_nested_delimiter="__",
        extra="ignore",
    )

    @property
    def dtype(self) -> mx.Dtype:
        return mx_dtype(self.numerics.precision)


def mx_dtype(precision: str) -> mx.Dtype:
    if precision == "float64":
        # float64 kernels only exist on the CPU backend
        mx.set_default_device(mx.cpu)
        return mx.float64
    return mx.float32


def load_settings(
    path: Optional[Union[str, Path]] = None, **overrides
) -> HandNeRFSettings:
    """Build settings from defaults, environment, an optional JSON file and overrides."""
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}: invalid JSON ({e})") from e
    for section, values in overrides.items():
        data.setdefault(section, {}).update(values)
    try:
        return HandNeRFSettings(**data)
    except ValidationError as e:
        raise ConfigurationError(str(e)) from e


def settings_from_snapshot(snapshot: str) -> HandNeRFSettings:
    try:
        return HandNeRFSettings.model_validate_json(snapshot)
    except ValidationError as e:
        raise ConfigurationError(f"bad configuration snapshot: {e}") from e


# Global default settings instance
settings = HandNeRFSettings()


# worker count for kd-tree queries; numba kernels follow numba's own thread count
KDTREE_WORKERS = -1


def configure_threads(single_thread: bool) -> None:
    """Pin CPU kernels to one thread for reproducibility audits."""
    import numba

    global KDTREE_WORKERS
    KDTREE_WORKERS = 1 if single_thread else -1
    numba.set_num_threads(1 if single_thread else numba.config.NUMBA_NUM_THREADS)
