"""
The canonical radiance field shared by both hands, and the full model bundling
it with the deformation correction network.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import mlx.core as mx
import mlx.nn as nn
import numpy as np

from .common.config import HandNeRFSettings
from .common.errors import UnknownFrameError
from .deformation import ErrorCorrection
from .geometry import (
    AABB,
    integrated_positional_encoding,
    positional_encoding,
    to_encoder_range,
    variance_to_encoder_range,
)
from .networks import Mlp, MlpSpec, cast_module


@dataclass
class LatentAudit:
    """Frame ids whose latent rows were read; ``None`` marks the mean code."""

    reads: List[Optional[int]] = field(default_factory=list)

    def clear(self) -> None:
        self.reads.clear()


class CanonicalField(nn.Module):
    """
    Density trunk over integrated positional encodings, plus a view- and
    latent-conditioned color trunk with RGB and feature heads.
    """

    def __init__(
        self,
        settings: HandNeRFSettings,
        n_frames: int,
        box: AABB,
        rng: Optional[np.random.Generator] = None,
        dtype: mx.Dtype = mx.float32,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(settings.train.seed)
        net = settings.network
        self.position_degree = settings.encoding.position_degree
        self.direction_degree = settings.encoding.direction_degree
        self.box = box
        self.audit = LatentAudit()

        self.density = Mlp(
            MlpSpec(
                input_dim=6 * self.position_degree,
                widths=(net.density_width,) * net.density_depth,
                activation=net.hidden_activation,
                output_activation=net.hidden_activation,
                skips=tuple(net.density_skips),
            ),
            rng,
            dtype,
        )
        self.density_head = Mlp(
            MlpSpec(net.density_width, (1,), output_activation="softplus"), rng, dtype
        )
        self.color = Mlp(
            MlpSpec(
                input_dim=6 * self.direction_degree + net.density_width + net.latent_dim,
                widths=(net.color_width,) * net.color_depth,
                activation=net.hidden_activation,
                output_activation=net.hidden_activation,
            ),
            rng,
            dtype,
        )
        self.color_head = Mlp(MlpSpec(net.color_width, (3,), output_activation="sigmoid"), rng, dtype)
        self.feature_head = Mlp(MlpSpec(net.color_width, (net.feature_dim,)), rng, dtype)
        self.latents = mx.array(rng.normal(0.0, 0.01, size=(n_frames, net.latent_dim)), dtype=dtype)

    @property
    def n_frames(self) -> int:
        return self.latents.shape[0]

    def latent(self, frame: Optional[int]) -> mx.array:
        """Row of the latent table, or the mean code for ``None`` (novel frames)."""
        self.audit.reads.append(frame)
        if frame is None:
            return mx.mean(self.latents, axis=0)
        if not 0 <= frame < self.n_frames:
            raise UnknownFrameError(f"no latent code for frame {frame} ({self.n_frames} trained)")
        return self.latents[frame]


def query_density(field: CanonicalField, mean, variance) -> Tuple[mx.array, mx.array]:
    """
    Density and density feature of canonical Gaussians.

    ``variance`` is (..., 3) diagonal or (..., 3, 3) full covariance. Returns
    (σ (...,), f_σ (..., width)).
    """
    dtype = field.latents.dtype
    mean = mean.astype(dtype) if isinstance(mean, mx.array) else mx.array(np.asarray(mean), dtype=dtype)
    if not isinstance(variance, mx.array):
        variance = np.asarray(variance)
        if variance.ndim == mean.ndim + 1:
            variance = np.diagonal(variance, axis1=-2, axis2=-1)
        variance = mx.array(variance, dtype=dtype)
    elif variance.ndim == mean.ndim + 1:
        variance = mx.diagonal(variance, axis1=-2, axis2=-1)
    encoded = integrated_positional_encoding(
        to_encoder_range(mean, field.box),
        variance_to_encoder_range(variance.astype(dtype), field.box),
        field.position_degree,
    )
    f_sigma = field.density(encoded)
    sigma = field.density_head(f_sigma)[..., 0]
    return sigma, f_sigma


def query_color(
    field: CanonicalField, direction, f_sigma: mx.array, frame: Optional[int]
) -> Tuple[mx.array, mx.array]:
    """RGB in [0, 1] and the D-channel color feature for unit view directions."""
    dtype = field.latents.dtype
    if not isinstance(direction, mx.array):
        direction = mx.array(np.asarray(direction), dtype=dtype)
    encoded = positional_encoding(direction.astype(dtype), field.direction_degree)
    latent = mx.broadcast_to(field.latent(frame), (*encoded.shape[:-1], field.latents.shape[1]))
    h = field.color(mx.concatenate([encoded, f_sigma, latent], axis=-1))
    return field.color_head(h), field.feature_head(h)


class HandNeRF(nn.Module):
    """Canonical field plus correction network; the unit that is trained and checkpointed."""

    def __init__(
        self,
        settings: HandNeRFSettings,
        n_frames: int,
        box: AABB,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        dtype = settings.dtype
        rng = rng if rng is not None else np.random.default_rng(settings.train.seed)
        self.settings = settings
        self.box = box
        self.field = CanonicalField(settings, n_frames, box, rng, dtype)
        self.correction = ErrorCorrection(
            settings.network, settings.encoding.position_degree, box, rng, dtype
        )
        cast_module(self, dtype)

    @property
    def dtype(self) -> mx.Dtype:
        return self.field.latents.dtype

    @classmethod
    def for_canonical_mesh(
        cls, settings: HandNeRFSettings, n_frames: int, canonical_vertices: np.ndarray
    ) -> "HandNeRF":
        """Normalization box: canonical right-hand bounds scaled by ``normalization_inflation``."""
        box = AABB.of_points(np.asarray(canonical_vertices)).scale(
            settings.sampling.normalization_inflation
        )
        return cls(settings, n_frames, box, np.random.default_rng(settings.train.seed))
