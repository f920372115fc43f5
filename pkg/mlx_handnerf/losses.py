"""
Training objectives. Every term is mean-reduced; masks and targets are numpy,
predictions are MLX arrays so the terms differentiate inside
``nn.value_and_grad``.
"""
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import mlx.core as mx
import numpy as np
from loguru import logger

from .common.config import LossWeights
from .common.errors import MissingFeatureError, NonFiniteError, ShapeMismatchError
from .rendering import RenderOutput

TERMS = ("rgb", "depth", "distill", "deform", "hard_surface", "color_variance")
GNLL_EPS = 1e-4


@dataclass
class TrainBatch:
    """Targets and predictions for R rays of one rendered view."""

    rgb: mx.array  # (R, 3)
    depth: mx.array  # (R,)
    weights: mx.array  # (R, K)
    sample_mask: np.ndarray  # (R, K) real samples
    t: np.ndarray  # (R, K)
    residuals: mx.array  # (S, 3)
    residual_mask: np.ndarray  # (S,)
    foreground: np.ndarray  # (R,) dilated-mask membership
    target_depth: np.ndarray  # (R,), +inf where the mesh was not hit
    target_rgb: Optional[np.ndarray] = None  # (R, 3)
    feature: Optional[mx.array] = None  # (R, D)
    target_feature: Optional[np.ndarray] = None  # (R, D)

    def __post_init__(self):
        R = self.rgb.shape[0]
        for name in ("foreground", "target_depth"):
            if getattr(self, name).shape[0] != R:
                raise ShapeMismatchError(f"{name} holds {getattr(self, name).shape[0]} rays, expected {R}")
        if self.target_rgb is not None:
            if self.target_rgb.shape != (R, 3):
                raise ShapeMismatchError(f"target colors {self.target_rgb.shape} for {R} rays")
            if not np.all(np.isfinite(self.target_rgb)):
                raise NonFiniteError("non-finite target colors", {"target_rgb": int((~np.isfinite(self.target_rgb)).sum())})
        if self.sample_mask.shape != tuple(self.weights.shape):
            raise ShapeMismatchError("sample mask does not match the weight layout")
        if self.residual_mask.shape[0] != self.residuals.shape[0]:
            raise ShapeMismatchError("residual mask does not match the residuals")
        if np.any(np.isnan(self.target_depth)):
            raise NonFiniteError("NaN in target depth", {"target_depth": int(np.isnan(self.target_depth).sum())})

    @classmethod
    def from_render(
        cls,
        out: RenderOutput,
        foreground: np.ndarray,
        target_depth: np.ndarray,
        target_rgb: Optional[np.ndarray] = None,
        target_feature: Optional[np.ndarray] = None,
    ) -> "TrainBatch":
        dtype = out.rgb.dtype
        if out.residuals:
            residuals = mx.concatenate(out.residuals, axis=0)
            residual_mask = np.concatenate(out.residual_masks)
        else:
            residuals = mx.zeros((0, 3), dtype=dtype)
            residual_mask = np.zeros(0, dtype=bool)
        return cls(
            rgb=out.rgb,
            depth=out.depth,
            weights=out.volume.weights,
            sample_mask=out.real,
            t=out.t,
            residuals=residuals,
            residual_mask=residual_mask,
            foreground=np.asarray(foreground, dtype=bool),
            target_depth=np.asarray(target_depth, dtype=np.float64),
            target_rgb=None if target_rgb is None else np.asarray(target_rgb, dtype=np.float64),
            feature=out.feature,
            target_feature=target_feature,
        )

    @property
    def n_rays(self) -> int:
        return self.rgb.shape[0]

    @property
    def depth_mask(self) -> np.ndarray:
        return np.isfinite(self.target_depth)


def smooth_l1(x: mx.array, beta: float) -> mx.array:
    ax = mx.abs(x)
    return mx.where(ax <= beta, 0.5 * x * x / beta, ax - 0.5 * beta)


def _const(x: np.ndarray, like: mx.array) -> mx.array:
    return mx.array(np.asarray(x), dtype=like.dtype)


def loss_rgb(batch: TrainBatch) -> mx.array:
    """Mean over rays of the squared color error summed over channels."""
    if batch.n_rays == 0:
        raise ShapeMismatchError("empty batch")
    if batch.target_rgb is None:
        raise ShapeMismatchError("batch carries no color targets")
    err = batch.rgb - _const(batch.target_rgb, batch.rgb)
    return mx.mean(mx.sum(err * err, axis=-1))


def loss_depth(batch: TrainBatch, beta: float = 0.01, kind: str = "smooth_l1") -> mx.array:
    """
    Depth supervision over rays with a finite pseudo-depth.

    ``smooth_l1`` compares the raw rendered depth to the target; ``gnll``
    is a Gaussian negative log-likelihood whose variance is the weight-spread
    of the samples around the rendered depth.
    """
    mask = batch.depth_mask
    count = int(mask.sum())
    if count == 0:
        logger.warning("No rays with a finite target depth, depth loss is 0")
        return mx.array(0.0, dtype=batch.depth.dtype)
    m = _const(mask, batch.depth)
    target = _const(np.where(mask, batch.target_depth, 0.0), batch.depth)
    err = target - batch.depth
    if kind == "smooth_l1":
        per_ray = smooth_l1(err, beta)
    elif kind == "gnll":
        spread = _const(batch.t, batch.depth) - batch.depth[:, None]
        variance = mx.sum(batch.weights * spread * spread, axis=-1) + GNLL_EPS
        per_ray = 0.5 * (mx.log(variance) + err * err / variance)
    else:
        raise ValueError(f"unknown depth loss {kind!r}")
    return mx.sum(per_ray * m) / count


def loss_distill(batch: TrainBatch) -> mx.array:
    """Mean squared feature error over foreground rays and channels."""
    if batch.target_feature is None or batch.feature is None:
        raise MissingFeatureError("no target features for this view")
    target = np.asarray(batch.target_feature)
    if target.shape != tuple(batch.feature.shape):
        raise ShapeMismatchError(f"feature targets {target.shape} vs rendered {tuple(batch.feature.shape)}")
    count = int(batch.foreground.sum())
    if count == 0:
        logger.warning("No foreground rays, distillation loss is 0")
        return mx.array(0.0, dtype=batch.feature.dtype)
    err = batch.feature - _const(target, batch.feature)
    per_ray = mx.mean(err * err, axis=-1)
    return mx.sum(per_ray * _const(batch.foreground, per_ray)) / count


def safe_norm(v: mx.array) -> mx.array:
    """Euclidean norm along the last axis with a zero gradient at the origin."""
    sq = mx.sum(v * v, axis=-1)
    positive = sq > 0
    return mx.where(positive, mx.sqrt(mx.where(positive, sq, mx.ones_like(sq))), mx.zeros_like(sq))


def loss_deform(batch: TrainBatch) -> mx.array:
    """Mean residual length over samples of rays that met their hand."""
    count = int(batch.residual_mask.sum())
    if count == 0:
        return mx.array(0.0, dtype=batch.rgb.dtype)
    norms = safe_norm(batch.residuals)
    return mx.sum(norms * _const(batch.residual_mask, norms)) / count


def hard_surface_term(w):
    """−log(e^{−|w|} + e^{−|1−w|}) elementwise."""
    return -mx.logaddexp(-mx.abs(w), -mx.abs(1.0 - w))


def loss_hard_surface(batch: TrainBatch) -> mx.array:
    count = int(batch.sample_mask.sum())
    if count == 0:
        return mx.array(0.0, dtype=batch.weights.dtype)
    term = hard_surface_term(batch.weights)
    return mx.sum(term * _const(batch.sample_mask, term)) / count


def loss_color_variance(batch: TrainBatch, beta: float = 0.01) -> mx.array:
    """Smooth-L1 between biased per-channel color variances of foreground targets and predictions."""
    if batch.target_rgb is None:
        raise ShapeMismatchError("batch carries no color targets")
    fg = np.flatnonzero(batch.foreground)
    if len(fg) < 2:
        logger.warning(f"{len(fg)} foreground rays, color variance loss is 0")
        return mx.array(0.0, dtype=batch.rgb.dtype)
    target = batch.target_rgb[fg]
    target_var = _const(target.var(axis=0), batch.rgb)
    pred = batch.rgb[mx.array(fg)]
    centered = pred - mx.mean(pred, axis=0)
    pred_var = mx.mean(centered * centered, axis=0)
    return mx.sum(smooth_l1(target_var - pred_var, beta))


def total_loss(
    batch: TrainBatch, weights: LossWeights, check: bool = True
) -> Tuple[mx.array, Dict[str, mx.array]]:
    """
    Weighted sum of the loss terms and the unweighted per-term breakdown.

    Terms whose coefficient is zero are not evaluated and report 0. ``check``
    evaluates the breakdown and raises on non-finite terms; leave it off
    inside gradient transforms.
    """
    zero = mx.array(0.0, dtype=batch.rgb.dtype)
    coefficients = {
        "rgb": weights.rgb,
        "depth": weights.depth,
        "distill": weights.distill,
        "deform": weights.deform,
        "hard_surface": weights.hard_surface,
        "color_variance": weights.color_variance,
    }
    compute = {
        "rgb": lambda: loss_rgb(batch),
        "depth": lambda: loss_depth(batch, weights.beta, weights.depth_kind),
        "distill": lambda: loss_distill(batch),
        "deform": lambda: loss_deform(batch),
        "hard_surface": lambda: loss_hard_surface(batch),
        "color_variance": lambda: loss_color_variance(batch, weights.cvar_beta),
    }
    breakdown = {name: compute[name]() if coefficients[name] > 0 else zero for name in TERMS}
    total = zero
    for name in TERMS:
        if coefficients[name] > 0:
            total = total + coefficients[name] * breakdown[name]
    if check:
        check_finite_terms(breakdown)
    return total, breakdown


def check_finite_terms(breakdown: Dict[str, mx.array]) -> Dict[str, float]:
    values = {name: float(np.array(value)) for name, value in breakdown.items()}
    bad = {name: 1 for name, value in values.items() if not np.isfinite(value)}
    if bad:
        logger.error(f"Non-finite loss terms: {sorted(bad)}")
        raise NonFiniteError("non-finite loss terms", bad)
    return values
