"""
Pixel sampling, two-hand sample composition and volume rendering.

The batched path (``prepare_rays`` → ``render_rays``) keeps geometry in numpy
and the shading and compositing in MLX so losses differentiate through it.
``reference_render`` is a per-sample, pure-python re-derivation used as an
oracle in tests.
"""
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import mlx.core as mx
import numpy as np
from loguru import logger

from .common.config import SamplingConfig
from .common.errors import ConfigurationError, GeometryError, HandNeRFError
from .deformation import HandState, SampleBatch, apply_correction, deform_ray_samples, deform_rays
from .geometry import AABB, RayBundle
from .radiance import HandNeRF, query_color, query_density
from .raster import CameraModel, rasterize

MIN_FINAL_DELTA = 1e-4
_SIDE_ORDER = {"left": 0, "right": 1}


def sample_pixels(
    mask: np.ndarray,
    budget_fraction: float,
    rng: np.random.Generator,
    foreground_fraction: float = 0.8,
) -> np.ndarray:
    """
    Draw ``ceil(budget·H·W)`` distinct pixels, mostly from the foreground mask.

    Returns (n, 2) row/column coordinates. When one pool runs short the other
    makes up the difference.
    """
    if not 0 < budget_fraction <= 1:
        raise ConfigurationError(f"budget fraction must lie in (0, 1], got {budget_fraction}")
    mask = np.asarray(mask, dtype=bool)
    H, W = mask.shape
    n = int(math.ceil(budget_fraction * H * W))
    flat = mask.reshape(-1)
    fg, bg = np.flatnonzero(flat), np.flatnonzero(~flat)
    if len(fg) == 0:
        logger.warning("Empty foreground mask, sampling background pixels only")
    n_fg = min(int(round(foreground_fraction * n)), len(fg))
    n_bg = min(n - n_fg, len(bg))
    n_fg = min(n - n_bg, len(fg))
    chosen = np.concatenate(
        [rng.choice(fg, n_fg, replace=False), rng.choice(bg, n_bg, replace=False)]
    )
    return np.stack(np.unravel_index(chosen, (H, W)), axis=-1).astype(np.int64)


# --- list path --------------------------------------------------------------


@dataclass
class CompositeSample:
    t: float
    sigma: float
    color: np.ndarray
    feature: np.ndarray
    side: str


@dataclass
class CompositeRay:
    samples: list
    deltas: List[float]
    far: float

    def integrate(self, background: Sequence[float] = (0.0, 0.0, 0.0)):
        """
        Returns (Ĉ, Ẑ, F̂, weights, transmittances) accumulated front to back.
        """
        color = np.zeros(3)
        feature = None
        depth = 0.0
        weights, transmittances = [], []
        T = 1.0
        for s, delta in zip(self.samples, self.deltas):
            if s.sigma < 0 or delta < 0:
                raise GeometryError(f"negative density {s.sigma} or spacing {delta}")
            alpha = 1.0 - math.exp(-s.sigma * delta)
            w = T * alpha
            weights.append(w)
            transmittances.append(T)
            color = color + w * np.asarray(s.color, dtype=np.float64)
            contribution = w * np.asarray(s.feature, dtype=np.float64)
            feature = contribution if feature is None else feature + contribution
            depth += w * s.t
            T = T * math.exp(-s.sigma * delta)
        color = color + (1.0 - sum(weights)) * np.asarray(background, dtype=np.float64)
        return color, depth, feature, weights, transmittances


def _own_deltas(samples: list, far: float) -> List[float]:
    deltas = [samples[k + 1].t - samples[k].t for k in range(len(samples) - 1)]
    if samples:
        deltas.append(max(far - samples[-1].t, MIN_FINAL_DELTA))
    return deltas


def compose_hands(left: list, right: list, far: float, far_right: Optional[float] = None) -> CompositeRay:
    """
    Stable merge of two t-sorted sample lists; left wins ties.

    Every sample keeps the spacing to the next sample of its own hand, the
    last one running up to that hand's far bound (``far_right`` defaults to
    ``far``). The merged order only drives transmittance, so a hand with zero
    density leaves the other hand's rendering unchanged.
    """
    far_right = far if far_right is None else far_right
    tagged_left = list(zip(left, _own_deltas(left, far)))
    tagged_right = list(zip(right, _own_deltas(right, far_right)))
    merged = []
    i = j = 0
    while i < len(tagged_left) and j < len(tagged_right):
        if tagged_right[j][0].t < tagged_left[i][0].t:
            merged.append(tagged_right[j])
            j += 1
        else:
            merged.append(tagged_left[i])
            i += 1
    merged.extend(tagged_left[i:])
    merged.extend(tagged_right[j:])
    return CompositeRay([s for s, _ in merged], [d for _, d in merged], max(far, far_right))


def reference_render(
    model: HandNeRF,
    hands: Sequence[HandState],
    camera: CameraModel,
    pixel: Tuple[int, int],
    frame: Optional[int] = None,
    sampling: Optional[SamplingConfig] = None,
):
    """Render one pixel sample by sample; returns (Ĉ, Ẑ, F̂)."""
    sampling = sampling or model.settings.sampling
    ray = camera.rays(np.array([pixel])).ray(0)
    lists = {"left": [], "right": []}
    fars = {"left": 0.0, "right": 0.0}
    for hand in hands:
        _, hand_far, hit = hand.box.intersect_rays(ray.origin[None], ray.direction[None])
        if not hit[0]:
            continue
        fars[hand.side] = float(hand_far[0])
        for s in deform_ray_samples(
            ray, hand, model.correction, sampling.samples_per_hand,
            empty_space_factor=sampling.empty_space_factor, canonical_box=model.box,
        ):
            sigma, f_sigma = query_density(model.field, s.gaussian.mean[None], s.gaussian.cov[None])
            color, feature = query_color(model.field, s.view[None], f_sigma, frame)
            lists[s.side].append(
                CompositeSample(
                    s.t,
                    0.0 if s.empty else float(np.array(sigma)[0]),
                    np.array(color)[0].astype(np.float64),
                    np.array(feature)[0].astype(np.float64),
                    s.side,
                )
            )
    composite = compose_hands(lists["left"], lists["right"], fars["left"], fars["right"])
    color, depth, feature, _, _ = composite.integrate(sampling.background)
    if feature is None:
        feature = np.zeros(model.settings.network.feature_dim)
    return color, depth, feature


# --- batched path -----------------------------------------------------------


@dataclass
class PreparedRays:
    """Per-hand samples of R rays and the depth ordering that merges them."""

    rays: RayBundle
    hands: List[SampleBatch]
    far: np.ndarray  # (R,)
    order: np.ndarray  # (R, K) stable argsort of the concatenated t
    t: np.ndarray  # (R, K) merged t; samples of missed hands sit at ``far``
    deltas: np.ndarray  # (R, K)
    real: np.ndarray  # (R, K) sample exists (its hand was hit)

    def __len__(self) -> int:
        return len(self.rays)

    @property
    def hit(self) -> np.ndarray:
        return self.real.any(axis=1)


def prepare_rays(
    hands: Sequence[HandState],
    rays: RayBundle,
    sampling: SamplingConfig,
    rng: Optional[np.random.Generator] = None,
    canonical_box: Optional[AABB] = None,
) -> PreparedRays:
    """Deform every hand's samples and precompute the merged order and spacings."""
    hands = sorted(hands, key=lambda h: _SIDE_ORDER[h.side])
    batches = [
        deform_rays(
            rays, hand, sampling.samples_per_hand, rng,
            sampling.empty_space_factor, canonical_box,
        )
        for hand in hands
    ]
    R = len(rays)
    if not batches:
        empty = np.zeros((R, 0))
        return PreparedRays(rays, [], np.zeros(R), empty.astype(np.int64), empty, empty, empty.astype(bool))
    far = np.max([np.where(b.hit, b.far, -np.inf) for b in batches], axis=0)
    far = np.where(np.isfinite(far), far, 0.0)
    t_all = np.concatenate([np.where(b.hit[:, None], b.t, far[:, None]) for b in batches], axis=1)
    real_all = np.concatenate(
        [np.broadcast_to(b.hit[:, None], b.t.shape) for b in batches], axis=1
    )
    deltas_all = np.concatenate([_own_spacings(b) for b in batches], axis=1)
    if np.any(deltas_all < 0):
        raise GeometryError("hand samples are not sorted by depth")
    order = np.argsort(t_all, axis=1, kind="stable")
    t = np.take_along_axis(t_all, order, axis=1)
    real = np.take_along_axis(real_all, order, axis=1)
    deltas = np.take_along_axis(deltas_all, order, axis=1)
    return PreparedRays(rays, batches, far, order, t, deltas, real)


def _own_spacings(batch: SampleBatch) -> np.ndarray:
    """(R, N) spacing to the next sample of the same hand; the last runs to its far bound."""
    deltas = np.zeros_like(batch.t)
    deltas[:, :-1] = batch.t[:, 1:] - batch.t[:, :-1]
    deltas[:, -1] = np.maximum(batch.far - batch.t[:, -1], MIN_FINAL_DELTA)
    return np.where(batch.hit[:, None], deltas, 0.0)


@dataclass
class VolumeOutput:
    rgb: mx.array  # (R, 3)
    depth: mx.array  # (R,)
    feature: Optional[mx.array]  # (R, D)
    weights: mx.array  # (R, K)
    transmittance: mx.array  # (R, K)
    weight_sum: mx.array  # (R,)


def _as_mx(x) -> mx.array:
    if isinstance(x, mx.array):
        return x
    x = np.asarray(x)
    return mx.array(x, dtype=mx.float64 if x.dtype == np.float64 else mx.float32)


def volume_render(
    sigma,
    deltas,
    colors,
    t,
    features=None,
    background: Sequence[float] = (0.0, 0.0, 0.0),
    validate: bool = True,
) -> VolumeOutput:
    """
    Composite K depth-sorted samples on each of R rays.

    ``validate`` evaluates the inputs to reject negative densities or
    spacings; it must be off inside gradient transforms.
    """
    sigma, deltas, colors, t = (_as_mx(x) for x in (sigma, deltas, colors, t))
    if features is not None:
        features = _as_mx(features)
    if validate:
        if np.any(np.array(sigma) < 0) or np.any(np.array(deltas) < 0):
            raise GeometryError("volume rendering needs nonnegative densities and spacings")
    dtype = sigma.dtype
    tau = sigma * deltas.astype(dtype)
    transmittance = mx.exp(-mx.cumsum(tau, axis=-1, inclusive=False))
    weights = transmittance * (1.0 - mx.exp(-tau))
    weight_sum = mx.sum(weights, axis=-1)
    bg = mx.array(np.asarray(background), dtype=dtype)
    rgb = mx.sum(weights[..., None] * colors, axis=-2) + (1.0 - weight_sum)[..., None] * bg
    depth = mx.sum(weights * t.astype(dtype), axis=-1)
    feature = None if features is None else mx.sum(weights[..., None] * features, axis=-2)
    return VolumeOutput(rgb, depth, feature, weights, transmittance, weight_sum)


@dataclass
class RenderOutput:
    volume: VolumeOutput
    residuals: List[mx.array]  # per hand, (R·N, 3)
    residual_masks: List[np.ndarray]  # per hand, (R·N,) samples of hit rays
    t: np.ndarray
    real: np.ndarray

    @property
    def rgb(self) -> mx.array:
        return self.volume.rgb

    @property
    def depth(self) -> mx.array:
        return self.volume.depth

    @property
    def feature(self) -> Optional[mx.array]:
        return self.volume.feature


def render_rays(
    model: HandNeRF,
    prepared: PreparedRays,
    frame: Optional[int] = None,
    background: Sequence[float] = (0.0, 0.0, 0.0),
) -> RenderOutput:
    """Differentiable shading and compositing of prepared rays."""
    dtype = model.dtype
    R = len(prepared)
    sigmas, colors, features, residuals, masks = [], [], [], [], []
    for batch in prepared.hands:
        N = batch.n_samples
        x_can, residual = apply_correction(
            model.correction,
            mx.array(batch.x_hat.reshape(-1, 3), dtype=dtype),
            mx.array(batch.pose_vector, dtype=dtype),
            batch.side,
        )
        variance = np.diagonal(batch.cov, axis1=-2, axis2=-1).reshape(-1, 3)
        sigma, f_sigma = query_density(model.field, x_can, mx.array(variance, dtype=dtype))
        color, feature = query_color(
            model.field, mx.array(batch.view.reshape(-1, 3), dtype=dtype), f_sigma, frame
        )
        sigma = mx.where(mx.array(batch.valid.reshape(-1)), sigma, mx.zeros_like(sigma))
        sigmas.append(sigma.reshape(R, N))
        colors.append(color.reshape(R, N, 3))
        features.append(feature.reshape(R, N, -1))
        residuals.append(residual)
        masks.append(np.repeat(batch.hit, N))
    if not sigmas:
        D = model.settings.network.feature_dim
        zero = mx.zeros((R, 0), dtype=dtype)
        volume = volume_render(
            zero, zero, mx.zeros((R, 0, 3), dtype=dtype), zero,
            mx.zeros((R, 0, D), dtype=dtype), background, validate=False,
        )
        return RenderOutput(volume, [], [], prepared.t, prepared.real)
    order = mx.array(prepared.order)
    sigma = mx.take_along_axis(mx.concatenate(sigmas, axis=1), order, axis=1)
    color = mx.concatenate(colors, axis=1)
    color = mx.take_along_axis(color, mx.broadcast_to(order[..., None], color.shape), axis=1)
    feature = mx.concatenate(features, axis=1)
    feature = mx.take_along_axis(feature, mx.broadcast_to(order[..., None], feature.shape), axis=1)
    volume = volume_render(
        sigma,
        mx.array(prepared.deltas, dtype=dtype),
        color,
        mx.array(prepared.t, dtype=dtype),
        feature,
        background,
        validate=False,
    )
    return RenderOutput(volume, residuals, masks, prepared.t, prepared.real)


@dataclass
class RenderedImage:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    feature: np.ndarray  # (H, W, D)
    weight_sum: np.ndarray  # (H, W)
    pixels: np.ndarray  # (P, 2) pixels that were rendered
    failed: List[Tuple[int, int]] = field(default_factory=list)


def render_image(
    model: HandNeRF,
    hands: Sequence[HandState],
    camera: CameraModel,
    mode: str = "full",
    frame: Optional[int] = None,
    pixels: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
    sampling: Optional[SamplingConfig] = None,
) -> RenderedImage:
    """
    Render a camera view into image buffers.

    ``full`` renders every pixel with midpoint sampling. ``train-subset``
    renders ``pixels`` (drawn with ``sample_pixels`` from the hands' silhouette
    when omitted) with stratified jitter from ``rng``. Pixels whose chunk fails
    are retried alone; those that still fail keep the background and are listed
    in ``failed``.
    """
    sampling = sampling or model.settings.sampling
    H, W = camera.height, camera.width
    D = model.settings.network.feature_dim
    if mode == "full":
        pixels = camera.all_pixels()
        rng = None
    elif mode == "train-subset":
        rng = rng if rng is not None else np.random.default_rng(model.settings.train.seed)
        if pixels is None:
            mask = rasterize(camera, [h.posed for h in hands]).mask
            pixels = sample_pixels(mask, sampling.budget_fraction, rng, sampling.foreground_fraction)
    else:
        raise ConfigurationError(f"unknown render mode {mode!r}")

    image = RenderedImage(
        np.broadcast_to(np.asarray(sampling.background, dtype=np.float64), (H, W, 3)).copy(),
        np.zeros((H, W)),
        np.zeros((H, W, D)),
        np.zeros((H, W)),
        np.asarray(pixels),
    )

    def write(chunk: np.ndarray) -> None:
        prepared = prepare_rays(hands, camera.rays(chunk), sampling, rng, model.box)
        out = render_rays(model, prepared, frame, sampling.background)
        mx.eval(out.rgb, out.depth, out.feature, out.volume.weight_sum)
        rows, cols = chunk[:, 0], chunk[:, 1]
        image.color[rows, cols] = np.array(out.rgb)
        image.depth[rows, cols] = np.array(out.depth)
        image.feature[rows, cols] = np.array(out.feature)
        image.weight_sum[rows, cols] = np.array(out.volume.weight_sum)

    for start in range(0, len(pixels), sampling.chunk_size):
        chunk = pixels[start : start + sampling.chunk_size]
        try:
            write(chunk)
        except (HandNeRFError, FloatingPointError) as e:
            logger.warning(f"Chunk at pixel {start} failed ({e}), retrying per pixel")
            for pixel in chunk:
                try:
                    write(pixel[None])
                except (HandNeRFError, FloatingPointError) as err:
                    logger.warning(f"Pixel {tuple(pixel)} failed: {err}")
                    image.failed.append((int(pixel[0]), int(pixel[1])))
    if image.failed:
        logger.warning(f"{len(image.failed)} pixels failed in {camera.camera_id}")
    return image
