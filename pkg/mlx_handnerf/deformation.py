"""
Observation-to-canonical deformation of ray samples.

A sample is first warped by linear blend skinning with weights taken from the
nearest facet of the posed mesh, then refined by a pose-conditioned residual
network. Left-hand samples are mapped through the mirror ``ψ`` so both hands
share the right hand's canonical space.
"""
from dataclasses import dataclass
from typing import List, Optional, Tuple

import mlx.core as mx
import mlx.nn as nn
import numpy as np
from loguru import logger

from .common.config import NetworkConfig
from .geometry import (
    AABB,
    FrustumGaussian,
    Ray,
    RayBundle,
    apply_affine,
    blend_transforms,
    frustum_gaussians,
    nearest_rotation,
    positional_encoding,
    to_encoder_range,
)
from .hand import (
    MIRROR,
    HandAsset,
    Pose,
    PosedMesh,
    mirror_map_pose,
    observation_to_canonical_matrices,
    query_blend_weights,
)
from .networks import Mlp, MlpSpec

POSE_DIM = 48
_MIRROR_SIGNS = np.diag(MIRROR)


@dataclass
class HandState:
    """One hand of one frame: posed mesh, per-joint warps and its ray bounds."""

    asset: HandAsset
    pose: Pose
    posed: PosedMesh
    transforms: np.ndarray  # (16, 3, 4) observation -> canonical
    box: AABB  # observation-space mesh bounds, inflated by ``margin``
    margin: float

    @classmethod
    def build(cls, asset: HandAsset, pose: Pose, margin_fraction: float = 0.05) -> "HandState":
        posed = PosedMesh.from_asset(asset, pose)
        raw = AABB.of_points(posed.vertices)
        margin = margin_fraction * raw.diagonal
        return cls(
            asset,
            pose,
            posed,
            observation_to_canonical_matrices(asset.skeleton, pose),
            raw.inflate(margin),
            margin,
        )

    @property
    def side(self) -> str:
        return self.asset.side

    @property
    def mirrored(self) -> bool:
        return self.side == "left"

    def pose_vector(self) -> np.ndarray:
        """ψ(p) flattened to the 48 joint axis-angle components."""
        pose = mirror_map_pose(self.pose) if self.mirrored else self.pose
        return pose.flattened()


def map_points(x, side: str):
    """Apply ψ to (..., 3) points; identity for the right hand."""
    if side != "left":
        return x
    if isinstance(x, mx.array):
        return x * mx.array(_MIRROR_SIGNS, dtype=x.dtype)
    return np.asarray(x) * _MIRROR_SIGNS


def lbs_warp(
    x_ob: np.ndarray,
    posed: PosedMesh,
    transforms: np.ndarray,
    return_blend: bool = False,
):
    """
    Warp observation-space points into the hand's canonical pose.

    Returns (x̂_can, blend weights, nearest-facet distance) and, with
    ``return_blend``, the blended (..., 3, 4) affine used for each point.
    """
    x_ob = np.asarray(x_ob, dtype=np.float64)
    weights, _, distance = query_blend_weights(posed, x_ob)
    blended = blend_transforms(weights, transforms)
    x_hat = apply_affine(blended, x_ob)
    if return_blend:
        return x_hat, weights, distance, blended
    return x_hat, weights, distance


class ErrorCorrection(nn.Module):
    """Residual MLP F(ψ(x̂_can), ψ(p)) with a zero-initialised output layer."""

    def __init__(
        self,
        network: NetworkConfig,
        position_degree: int,
        box: AABB,
        rng: Optional[np.random.Generator] = None,
        dtype: mx.Dtype = mx.float32,
    ):
        super().__init__()
        self.position_degree = position_degree
        self.box = box
        spec = MlpSpec(
            input_dim=6 * position_degree + POSE_DIM,
            widths=(network.correction_width,) * network.correction_depth + (3,),
            activation=network.hidden_activation,
            init="zero_last",
        )
        self.mlp = Mlp(spec, rng, dtype)

    def __call__(self, x_mapped: mx.array, pose_mapped: mx.array) -> mx.array:
        encoded = positional_encoding(
            to_encoder_range(x_mapped, self.box), self.position_degree
        )
        pose = mx.broadcast_to(
            pose_mapped.astype(encoded.dtype), (*encoded.shape[:-1], POSE_DIM)
        )
        return self.mlp(mx.concatenate([encoded, pose], axis=-1))


def apply_correction(
    correction: ErrorCorrection, x_hat: mx.array, pose_vector: mx.array, side: str
) -> Tuple[mx.array, mx.array]:
    """Differentiable ``x_can = ψ(x̂_can + F(ψ(x̂_can), ψ(p)))``; returns (x_can, residual)."""
    residual = correction(map_points(x_hat, side), pose_vector)
    return map_points(x_hat + residual, side), residual


def correct(
    x_hat: np.ndarray, pose: Pose, side: str, correction: ErrorCorrection
) -> Tuple[np.ndarray, np.ndarray]:
    """numpy front end of ``apply_correction`` for one point or a (P, 3) batch."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    dtype = correction.mlp.layers[0].weight.dtype
    pose = mirror_map_pose(pose) if side == "left" else pose
    x_can, residual = apply_correction(
        correction,
        mx.array(x_hat, dtype=dtype),
        mx.array(pose.flattened(), dtype=dtype),
        side,
    )
    return np.array(x_can).astype(np.float64), np.array(residual).astype(np.float64)


@dataclass
class SampleBatch:
    """Per-hand samples along R rays, N per ray, ready for the radiance field."""

    side: str
    t: np.ndarray  # (R, N) observation-space midpoints
    t0: np.ndarray
    t1: np.ndarray
    near: np.ndarray  # (R,)
    far: np.ndarray  # (R,)
    hit: np.ndarray  # (R,) ray meets the hand's box
    x_hat: np.ndarray  # (R, N, 3) skinning warp, in the hand's own canonical frame
    cov: np.ndarray  # (R, N, 3, 3) canonical covariance in the shared frame
    view: np.ndarray  # (R, N, 3) canonical view direction in the shared frame
    blend_weights: np.ndarray  # (R, N, 16)
    distance: np.ndarray  # (R, N) to the nearest facet
    empty: np.ndarray  # (R, N) too far from the surface to carry density
    degenerate: np.ndarray  # (R, N) warped outside the normalization box
    pose_vector: np.ndarray  # (48,) ψ(p)

    @property
    def n_samples(self) -> int:
        return self.t.shape[1]

    @property
    def valid(self) -> np.ndarray:
        """Samples that may carry density."""
        return self.hit[:, None] & ~self.empty


def stratified_edges(
    near: np.ndarray, far: np.ndarray, n_samples: int, rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """(R, N+1) segment edges over [near, far]; ``rng`` jitters interior edges."""
    u = np.linspace(0.0, 1.0, n_samples + 1)
    edges = near[:, None] + (far - near)[:, None] * u
    if rng is not None and n_samples > 1:
        mids = (edges[:, 1:] + edges[:, :-1]) / 2
        lower, upper = mids[:, :-1], mids[:, 1:]
        edges[:, 1:-1] = lower + (upper - lower) * rng.random(lower.shape)
    return edges


def deform_rays(
    rays: RayBundle,
    hand: HandState,
    n_samples: int = 64,
    rng: Optional[np.random.Generator] = None,
    empty_space_factor: float = 1.5,
    canonical_box: Optional[AABB] = None,
) -> SampleBatch:
    """Place frustum samples inside the hand's box and carry them into canonical space."""
    R, N = len(rays), n_samples
    near, far, hit = hand.box.intersect_rays(rays.origins, rays.directions)
    near = np.where(hit, near, 0.0)
    far = np.where(hit, far, 1.0)
    edges = stratified_edges(near, far, N, rng)
    t0, t1 = edges[:, :-1], edges[:, 1:]
    t = (t0 + t1) / 2
    means, covs = frustum_gaussians(rays.origins, rays.directions, rays.radii, t0, t1)

    x_hat = means.copy()
    cov_can = covs.copy()
    view = np.broadcast_to(rays.directions[:, None, :], (R, N, 3)).copy()
    weights = np.zeros((R, N, 16))
    distance = np.full((R, N), np.inf)
    if np.any(hit):
        pts = means[hit].reshape(-1, 3)
        warped, w, d, blended = lbs_warp(pts, hand.posed, hand.transforms, return_blend=True)
        rot = nearest_rotation(blended[:, :, :3])
        sig = rot @ covs[hit].reshape(-1, 3, 3) @ np.swapaxes(rot, -1, -2)
        dirs = np.einsum("pij,pj->pi", rot, view[hit].reshape(-1, 3))
        n_hit = int(hit.sum())
        x_hat[hit] = warped.reshape(n_hit, N, 3)
        cov_can[hit] = (0.5 * (sig + np.swapaxes(sig, -1, -2))).reshape(n_hit, N, 3, 3)
        view[hit] = dirs.reshape(n_hit, N, 3)
        weights[hit] = w.reshape(n_hit, N, 16)
        distance[hit] = d.reshape(n_hit, N)
    if hand.mirrored:
        cov_can = MIRROR @ cov_can @ MIRROR
        view = view * _MIRROR_SIGNS
    empty = distance > empty_space_factor * hand.margin
    if canonical_box is not None:
        degenerate = hit[:, None] & ~canonical_box.contains(map_points(x_hat, hand.side))
    else:
        degenerate = np.zeros((R, N), dtype=bool)
    if np.any(degenerate):
        logger.debug(f"{int(degenerate.sum())} {hand.side}-hand samples warped outside the canonical box")
    return SampleBatch(
        hand.side, t, t0, t1, near, far, hit, x_hat, cov_can, view,
        weights, distance, empty, degenerate, hand.pose_vector(),
    )


@dataclass
class DeformedSample:
    gaussian: FrustumGaussian  # canonical mean/covariance, observation t0/t1
    t: float
    side: str
    residual: np.ndarray
    blend_weights: np.ndarray
    view: np.ndarray
    empty: bool = False
    degenerate: bool = False


def deform_ray_samples(
    ray: Ray,
    hand: HandState,
    correction: Optional[ErrorCorrection] = None,
    n_samples: int = 64,
    rng: Optional[np.random.Generator] = None,
    empty_space_factor: float = 1.5,
    canonical_box: Optional[AABB] = None,
) -> List[DeformedSample]:
    """Samples of a single ray, ordered by t; empty when the ray misses the hand."""
    batch = deform_rays(
        RayBundle.from_rays([ray]), hand, n_samples, rng, empty_space_factor, canonical_box
    )
    if not batch.hit[0]:
        return []
    if correction is None:
        x_can = map_points(batch.x_hat[0], hand.side)
        residual = np.zeros_like(x_can)
    else:
        x_can, residual = correct(batch.x_hat[0], hand.pose, hand.side, correction)
    return [
        DeformedSample(
            FrustumGaussian(x_can[i], batch.cov[0, i], float(batch.t0[0, i]), float(batch.t1[0, i])),
            float(batch.t[0, i]),
            hand.side,
            residual[i],
            batch.blend_weights[0, i],
            batch.view[0, i],
            bool(batch.empty[0, i]),
            bool(batch.degenerate[0, i]),
        )
        for i in range(batch.n_samples)
    ]
