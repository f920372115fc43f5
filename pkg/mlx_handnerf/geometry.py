"""
Numerical primitives: rigid transforms, rays, conical frustum Gaussians and the
sinusoidal encodings fed to the radiance and correction networks.

Geometry that never carries gradients is plain numpy (float64). The encodings
are written with ``mlx.core`` so gradients flow from the canonical means back
into the correction network.
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import mlx.core as mx
import numpy as np
from scipy.spatial.transform import Rotation

from .common.errors import GeometryError

ORTHONORMAL_TOL = 1e-6
WEIGHT_SUM_TOL = 1e-4


def axis_angle_to_matrix(rotvec: np.ndarray) -> np.ndarray:
    """Rodrigues map for one (3,) or many (..., 3) axis-angle vectors."""
    rotvec = np.asarray(rotvec, dtype=np.float64)
    flat = rotvec.reshape(-1, 3)
    mats = Rotation.from_rotvec(flat).as_matrix()
    return mats.reshape(rotvec.shape[:-1] + (3, 3))


@dataclass(frozen=True)
class RigidTransform:
    """An element of SE(3): ``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise GeometryError("rigid transform has non-finite entries")
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHONORMAL_TOL:
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise GeometryError("rotation has det != +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_axis_angle(
        cls, rotvec: Sequence[float], translation: Sequence[float] = (0.0, 0.0, 0.0)
    ) -> "RigidTransform":
        return cls(axis_angle_to_matrix(np.asarray(rotvec)), np.asarray(translation))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def translate(cls, translation: Sequence[float]) -> "RigidTransform":
        return cls(np.eye(3), np.asarray(translation))

    def affine(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :4] = self.affine()
        return m

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation


def stack_affine(transforms: Sequence[RigidTransform]) -> np.ndarray:
    return np.stack([t.affine() for t in transforms])


def apply_affine(affine: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply (..., 3, 4) affine matrices to (..., 3) points."""
    return np.einsum("...ij,...j->...i", affine[..., :3], points) + affine[..., 3]


def blend_transforms(
    weights: np.ndarray, transforms: Union[np.ndarray, Sequence[RigidTransform]]
) -> np.ndarray:
    """
    Entrywise convex combination of 16 rigid transforms.

    Parameters
    ----------
    weights: np.ndarray
        Shape (16,) or (..., 16); nonnegative, summing to one.

    transforms: np.ndarray or sequence of RigidTransform
        Shape (16, 3, 4) affine matrices.

    Returns
    -------
    np.ndarray of shape (3, 4) or (..., 3, 4)
    """
    if not isinstance(transforms, np.ndarray):
        transforms = stack_affine(transforms)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape[-1] != transforms.shape[0]:
        raise GeometryError(
            f"{weights.shape[-1]} weights for {transforms.shape[0]} transforms"
        )
    if np.any(weights < 0):
        raise GeometryError("blend weights must be nonnegative")
    deviation = np.abs(weights.sum(axis=-1) - 1.0)
    if np.any(deviation > WEIGHT_SUM_TOL):
        raise GeometryError(
            f"blend weights sum deviates from 1 by {float(deviation.max()):.3g}"
        )
    return np.einsum("...j,jab->...ab", weights, transforms)


def nearest_rotation(linear: np.ndarray) -> np.ndarray:
    """Polar-decomposition rotation factor of (..., 3, 3) matrices."""
    u, _, vt = np.linalg.svd(linear)
    det = np.linalg.det(u @ vt)
    u[..., :, 2] *= np.where(det < 0, -1.0, 1.0)[..., None]
    return u @ vt


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: Tuple[int, int] = (0, 0)
    base_radius: float = 0.0

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise GeometryError("ray direction must be unit length")
        object.__setattr__(self, "direction", d)
        object.__setattr__(
            self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3)
        )


@dataclass
class RayBundle:
    """A batch of rays stored as parallel arrays."""

    origins: np.ndarray  # (R, 3)
    directions: np.ndarray  # (R, 3)
    pixels: np.ndarray  # (R, 2) row, col
    radii: np.ndarray  # (R,)

    def __len__(self) -> int:
        return self.origins.shape[0]

    def __getitem__(self, index) -> "RayBundle":
        return RayBundle(
            self.origins[index],
            self.directions[index],
            self.pixels[index],
            self.radii[index],
        )

    def ray(self, i: int) -> Ray:
        return Ray(
            self.origins[i],
            self.directions[i],
            (int(self.pixels[i, 0]), int(self.pixels[i, 1])),
            float(self.radii[i]),
        )

    @classmethod
    def from_rays(cls, rays: Sequence[Ray]) -> "RayBundle":
        return cls(
            np.stack([r.origin for r in rays]),
            np.stack([r.direction for r in rays]),
            np.array([r.pixel for r in rays], dtype=np.int64).reshape(-1, 2),
            np.array([r.base_radius for r in rays], dtype=np.float64),
        )

    @classmethod
    def concatenate(cls, bundles: Sequence["RayBundle"]) -> "RayBundle":
        return cls(
            np.concatenate([b.origins for b in bundles]),
            np.concatenate([b.directions for b in bundles]),
            np.concatenate([b.pixels for b in bundles]),
            np.concatenate([b.radii for b in bundles]),
        )


@dataclass
class FrustumGaussian:
    mean: np.ndarray
    cov: np.ndarray
    t0: float
    t1: float

    def __post_init__(self):
        if not self.t0 < self.t1:
            raise GeometryError(f"frustum needs t0 < t1, got {self.t0} >= {self.t1}")
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)


def conical_frustum_moments(
    t0: np.ndarray, t1: np.ndarray, base_radius: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean and variance along the ray, and variance perpendicular to it."""
    mu = (t0 + t1) / 2
    hw = (t1 - t0) / 2
    denom = 3 * mu**2 + hw**2
    t_mean = mu + (2 * mu * hw**2) / denom
    t_var = (hw**2) / 3 - (4 / 15) * ((hw**4 * (12 * mu**2 - hw**2)) / denom**2)
    r_var = base_radius**2 * (
        (mu**2) / 4 + (5 / 12) * hw**2 - (4 / 15) * (hw**4) / denom
    )
    return t_mean, t_var, r_var


def lift_gaussian(
    directions: np.ndarray, t_mean: np.ndarray, t_var: np.ndarray, r_var: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Lift ray-parameter moments to 3D offsets and covariances.

    ``directions`` is (..., 3) and broadcasts against the (...,) moments.
    """
    mean = directions * t_mean[..., None]
    d_outer = directions[..., :, None] * directions[..., None, :]
    d_norm2 = np.sum(directions**2, axis=-1, keepdims=True)[..., None]
    null_outer = np.eye(3) - d_outer / np.maximum(d_norm2, 1e-10)
    cov = t_var[..., None, None] * d_outer + r_var[..., None, None] * null_outer
    return mean, cov


def frustum_gaussians(
    origins: np.ndarray,
    directions: np.ndarray,
    radii: np.ndarray,
    t0: np.ndarray,
    t1: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised frustum Gaussians for (R, N) segments on R rays."""
    t_mean, t_var, r_var = conical_frustum_moments(t0, t1, radii[:, None])
    offset, cov = lift_gaussian(directions[:, None, :], t_mean, t_var, r_var)
    return origins[:, None, :] + offset, cov


def frustum_to_gaussian(ray: Ray, t0: float, t1: float) -> FrustumGaussian:
    if not 0 < t0 < t1:
        raise GeometryError(f"frustum needs 0 < t0 < t1, got t0={t0}, t1={t1}")
    mean, cov = frustum_gaussians(
        ray.origin[None],
        ray.direction[None],
        np.array([ray.base_radius]),
        np.array([[t0]], dtype=np.float64),
        np.array([[t1]], dtype=np.float64),
    )
    return FrustumGaussian(mean[0, 0], cov[0, 0], t0, t1)


def _as_mx(x, dtype: Optional[mx.Dtype]) -> mx.array:
    if isinstance(x, mx.array):
        return x if dtype is None else x.astype(dtype)
    return mx.array(np.asarray(x), dtype=dtype or mx.float32)


def positional_encoding(
    x, degree: int, dtype: Optional[mx.Dtype] = None
) -> mx.array:
    """
    Sinusoidal encoding of (..., k) inputs into (..., 2·k·degree) features.

    The layout is frequency-major: ``[sin(2^0 x), ..., sin(2^(L-1) x),
    cos(2^0 x), ..., cos(2^(L-1) x)]`` where each block holds all k components.
    """
    x = _as_mx(x, dtype)
    scales = mx.array([2.0**j for j in range(degree)], dtype=x.dtype)
    scaled = (x[..., None, :] * scales[:, None]).reshape(*x.shape[:-1], -1)
    return mx.concatenate([mx.sin(scaled), mx.cos(scaled)], axis=-1)


def integrated_positional_encoding(
    mean, variance, degree: int, dtype: Optional[mx.Dtype] = None
) -> mx.array:
    """
    Expected sinusoids of a Gaussian with the given mean and per-axis variance.

    ``variance`` is (..., 3) diagonal variances or a full (..., 3, 3) covariance
    whose diagonal is used. With zero variance this equals
    ``positional_encoding(mean, degree)`` exactly.
    """
    mean = _as_mx(mean, dtype)
    variance = _as_mx(variance, mean.dtype)
    if variance.ndim == mean.ndim + 1:
        variance = mx.diagonal(variance, axis1=-2, axis2=-1)
    scales = mx.array([2.0**j for j in range(degree)], dtype=mean.dtype)
    y = (mean[..., None, :] * scales[:, None]).reshape(*mean.shape[:-1], -1)
    y_var = (variance[..., None, :] * (scales**2)[:, None]).reshape(
        *variance.shape[:-1], -1
    )
    damp = mx.exp(-0.5 * y_var)
    return mx.concatenate([damp * mx.sin(y), damp * mx.cos(y)], axis=-1)


def encode_gaussian(g: FrustumGaussian, degree: int, dtype=None) -> mx.array:
    return integrated_positional_encoding(g.mean, g.cov, degree, dtype)


@dataclass
class AABB:
    lo: np.ndarray
    hi: np.ndarray

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2

    @property
    def half_extent(self) -> np.ndarray:
        return (self.hi - self.lo) / 2

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    @classmethod
    def of_points(cls, points: np.ndarray) -> "AABB":
        return cls(points.min(axis=0).astype(np.float64), points.max(axis=0).astype(np.float64))

    def inflate(self, margin: float) -> "AABB":
        return AABB(self.lo - margin, self.hi + margin)

    def scale(self, factor: float) -> "AABB":
        h = self.half_extent * factor
        return AABB(self.center - h, self.center + h)

    def contains(self, points: np.ndarray) -> np.ndarray:
        return np.all((points >= self.lo) & (points <= self.hi), axis=-1)

    def intersect_rays(
        self, origins: np.ndarray, directions: np.ndarray, min_t: float = 1e-6
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Slab test; returns (near, far, hit) per ray."""
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / directions
            ta = (self.lo - origins) * inv
            tb = (self.hi - origins) * inv
        t_lo = np.where(np.isnan(ta), -np.inf, np.minimum(ta, tb))
        t_hi = np.where(np.isnan(tb), np.inf, np.maximum(ta, tb))
        near = np.maximum(t_lo.max(axis=-1), min_t)
        far = t_hi.min(axis=-1)
        hit = far > near
        return near, far, hit

    def as_array(self) -> np.ndarray:
        return np.stack([self.lo, self.hi])


def to_encoder_range(points, box: AABB):
    """Map points of ``box`` affinely onto [-π, π] per axis (numpy or MLX input)."""
    center, half = box.center, box.half_extent
    if isinstance(points, mx.array):
        center = mx.array(center, dtype=points.dtype)
        half = mx.array(half, dtype=points.dtype)
    return (points - center) / half * np.pi


def variance_to_encoder_range(variance, box: AABB):
    """Scale (..., 3) diagonal variances consistently with ``to_encoder_range``."""
    scale = (np.pi / box.half_extent) ** 2
    if isinstance(variance, mx.array):
        scale = mx.array(scale, dtype=variance.dtype)
    return variance * scale
