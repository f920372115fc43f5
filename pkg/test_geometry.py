import mlx.core as mx
import numpy as np
import pytest

from mlx_handnerf.common.errors import GeometryError
from mlx_handnerf.geometry import (
    AABB,
    Ray,
    RigidTransform,
    blend_transforms,
    frustum_to_gaussian,
    integrated_positional_encoding,
    nearest_rotation,
    positional_encoding,
    to_encoder_range,
    variance_to_encoder_range,
)


def _np(x):
    return np.array(x)


class TestPositionalEncoding:
    def test_zero_input(self):
        pe = _np(positional_encoding(np.zeros(3), 2, mx.float64))
        assert pe.shape == (12,)
        np.testing.assert_array_equal(pe[:6], 0.0)
        np.testing.assert_array_equal(pe[6:], 1.0)

    def test_quarter_period(self):
        pe = _np(positional_encoding(np.array([np.pi / 2]), 1, mx.float64))
        np.testing.assert_allclose(pe, [1.0, 0.0], atol=1e-12)

    def test_matches_direct_evaluation(self):
        x = np.array([0.3, -0.7])
        sins, coss = [], []
        for j in range(3):
            for xi in x:
                sins.append(np.sin(2.0**j * xi))
                coss.append(np.cos(2.0**j * xi))
        pe = _np(positional_encoding(x, 3, mx.float64))
        np.testing.assert_allclose(pe, sins + coss, atol=1e-12)

    def test_bounded(self, rng):
        pe = _np(positional_encoding(rng.uniform(-np.pi, np.pi, (100, 3)), 6, mx.float64))
        assert np.all(np.abs(pe) <= 1.0)


class TestIntegratedEncoding:
    def test_zero_covariance_is_plain_encoding(self):
        mean = np.array([0.3, 0.1, -0.2])
        ipe = _np(integrated_positional_encoding(mean, np.zeros((3, 3)), 4, mx.float64))
        pe = _np(positional_encoding(mean, 4, mx.float64))
        np.testing.assert_allclose(ipe, pe, atol=1e-12)

    def test_infinite_variance_vanishes(self):
        ipe = _np(integrated_positional_encoding(np.array([0.3, 0.1, -0.2]), np.full(3, 1e6), 3, mx.float64))
        np.testing.assert_allclose(ipe, 0.0, atol=1e-6)

    def test_expected_sine_matches_monte_carlo(self):
        ipe = _np(integrated_positional_encoding(np.array([0.5, 0.0, 0.0]), np.array([0.04, 0.0, 0.0]), 1, mx.float64))
        np.testing.assert_allclose(ipe[0], np.sin(0.5) * np.exp(-0.02), atol=1e-12)
        draws = np.sin(np.random.default_rng(7).normal(0.5, 0.2, 1_000_000))
        stderr = draws.std() / np.sqrt(len(draws))
        assert abs(draws.mean() - ipe[0]) < 4 * stderr

    def test_attenuation_never_amplifies(self, rng):
        mean = rng.uniform(-np.pi, np.pi, (50, 3))
        var = rng.uniform(0.0, 0.5, (50, 3))
        ipe = _np(integrated_positional_encoding(mean, var, 5, mx.float64))
        pe = _np(positional_encoding(mean, 5, mx.float64))
        assert np.all(np.abs(ipe) <= np.abs(pe) + 1e-15)


class TestFrustum:
    def test_point_limit(self):
        ray = Ray(np.array([0.1, -0.2, 0.3]), np.array([0.0, 0.0, 1.0]), base_radius=0.0)
        g = frustum_to_gaussian(ray, 1.0, 1.0 + 1e-7)
        np.testing.assert_allclose(g.mean, [0.1, -0.2, 1.3], atol=1e-6)
        np.testing.assert_allclose(g.cov, 0.0, atol=1e-6)

    def test_axis_aligned_covariance_is_diagonal(self):
        ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), base_radius=0.01)
        g = frustum_to_gaussian(ray, 2.0, 3.0)
        np.testing.assert_allclose(g.cov - np.diag(np.diag(g.cov)), 0.0, atol=1e-15)
        assert g.cov[0, 0] == pytest.approx(g.cov[1, 1])
        assert 2.0 < g.mean[2] < 3.0

    def test_moments_match_monte_carlo(self):
        radius, t0, t1 = 0.01, 2.0, 3.0
        g = frustum_to_gaussian(Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), base_radius=radius), t0, t1)
        sampler = np.random.default_rng(3)
        n = 1_000_000
        # volume element of the cone grows with t²
        t = (t0**3 + sampler.uniform(size=n) * (t1**3 - t0**3)) ** (1 / 3)
        rho = radius * t * np.sqrt(sampler.uniform(size=n))
        x = rho * np.cos(sampler.uniform(0, 2 * np.pi, n))
        assert g.mean[2] == pytest.approx(t.mean(), rel=1e-2)
        assert g.cov[2, 2] == pytest.approx(t.var(), rel=1e-2)
        assert g.cov[0, 0] == pytest.approx(np.mean(x**2), rel=1e-2)

    def test_covariance_is_psd(self, rng):
        for _ in range(1000):
            d = rng.normal(size=3)
            ray = Ray(rng.normal(size=3), d / np.linalg.norm(d), base_radius=rng.uniform(0, 0.05))
            t0 = rng.uniform(0.1, 5.0)
            g = frustum_to_gaussian(ray, t0, t0 + rng.uniform(1e-3, 2.0))
            np.testing.assert_allclose(g.cov, g.cov.T, atol=1e-15)
            assert np.linalg.eigvalsh(g.cov).min() >= -1e-9

    @pytest.mark.parametrize("t0,t1", [(2.0, 2.0), (3.0, 2.0), (0.0, 1.0)])
    def test_rejects_bad_interval(self, t0, t1):
        ray = Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]))
        with pytest.raises(GeometryError):
            frustum_to_gaussian(ray, t0, t1)


class TestBlendTransforms:
    def _random_transforms(self, rng, n=16):
        return [RigidTransform.from_axis_angle(rng.normal(size=3), rng.normal(size=3)) for _ in range(n)]

    def test_identity(self, rng):
        w = rng.dirichlet(np.ones(16))
        out = blend_transforms(w, [RigidTransform.identity()] * 16)
        np.testing.assert_allclose(out, np.eye(3, 4), atol=1e-12)

    def test_one_hot(self, rng):
        transforms = self._random_transforms(rng)
        w = np.zeros(16)
        w[5] = 1.0
        np.testing.assert_array_equal(blend_transforms(w, transforms), transforms[5].affine())

    def test_opposite_translations_cancel(self):
        transforms = [RigidTransform.translate([1, 0, 0]), RigidTransform.translate([-1, 0, 0])]
        transforms += [RigidTransform.identity()] * 14
        w = np.zeros(16)
        w[:2] = 0.5
        np.testing.assert_allclose(blend_transforms(w, transforms), np.eye(3, 4), atol=1e-15)

    def test_linear_in_weights(self, rng):
        transforms = self._random_transforms(rng)
        a, b = rng.dirichlet(np.ones(16)), rng.dirichlet(np.ones(16))
        alpha = 0.3
        lhs = blend_transforms(alpha * a + (1 - alpha) * b, transforms)
        rhs = alpha * blend_transforms(a, transforms) + (1 - alpha) * blend_transforms(b, transforms)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_rejects_bad_weight_sum(self):
        with pytest.raises(GeometryError):
            blend_transforms(np.full(16, 0.07), [RigidTransform.identity()] * 16)

    def test_rejects_negative_weights(self):
        w = np.zeros(16)
        w[0], w[1] = 1.5, -0.5
        with pytest.raises(GeometryError):
            blend_transforms(w, [RigidTransform.identity()] * 16)


class TestRigidTransform:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(GeometryError):
            RigidTransform(np.diag([1.0, 1.0, 1.1]), np.zeros(3))

    def test_rejects_reflection(self):
        with pytest.raises(GeometryError):
            RigidTransform(np.diag([-1.0, 1.0, 1.0]), np.zeros(3))

    def test_inverse_composes_to_identity(self, rng):
        t = RigidTransform.from_axis_angle(rng.normal(size=3), rng.normal(size=3))
        ident = t.compose(t.inverse())
        np.testing.assert_allclose(ident.matrix(), np.eye(4), atol=1e-12)

    def test_nearest_rotation_is_proper(self, rng):
        m = rng.normal(size=(20, 3, 3))
        r = nearest_rotation(m)
        np.testing.assert_allclose(np.linalg.det(r), 1.0, atol=1e-10)
        np.testing.assert_allclose(np.swapaxes(r, -1, -2) @ r, np.broadcast_to(np.eye(3), r.shape), atol=1e-10)


def test_ray_direction_must_be_unit():
    with pytest.raises(GeometryError):
        Ray(np.zeros(3), np.array([1.0, 1.0, 0.0]))


class TestAABB:
    def test_slab_intersection(self):
        box = AABB(-np.ones(3), np.ones(3))
        near, far, hit = box.intersect_rays(
            np.array([[0.0, 0.0, -5.0], [0.0, 3.0, -5.0]]), np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
        )
        assert hit.tolist() == [True, False]
        assert near[0] == pytest.approx(4.0)
        assert far[0] == pytest.approx(6.0)

    def test_encoder_range_maps_corners_to_pi(self):
        box = AABB(np.array([0.0, -2.0, 1.0]), np.array([2.0, 2.0, 3.0]))
        corners = np.stack([box.lo, box.hi, box.center])
        mapped = to_encoder_range(corners, box)
        np.testing.assert_allclose(mapped, [[-np.pi] * 3, [np.pi] * 3, [0.0] * 3], atol=1e-12)
        mapped_mx = _np(to_encoder_range(mx.array(corners, dtype=mx.float64), box))
        np.testing.assert_allclose(mapped_mx, mapped, atol=1e-12)

    def test_variance_scaling(self):
        box = AABB(-2 * np.ones(3), 2 * np.ones(3))
        np.testing.assert_allclose(variance_to_encoder_range(np.ones(3), box), (np.pi / 2) ** 2)
