import math

import numpy as np
import pytest

from nsmae import ndgrad as ng
from nsmae.geometry import GridSpec, Ray, RayBatch
from nsmae.renderer import (FeatureVolume, NeuralField, PointField, composite, init_render_params,
                            query_field, render_color, render_depth, render_modality, render_view,
                            trilinear_index)
from nsmae.synth import Primitive, SceneSpec, oracle_render

GRID = GridSpec((0.0, -1.0, -1.0), (4.0, 1.0, 1.0), (0.5, 0.5, 0.5))


def x_rays(n=1, delta=0.1, n_samples=10, near=0.0, y=None):
    y = np.zeros(n) if y is None else np.asarray(y)
    origins = np.stack([np.zeros(n), y, np.zeros(n)], axis=1)
    return RayBatch(origins, np.tile([1.0, 0.0, 0.0], (n, 1)), near, delta, n_samples, "PER",
                    np.zeros((n, 2), dtype=np.int64))


def tau_field(taus, colors, delta):
    """Field giving optical thickness ``taus[i]`` and color ``colors[i]`` in sample interval i along +x."""
    taus, colors = np.asarray(taus, float), np.asarray(colors, float)

    def fn(p, d):
        i = np.clip(np.floor(p[:, 0] / delta).astype(int), 0, len(taus) - 1)
        return taus[i] / delta, colors[i]

    return PointField(fn)


class TestCompositing:
    def test_vacuum(self):
        rays = x_rays(3)
        m = render_modality(rays, tau_field(np.zeros(10), np.ones((10, 3)), 0.1), "color")
        np.testing.assert_array_equal(m.value, 0.0)
        np.testing.assert_array_equal(m.weights, 0.0)
        np.testing.assert_array_equal(m.final_transmittance, 1.0)

    def test_opaque_first_sample(self):
        c = np.zeros((10, 3))
        c[0] = (0.2, 0.4, 0.9)
        value, _ = render_color(x_rays(), tau_field([20.0] + [0.0] * 9, c, 0.1))
        np.testing.assert_allclose(value[0], c[0], atol=1e-8)

    def test_half_then_opaque(self):
        c = np.zeros((10, 3))
        c[0], c[1] = (1.0, 0.0, 0.0), (0.0, 1.0, 0.0)
        value, _ = render_color(x_rays(), tau_field([math.log(2.0), 20.0] + [0.0] * 8, c, 0.1))
        eps = 0.5 * math.exp(-20.0)
        np.testing.assert_allclose(value[0], [0.5, 0.5 - eps, 0.0], atol=1e-15)
        assert eps < 1e-8

    def test_depth_opaque_first_is_zero(self):
        d, _ = render_depth(x_rays(), tau_field([50.0] + [0.0] * 9, np.zeros((10, 3)), 0.1))
        np.testing.assert_allclose(d, 0.0, atol=1e-20)

    @pytest.mark.parametrize("k", [1, 4, 9])
    def test_depth_opaque_kth(self, k):
        taus = np.zeros(10)
        taus[k - 1] = 800.0
        d, _ = render_depth(x_rays(delta=0.25), tau_field(taus, np.zeros((10, 3)), 0.25))
        np.testing.assert_allclose(d, (k - 1) * 0.25, rtol=1e-14)

    def test_partition_of_unity(self):
        rng = np.random.default_rng(0)
        sigma = rng.gamma(0.5, 3.0, size=(500, 40)) * (rng.uniform(size=(500, 40)) < 0.5)
        T, w, T_final = composite(sigma, 0.07)
        np.testing.assert_allclose(w.sum(axis=1) + T_final, 1.0, atol=1e-12)
        np.testing.assert_array_equal(T[:, 0], 1.0)

    def test_single_ray_accepted(self):
        ray = Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]), 0.0, 0.1, 10)
        value, m = render_color(ray, tau_field(np.zeros(10), np.ones((10, 3)), 0.1))
        assert value.shape == (1, 3)


class TestHeads:
    def field(self):
        rng = np.random.default_rng(1)
        return tau_field(rng.uniform(0, 0.5, 10), rng.uniform(size=(10, 3)), 0.1)

    def test_opacity(self):
        m = render_modality(x_rays(2), self.field(), "opacity")
        np.testing.assert_allclose(m.value, 1.0 - m.final_transmittance, rtol=1e-14)

    def test_cumulative_distance_head_is_depth(self):
        rays = x_rays(2)
        custom = render_modality(rays, self.field(), lambda p: (p[..., :1] - 0.05))
        depth = render_modality(rays, self.field(), "depth")
        np.testing.assert_allclose(custom.value[:, 0], depth.value, atol=1e-15)

    def test_channel_head(self):
        rays = x_rays(2)
        fld = self.field()
        c0 = render_modality(rays, fld, lambda p: fld.fn(p.reshape(-1, 3), None)[1][:, :1].reshape(2, 10, 1))
        col = render_modality(rays, fld, "color")
        np.testing.assert_array_equal(c0.value[:, 0], col.value[:, 0])

    def test_unknown_head(self):
        with pytest.raises(ValueError, match="head"):
            render_modality(x_rays(), self.field(), "normals")


class TestSlab:
    def test_slab_matches_oracle_within_two_percent(self):
        scene = SceneSpec([Primitive("box", (2.0, 0.0, 0.0), (0.5, 1.0, 1.0), 1.5, (0.3, 0.6, 0.9))])
        rays = x_rays(delta=0.05, n_samples=100)
        color, _ = render_color(rays, PointField(scene.field))
        depth, _ = render_depth(rays, PointField(scene.field))
        ref = oracle_render(rays, scene)
        np.testing.assert_allclose(color, ref.color, rtol=0.02)
        np.testing.assert_allclose(depth, ref.depth, rtol=0.02)


class TestNeuralField:
    def volume(self, C=4, seed=0):
        vals = np.random.default_rng(seed).normal(size=(GRID.n_voxels, C))
        return FeatureVolume(GRID, vals)

    def test_interpolation_at_centers(self):
        vol = self.volume()
        centers = GRID.voxel_centers()
        field = NeuralField(vol, {})
        np.testing.assert_array_equal(field.features_at(centers), vol.values)

    def test_outside_grid_is_vacuum(self):
        vol = self.volume()
        params = init_render_params(np.random.default_rng(0), 4, 6)
        sigma, color = query_field(vol, np.array([[-1.0, 0.0, 0.0], [9.0, 0.0, 0.0]]), (1.0, 0.0, 0.0), params)
        np.testing.assert_array_equal(sigma, 0.0)
        np.testing.assert_array_equal(color, 0.0)

    def test_sigma_gradient_wrt_corner_features(self):
        rng = np.random.default_rng(3)
        vol0 = rng.normal(size=(GRID.n_voxels, 2))
        params = init_render_params(rng, 2, 5)
        x = np.array([[1.3, 0.1, -0.2]])
        tape = ng.Tape()
        v = tape.input(vol0)
        sigma, _ = query_field(FeatureVolume(GRID, v), x, (1.0, 0.0, 0.0), params)
        ng.sum_(sigma)
        index = trilinear_index(GRID, x)
        assert np.count_nonzero(index.weights) == 8
        assert ng.check_gradients(tape, [vol0]) < 1e-5

    def test_stacked_volumes(self):
        a, b = self.volume(seed=1), self.volume(seed=2)
        both = FeatureVolume(GRID, np.concatenate([a.values, b.values]))
        params = init_render_params(np.random.default_rng(0), 4, 6)
        rays = x_rays(2, delta=0.2, n_samples=20, y=[0.1, 0.1])
        out = render_view(rays, both, params, ("color",), ray_volume=np.array([0, 1]))
        ref_a = render_view(rays.subset([0]), a, params, ("color",))
        ref_b = render_view(rays.subset([1]), b, params, ("color",))
        np.testing.assert_allclose(out["color"].value, np.concatenate([ref_a["color"].value, ref_b["color"].value]),
                                   atol=1e-14)


class TestRenderView:
    def test_empty_batch(self):
        rays = x_rays(0)
        out = render_view(rays, FeatureVolume(GRID, np.zeros((GRID.n_voxels, 2))), {})
        assert out["color"].value.shape == (0, 3) and out["depth"].value.shape == (0,)

    def test_rays_missing_grid(self):
        rays = RayBatch(np.array([[0.0, 5.0, 0.0]]), np.array([[1.0, 0.0, 0.0]]), 0.0, 0.2, 20, "PER",
                        np.zeros((1, 2), dtype=np.int64))
        params = init_render_params(np.random.default_rng(0), 2, 4)
        out = render_view(rays, FeatureVolume(GRID, np.ones((GRID.n_voxels, 2))), params)
        np.testing.assert_array_equal(out["color"].value, 0.0)
        np.testing.assert_array_equal(out["depth"].value, 0.0)

    def test_bev_renders_depth_only(self):
        rays = RayBatch(np.array([[1.0, 0.0, 1.0]]), np.array([[0.0, 0.0, -1.0]]), 0.0, 0.25, 8, "BEV",
                        np.zeros((1, 2), dtype=np.int64))
        params = init_render_params(np.random.default_rng(0), 2, 4)
        out = render_view(rays, FeatureVolume(GRID, np.ones((GRID.n_voxels, 2))), params)
        assert set(out) == {"depth"}
