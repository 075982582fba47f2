import numpy as np
import pytest

from calibration import angular_error_deg, shading
from errors import InvalidGeometry
from renderer import (add_intensity_noise, cast_shadow_masks, make_bumpy_scene, make_plane_scene,
                      make_ring_rig, make_sphere_scene, perturb_proxy, render, render_parallel,
                      scale_rig, scene_unit)


class TestRigs:

    def test_ring_rig_layout(self):
        rig = make_ring_rig(5, 2.0, elevation_deg=30.0)
        np.testing.assert_allclose(rig.positions[0], [0.0, 0.0, 2.0])
        np.testing.assert_allclose(np.linalg.norm(rig.positions, axis=1), 2.0)
        np.testing.assert_allclose(rig.positions[1:, 2], 2.0 * np.sin(np.radians(30.0)))
        np.testing.assert_array_equal(rig.betas, np.ones(5))

    def test_scale_rig_keeps_directions(self):
        rig = make_ring_rig(4, 1.0)
        far = scale_rig(rig, 10.0)
        np.testing.assert_allclose(far.positions, 10.0 * rig.positions)

    def test_bad_rig(self):
        with pytest.raises(InvalidGeometry):
            make_ring_rig(0, 1.0)
        with pytest.raises(InvalidGeometry):
            make_ring_rig(3, 1.0, elevation_deg=0.0)


class TestScenes:

    def test_sphere_masks(self, sphere_scene):
        proxy = sphere_scene.proxy_truth
        assert proxy.recon_mask.any() and not proxy.recon_mask.all()
        np.testing.assert_array_equal(proxy.smooth_mask, proxy.recon_mask)
        assert not proxy.hairy_mask.any()
        assert scene_unit(sphere_scene) == pytest.approx(
            proxy.recon_mask.any(axis=1).sum() * sphere_scene.plane.pixel_scale)

    def test_bumpy_hairy_region(self, bumpy_scene):
        proxy = bumpy_scene.proxy_truth
        assert proxy.hairy_mask.any()
        assert not np.any(proxy.hairy_mask & proxy.smooth_mask)
        assert proxy.recon_mask.all()

    def test_plane_scene_is_flat(self, ring_rig):
        scene = make_plane_scene(ring_rig, size=16)
        assert not scene.proxy_truth.hairy_mask.any()
        np.testing.assert_allclose(scene.proxy_truth.normals[..., 2], 1.0)
        assert scene.depth_truth().depth_range == 0.0

    def test_default_albedo_range(self, sphere_scene):
        values = sphere_scene.albedo[sphere_scene.proxy_truth.recon_mask]
        assert values.min() >= 0.3 and values.max() <= 0.9
        assert np.ptp(values) > 0.05


class TestRender:

    def test_lambertian_values(self, sphere_scene):
        obs = render(sphere_scene)
        proxy = sphere_scene.proxy_truth
        recon = proxy.recon_mask
        expected = np.maximum(0.0, sphere_scene.albedo[recon][:, None]
                              * shading(proxy.normals[recon], proxy.positions[recon], sphere_scene.rig_truth))
        np.testing.assert_allclose(obs.intensities[recon], expected)
        assert np.all(obs.intensities[~recon] == 0.0)

    def test_plane_casts_no_shadows(self, ring_rig):
        scene = make_plane_scene(ring_rig, size=24)
        assert not cast_shadow_masks(scene).any()

    def test_bumps_cast_shadows_at_low_elevation(self):
        rig = make_ring_rig(5, 1.0, elevation_deg=20.0)
        scene = make_bumpy_scene(2.0, 0.06, rig, size=48, cast_shadows=True)
        shadows = cast_shadow_masks(scene)
        assert shadows.any()
        obs = render(scene)
        assert np.all(obs.intensities[shadows] == 0.0)

    def test_parallel_render(self, sphere_scene):
        L = np.array([[0.0, 0.0, 1.0]])
        obs = render_parallel(sphere_scene, L)
        recon = sphere_scene.proxy_truth.recon_mask
        np.testing.assert_allclose(obs.intensities[recon, 0],
                                   sphere_scene.albedo[recon] * sphere_scene.proxy_truth.normals[recon, 2])

    def test_noise_is_seeded_and_clamped(self, sphere_scene):
        obs = render(sphere_scene)
        a = add_intensity_noise(obs, 0.05, seed=3)
        b = add_intensity_noise(obs, 0.05, seed=3)
        np.testing.assert_array_equal(a.intensities, b.intensities)
        assert a.intensities.min() >= 0.0
        assert add_intensity_noise(obs, 0.0, seed=3) is obs


class TestPerturbProxy:

    def test_mean_angle_close_to_target(self, sphere_scene):
        truth = sphere_scene.proxy_truth
        noisy = perturb_proxy(truth, 5.0, 4.0, seed=1)
        recon = truth.recon_mask
        error = angular_error_deg(noisy.normals[recon], truth.normals[recon])
        assert 3.5 < error.mean() < 6.5
        np.testing.assert_allclose(np.linalg.norm(noisy.normals[recon], axis=-1), 1.0, atol=1e-9)

    def test_zero_sigma_returns_truth(self, sphere_scene):
        assert perturb_proxy(sphere_scene.proxy_truth, 0.0, 4.0, seed=0) is sphere_scene.proxy_truth

    def test_deterministic(self, sphere_scene):
        a = perturb_proxy(sphere_scene.proxy_truth, 3.0, 4.0, seed=9)
        b = perturb_proxy(sphere_scene.proxy_truth, 3.0, 4.0, seed=9)
        np.testing.assert_array_equal(a.normals, b.normals)
        np.testing.assert_array_equal(a.positions, b.positions)


class TestRenderInvariants:

    def test_linear_in_beta_and_albedo(self, sphere_scene):
        base = render(sphere_scene).intensities
        rig = sphere_scene.rig_truth
        brighter = sphere_scene.with_rig(type(rig)(rig.positions, 2.0 * rig.betas))
        np.testing.assert_allclose(render(brighter).intensities, 2.0 * base)

    def test_zero_exactly_where_back_facing(self, sphere_scene):
        obs = render(sphere_scene)
        proxy = sphere_scene.proxy_truth
        recon = proxy.recon_mask
        s = shading(proxy.normals[recon], proxy.positions[recon], sphere_scene.rig_truth)
        np.testing.assert_array_equal(obs.intensities[recon] == 0.0, s <= 0.0)
