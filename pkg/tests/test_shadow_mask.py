import numpy as np
import pytest

from core import ImagePlane, ObservationStack
from errors import ConfigError, InvalidGeometry
from renderer import add_intensity_noise, cast_shadow_masks, make_bumpy_scene, make_ring_rig, render
from shadow_mask import ShadowConfig, albedo_per_light, valid_lights


class TestAlbedoPerLight:

    def test_exact_on_lit_pixels(self, sphere_scene):
        obs = render(sphere_scene)
        proxy = sphere_scene.proxy_truth
        albedos = albedo_per_light(obs, proxy, sphere_scene.rig_truth)
        defined = np.isfinite(albedos)
        assert defined.any()
        expected = np.broadcast_to(sphere_scene.albedo[..., None], albedos.shape)
        np.testing.assert_allclose(albedos[defined], expected[defined], rtol=1e-9)
        assert not defined[~proxy.recon_mask].any()

    def test_light_count_mismatch(self, sphere_scene):
        obs = render(sphere_scene)
        with pytest.raises(InvalidGeometry):
            albedo_per_light(obs, sphere_scene.proxy_truth, make_ring_rig(3, 1.0))


class TestValidLights:

    def test_cast_shadows_rejected(self):
        rig = make_ring_rig(5, 1.0, elevation_deg=20.0)
        scene = make_bumpy_scene(2.0, 0.06, rig, size=48, cast_shadows=True)
        obs = render(scene)
        proxy = scene.proxy_truth
        mask = valid_lights(albedo_per_light(obs, proxy, rig), proxy, rig, ShadowConfig(tau=0.4))

        shadows = cast_shadow_masks(scene)
        lit = mask.facing & ~shadows
        assert shadows.sum() > 0
        recall = (shadows & ~mask.valid).sum() / shadows.sum()
        false_rejection = (lit & ~mask.valid).sum() / lit.sum()
        assert recall >= 0.95
        assert false_rejection <= 0.05

    def test_back_facing_never_valid(self, sphere_scene):
        obs = render(sphere_scene)
        proxy = sphere_scene.proxy_truth
        mask = valid_lights(albedo_per_light(obs, proxy, sphere_scene.rig_truth), proxy, sphere_scene.rig_truth)
        assert not np.any(mask.valid & ~mask.facing)
        assert not mask.valid[~proxy.recon_mask].any()
        assert mask.valid_count.shape == proxy.plane.shape

    def test_dark_light_is_dropped(self, sphere_scene):
        obs = render(sphere_scene)
        proxy = sphere_scene.proxy_truth
        dimmed = np.array(obs.intensities)
        dimmed[..., 2] *= 0.3
        rig = sphere_scene.rig_truth
        mask = valid_lights(albedo_per_light(ObservationStack(obs.plane, dimmed), proxy, rig), proxy, rig)
        facing_all = mask.facing.all(axis=2) & proxy.recon_mask
        assert facing_all.any()
        assert not mask.valid[facing_all, 2].any()
        assert mask.valid[facing_all][:, [0, 1, 3, 4]].all()

    def test_uniform_albedos_fall_back_to_facing(self, sphere_scene):
        proxy = sphere_scene.proxy_truth
        rig = sphere_scene.rig_truth
        albedos = np.full(proxy.plane.shape + (rig.n_lights,), 0.5)
        mask = valid_lights(albedos, proxy, rig)
        recon = proxy.recon_mask
        np.testing.assert_array_equal(mask.valid[recon], mask.facing[recon])

    def test_tau_bounds(self):
        with pytest.raises(ConfigError):
            ShadowConfig(tau=1.0)
        with pytest.raises(ConfigError):
            ShadowConfig(tau=-0.1)

    def test_plane_mismatch(self, sphere_scene):
        obs = ObservationStack(ImagePlane(4, 4), np.ones((4, 4, 5)))
        with pytest.raises(InvalidGeometry):
            albedo_per_light(obs, sphere_scene.proxy_truth, sphere_scene.rig_truth)


class TestShadowInvariants:

    def _noisy(self, scene):
        return add_intensity_noise(render(scene), 0.02, seed=4)

    def test_scale_invariant(self, sphere_scene):
        obs = self._noisy(sphere_scene)
        proxy, rig = sphere_scene.proxy_truth, sphere_scene.rig_truth
        base = valid_lights(albedo_per_light(obs, proxy, rig), proxy, rig)
        scaled = ObservationStack(obs.plane, 4.0 * obs.intensities)
        again = valid_lights(albedo_per_light(scaled, proxy, rig), proxy, rig)
        np.testing.assert_array_equal(again.valid, base.valid)

    def test_smaller_tau_never_keeps_more(self, sphere_scene):
        obs = self._noisy(sphere_scene)
        proxy, rig = sphere_scene.proxy_truth, sphere_scene.rig_truth
        albedos = albedo_per_light(obs, proxy, rig)
        loose = valid_lights(albedos, proxy, rig, ShadowConfig(tau=0.6))
        tight = valid_lights(albedos, proxy, rig, ShadowConfig(tau=0.1))
        assert not np.any(tight.valid & ~loose.valid)
