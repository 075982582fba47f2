import dataclasses
import json

import numpy as np
import pytest

import pipeline
from core import normalize_observations
from errors import ConfigError, PipelineDiverged
from pipeline import (PipelineConfig, evaluate_distance_sweep, load_config, reconstruct,
                      reconstruct_parallel_baseline, run_synthetic)
from renderer import make_bumpy_scene, make_ring_rig, make_sphere_scene, render, render_parallel

FAST = PipelineConfig(max_global_iters=3, keypoints=150)


@pytest.fixture(scope="module")
def sphere_run():
    scene = make_sphere_scene(0.3, make_ring_rig(5, 1.0), size=64)
    obs = normalize_observations(render(scene))
    return scene, reconstruct(obs, scene.proxy_truth, FAST, truth=scene.depth_truth())


class TestConfig:

    def test_default_file_matches_defaults(self):
        assert load_config() == PipelineConfig()

    def test_overrides(self, tmp_path):
        path = tmp_path / "cfg.toml"
        path.write_text("[calibration]\nd = 3.0\n\n[filter]\nwindow = 6\n\n[pipeline]\nkeypoints = 50\n")
        config = load_config(str(path))
        assert config.calibration.d == 3.0
        assert config.filter.window == 6
        assert config.keypoints == 50
        assert config.shadow.tau == 0.4

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "cfg.toml"
        path.write_text("[shadow]\ntau = 0.3\nbogus = 1\n")
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_unknown_section(self, tmp_path):
        path = tmp_path / "cfg.toml"
        path.write_text("[render]\nsize = 3\n")
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "nope.toml"))

    def test_with_distance(self):
        assert PipelineConfig().with_distance(4.0).calibration.d == 4.0


class TestReconstruct:

    def test_depth_close_to_truth(self, sphere_run):
        _, result = sphere_run
        assert result.report.depth_errors[-1] < 0.005

    def test_exact_proxy_settles_quickly(self, sphere_run):
        _, result = sphere_run
        report = result.report
        assert report.converged
        assert len(report.iterations) <= 2
        assert np.all(np.diff(report.depth_errors) <= 0.0)

    def test_report(self, sphere_run):
        _, result = sphere_run
        report = result.report
        assert 1 <= len(report.iterations) <= FAST.max_global_iters
        assert report.iterations[0].max_position_change is None
        assert report.stop_reason in ("light positions settled", "proxy misfit stopped decreasing", "iteration cap")
        data = json.loads(json.dumps(report.to_dict()))
        assert len(data["iterations"]) == len(report.iterations)
        assert len(data["iterations"][0]["rig"]["lights"]) == 5
        assert data["iterations"][0]["misfit"] >= 0.0

    def test_rig_near_truth(self, sphere_run):
        scene, result = sphere_run
        error = np.linalg.norm(result.rig.positions - scene.rig_truth.positions, axis=1)
        assert np.all(error < 0.01)

    def test_outputs_share_the_mask(self, sphere_run):
        scene, result = sphere_run
        recon = scene.proxy_truth.recon_mask
        np.testing.assert_array_equal(result.depth.mask, recon)
        np.testing.assert_array_equal(result.gradients.mask, recon)
        assert result.valid.valid.shape == recon.shape + (5,)

    def test_deterministic(self, sphere_run):
        scene, result = sphere_run
        obs = normalize_observations(render(scene))
        again = reconstruct(obs, scene.proxy_truth, FAST, truth=scene.depth_truth())
        np.testing.assert_array_equal(again.depth.depth, result.depth.depth)

    def test_rising_error_aborts(self, monkeypatch):
        scene = make_sphere_scene(0.3, make_ring_rig(5, 1.0), size=24)
        obs = normalize_observations(render(scene))
        errors = iter([0.01, 0.02, 0.03, 0.04, 0.05])
        misfits = iter([5.0, 4.0, 3.0, 2.0, 1.0])
        monkeypatch.setattr(pipeline, "depth_error", lambda recon, truth: next(errors))
        monkeypatch.setattr(pipeline, "data_misfit", lambda result, keypoints: next(misfits))
        config = dataclasses.replace(FAST, max_global_iters=6, global_tol=0.0, keypoints=80)
        with pytest.raises(PipelineDiverged):
            reconstruct(obs, scene.proxy_truth, config, truth=scene.depth_truth())

    def test_noisy_proxy_and_images(self):
        scene = make_bumpy_scene(2.0, 0.03, make_ring_rig(5, 1.0), size=32)
        result = run_synthetic(scene, FAST, proxy_sigma=2.0, noise_sigma=0.005, seed=1)
        assert np.all(np.isfinite(result.depth.depth[result.depth.mask]))
        assert result.report.depth_errors[-1] < 0.25

    def test_single_iteration_is_one_pass(self):
        scene = make_bumpy_scene(2.0, 0.03, make_ring_rig(5, 1.0), size=32)
        once = run_synthetic(scene, dataclasses.replace(FAST, max_global_iters=1), proxy_sigma=10.0, seed=3)
        longer = run_synthetic(scene, FAST, proxy_sigma=10.0, seed=3)
        assert len(once.report.iterations) == 1
        assert once.report.stop_reason == "iteration cap"
        assert once.report.depth_errors[0] == longer.report.depth_errors[0]
        np.testing.assert_array_equal(once.rig.positions, longer.report.iterations[0].rig.positions)

    def test_feedback_improves_a_perturbed_proxy(self):
        scene = make_bumpy_scene(2.0, 0.03, make_ring_rig(5, 1.0), size=32)
        config = dataclasses.replace(PipelineConfig(), keypoints=150)
        improved = 0
        for seed in range(10):
            errors = run_synthetic(scene, config, proxy_sigma=10.0, seed=seed).report.depth_errors
            improved += errors[-1] < errors[0]
        assert improved >= 9


class TestParallelBaseline:

    def test_exact_under_directional_lights(self):
        scene = make_sphere_scene(0.3, make_ring_rig(3, 1.0), size=32)
        L = np.array([[0.0, 0.0, 1.0], [0.4, 0.0, 0.9], [0.0, -0.4, 0.9], [-0.3, 0.3, 0.9]])
        obs = normalize_observations(render_parallel(scene, L))
        result = reconstruct_parallel_baseline(obs, scene.proxy_truth, scene.albedo, FAST)
        expected = L / np.linalg.norm(L, axis=1, keepdims=True)
        np.testing.assert_allclose(result.directions, expected, atol=1e-6)
        assert result.rig is None
        assert pipeline.depth_error(result.depth, scene.depth_truth()) < 0.01


class TestDistanceSweep:

    def test_table_and_trends(self):
        table = evaluate_distance_sweep("bumpy", [1.0, 3.0, 10.0], FAST, n_lights=5, size=32)
        assert list(table.columns) == ["distance", "rig_distance", "near_point_error", "parallel_error"]
        assert len(table) == 3
        np.testing.assert_allclose(table["rig_distance"] / table["distance"], table["rig_distance"].iloc[0])

        near = table["near_point_error"].to_numpy()
        parallel = table["parallel_error"].to_numpy()
        assert np.all(near <= parallel)
        assert np.all(np.diff(parallel) <= 0.0)
        # flat up to solver precision once the rig is recovered exactly
        assert np.all(np.diff(near) <= 1e-4)
        assert parallel[0] >= 2.0 * near[0]

    def test_bad_inputs(self):
        with pytest.raises(ConfigError):
            evaluate_distance_sweep("bumpy", [0.0], FAST)
        with pytest.raises(ConfigError):
            evaluate_distance_sweep("teapot", [1.0], FAST)
