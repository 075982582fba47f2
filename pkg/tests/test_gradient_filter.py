import numpy as np
import pytest

from core import GradientField, ImagePlane
from errors import ConfigError, EmptyRegion, InvalidGeometry
from gradient_filter import (EPS_Z, ExtremumFilter, FilterConfig, bidirectional_extremum_filter,
                             low_pass_filter, normals_to_gradients)


def _smooth_field(size=32, seed=0):
    plane = ImagePlane(size, size, 1.0 / size)
    x, y = plane.pixel_grid()
    gx = 0.2 * np.sin(4.0 * x) + 0.05 * np.cos(3.0 * y)
    gy = 0.1 * np.cos(5.0 * y)
    return GradientField(plane, gx, gy, np.ones(plane.shape, bool))


class TestNormalsToGradients:

    def test_plane_slope(self):
        plane = ImagePlane(4, 4)
        n = np.array([-0.3, 0.2, 1.0])
        n /= np.linalg.norm(n)
        normals = np.broadcast_to(n, (4, 4, 3))
        G = normals_to_gradients(normals, np.ones((4, 4), bool), plane)
        np.testing.assert_allclose(G.gx, 0.3)
        np.testing.assert_allclose(G.gy, -0.2)
        assert not G.clamped.any()

    def test_grazing_normals_are_clamped(self):
        plane = ImagePlane(2, 1)
        normals = np.array([[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]])
        G = normals_to_gradients(normals, np.ones((1, 2), bool), plane)
        assert G.clamped[0, 0] and not G.clamped[0, 1]
        cap = np.sqrt(1.0 - EPS_Z ** 2) / EPS_Z
        assert G.gx[0, 0] == pytest.approx(-cap)
        assert np.all(np.isfinite(G.gx[G.mask]))

    def test_off_mask_is_nan(self):
        plane = ImagePlane(3, 3)
        mask = np.zeros((3, 3), bool)
        mask[1, 1] = True
        normals = np.zeros((3, 3, 3))
        normals[..., 2] = 1.0
        G = normals_to_gradients(normals, mask, plane)
        assert np.isnan(G.gx[0, 0]) and G.gx[1, 1] == 0.0


class TestExtremumFilter:

    def test_removes_impulses(self):
        G = _smooth_field()
        rng = np.random.default_rng(0)
        hits = rng.choice(G.mask.size, 20, replace=False)
        gx = np.array(G.gx)
        gx.flat[hits] += rng.choice([-5.0, 5.0], 20)
        noisy = G.replace(gx, G.gy)

        out = bidirectional_extremum_filter(noisy, G.mask, FilterConfig(sigma=5.0, window=10))
        assert np.max(np.abs(out.gx - G.gx)) < 0.5
        np.testing.assert_array_equal(out.gy, G.gy)

    def test_outliers_use_frozen_statistics(self):
        G = _smooth_field()
        gx = np.array(G.gx)
        gx[5, 5] = 10.0
        gx[5, 6] = 10.0
        noisy = G.replace(gx, G.gy)
        outliers_x, outliers_y = ExtremumFilter(window=4).outlier_masks(noisy, G.mask)
        assert outliers_x[5, 5] and outliers_x[5, 6]
        assert not outliers_y.any()
        out = ExtremumFilter(window=4).apply(noisy, G.mask)
        # both replaced from the input, so each median still sees the other spike
        assert abs(out.gx[5, 5]) < 1.0 and abs(out.gx[5, 6]) < 1.0

    def test_only_region_changes(self):
        G = _smooth_field()
        gx = np.array(G.gx)
        gx[3, 3] = 9.0
        gx[20, 20] = 9.0
        noisy = G.replace(gx, G.gy)
        region = np.zeros(G.mask.shape, bool)
        region[:10, :10] = True
        out = ExtremumFilter(stats_scope="mask").apply(noisy, region)
        assert out.gx[3, 3] != 9.0
        assert out.gx[20, 20] == 9.0
        np.testing.assert_array_equal(out.gx[~region], noisy.gx[~region])

    def test_constant_field_untouched(self):
        plane = ImagePlane(8, 8)
        G = GradientField(plane, np.full((8, 8), 0.3), np.zeros((8, 8)), np.ones((8, 8), bool))
        out = ExtremumFilter().apply(G, G.mask)
        np.testing.assert_array_equal(out.gx, G.gx)

    def test_window_offsets(self):
        f = ExtremumFilter(window=10)
        assert (f.before, f.after) == (5, 4)
        f = ExtremumFilter(window=3)
        assert (f.before, f.after) == (1, 1)

    def test_bad_inputs(self):
        G = _smooth_field(8)
        with pytest.raises(EmptyRegion):
            ExtremumFilter().apply(G, np.zeros(G.mask.shape, bool))
        with pytest.raises(ConfigError):
            FilterConfig(stats_scope="global")
        with pytest.raises(ConfigError):
            ExtremumFilter(sigma=0.0)
        partial = GradientField(G.plane, G.gx, G.gy, np.eye(8, dtype=bool))
        with pytest.raises(InvalidGeometry):
            ExtremumFilter().apply(partial, np.ones((8, 8), bool))


class TestLowPass:

    def test_changes_most_pixels(self):
        G = _smooth_field()
        rng = np.random.default_rng(2)
        noisy = G.replace(G.gx + rng.normal(0.0, 0.05, G.gx.shape), G.gy)
        out = low_pass_filter(noisy, G.mask)
        changed = np.abs(out.gx - noisy.gx) > 1e-12
        assert changed.mean() > 0.5

    def test_extremum_filter_is_more_local(self):
        G = _smooth_field()
        gx = np.array(G.gx)
        gx[10, 10] = 5.0
        noisy = G.replace(gx, G.gy)
        extremum = ExtremumFilter().apply(noisy, G.mask)
        low = low_pass_filter(noisy, G.mask)
        assert (np.abs(extremum.gx - noisy.gx) > 1e-12).sum() == 1
        assert (np.abs(low.gx - noisy.gx) > 1e-12).sum() > 10


class TestFilterInvariants:

    def test_idempotent_once_clean(self):
        G = _smooth_field()
        gx = np.array(G.gx)
        gx[7, 9] = -6.0
        once = ExtremumFilter().apply(G.replace(gx, G.gy), G.mask)
        twice = ExtremumFilter().apply(once, G.mask)
        np.testing.assert_array_equal(twice.gx, once.gx)
        np.testing.assert_array_equal(twice.gy, once.gy)

    def test_modified_count_matches_outliers(self):
        G = _smooth_field()
        gx = np.array(G.gx)
        gx[[2, 12, 25], [4, 17, 30]] = [4.0, -4.0, 6.0]
        noisy = G.replace(gx, G.gy)
        f = ExtremumFilter()
        out_x, _ = f.outlier_masks(noisy, G.mask)
        filtered = f.apply(noisy, G.mask)
        assert (filtered.gx != noisy.gx).sum() == out_x.sum() == 3
