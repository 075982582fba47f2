"""
Gradient Filter
===============
Depth gradients from normals, and outlier removal in noisy (hairy) regions.

1. normals_to_gradients: Gx = -Nx/Nz, Gy = -Ny/Nz, grazing pixels clamped
2. ExtremumFilter: per component, replace values whose deviation from the
   region mean exceeds sigma times the mean deviation with the local median
3. low_pass_filter: Gaussian smoothing, kept as a comparison baseline
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from core import GradientField, ImagePlane
from errors import ConfigError, EmptyRegion, InvalidGeometry

logger = logging.getLogger(__name__)

EPS_Z = 0.05
STATS_SCOPES = ("region", "mask")


def normals_to_gradients(normals: np.ndarray, mask: np.ndarray, plane: ImagePlane,
                         eps_z: float = EPS_Z) -> GradientField:
    """
    Convert a unit normal map to depth gradients over mask.

    Where Nz <= eps_z the gradient keeps its direction but its magnitude is
    capped at the value reached at Nz = eps_z; those pixels are flagged.

    Args:
        normals: (H, W, 3) unit normals
        mask: Pixels to convert
        plane: Image plane

    Returns:
        GradientField with the clamped flags set
    """
    normals = np.asarray(normals, dtype=float)
    mask = np.asarray(mask, bool)
    nx, ny, nz = normals[..., 0], normals[..., 1], normals[..., 2]

    clamped = mask & (nz <= eps_z)
    safe_nz = np.where(clamped | ~mask, 1.0, nz)
    gx = -nx / safe_nz
    gy = -ny / safe_nz

    cap = np.sqrt(1.0 - eps_z ** 2) / eps_z
    tangential = np.hypot(nx, ny)
    scale = np.where(tangential > 0, cap / np.where(tangential > 0, tangential, 1.0), 0.0)
    gx = np.where(clamped, -nx * scale, gx)
    gy = np.where(clamped, -ny * scale, gy)

    if clamped.any():
        logger.warning("⚠️ %d grazing pixels had their gradients clamped (Nz <= %.2f)",
                       int(clamped.sum()), eps_z)
    return GradientField(plane, np.where(mask, gx, 0.0), np.where(mask, gy, 0.0), mask, clamped)


@dataclass(frozen=True)
class FilterConfig:
    """sigma: outlier multiple of the mean deviation; window: median block side in pixels."""

    sigma: float = 5.0
    window: int = 10
    stats_scope: str = "region"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"Filter sigma must be > 0, got {self.sigma}")
        if self.window < 2:
            raise ConfigError(f"Filter window must be >= 2, got {self.window}")
        if self.stats_scope not in STATS_SCOPES:
            raise ConfigError(f"stats_scope must be one of {STATS_SCOPES}, got '{self.stats_scope}'")


class ExtremumFilter:
    """
    Bidirectional extremum filter: detect outliers against frozen statistics,
    replace them with the median of the input over the window.
    """

    def __init__(self, sigma: float = 5.0, window: int = 10, stats_scope: str = "region"):
        """
        Args:
            sigma: Outlier threshold as a multiple of the mean absolute deviation
            window: Median block side; even sides extend one pixel less down/right
            stats_scope: "region" computes statistics over the filtered region,
                "mask" over the whole gradient mask
        """
        FilterConfig(sigma, window, stats_scope)
        self.sigma = sigma
        self.window = window
        self.stats_scope = stats_scope
        self.before = window // 2
        self.after = window - window // 2 - 1

    @classmethod
    def from_config(cls, config: FilterConfig) -> "ExtremumFilter":
        return cls(config.sigma, config.window, config.stats_scope)

    def _check(self, G: GradientField, region: np.ndarray) -> np.ndarray:
        region = np.asarray(region, bool)
        if region.shape != G.mask.shape:
            raise InvalidGeometry("Filter region must match the gradient field")
        if not region.any():
            raise EmptyRegion("Filter region has no pixels")
        if np.any(region & ~G.mask):
            raise InvalidGeometry("Filter region must lie inside the gradient mask")
        return region

    def _outliers(self, values: np.ndarray, region: np.ndarray, scope: np.ndarray) -> np.ndarray:
        sample = values[scope]
        mean = sample.mean()
        deviation = np.abs(values - mean)
        threshold = self.sigma * deviation[scope].mean()
        if threshold == 0:
            return np.zeros_like(region)
        return region & (deviation > threshold)

    def outlier_masks(self, G: GradientField, region: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Pixels whose gx and gy would be replaced, computed on the input."""
        region = self._check(G, region)
        scope = region if self.stats_scope == "region" else G.mask
        return self._outliers(G.gx, region, scope), self._outliers(G.gy, region, scope)

    def _window_median(self, values: np.ndarray, mask: np.ndarray, r: int, c: int) -> float:
        r0, r1 = max(0, r - self.before), r + self.after + 1
        c0, c1 = max(0, c - self.before), c + self.after + 1
        block = values[r0:r1, c0:c1][mask[r0:r1, c0:c1]]
        return float(np.median(block))

    def _replace(self, values: np.ndarray, outliers: np.ndarray, mask: np.ndarray) -> np.ndarray:
        out = np.array(values)
        for r, c in zip(*np.nonzero(outliers)):
            out[r, c] = self._window_median(values, mask, r, c)
        return out

    def apply(self, G: GradientField, region: np.ndarray) -> GradientField:
        """
        Filter both gradient components inside region.

        Args:
            G: Gradient field
            region: Pixels eligible for replacement, a subset of G.mask

        Returns:
            New GradientField; pixels outside region are untouched
        """
        out_x, out_y = self.outlier_masks(G, region)
        gx = self._replace(G.gx, out_x, G.mask)
        gy = self._replace(G.gy, out_y, G.mask)
        logger.info("✓ Extremum filter replaced %d gx and %d gy values",
                    int(out_x.sum()), int(out_y.sum()))
        return G.replace(gx, gy)


def bidirectional_extremum_filter(G: GradientField, region: np.ndarray,
                                  config: FilterConfig = FilterConfig()) -> GradientField:
    return ExtremumFilter.from_config(config).apply(G, region)


def low_pass_filter(G: GradientField, region: np.ndarray, sigma_px: float = 2.0) -> GradientField:
    """Gaussian low-pass normalized over G.mask, written back inside region only."""
    region = np.asarray(region, bool)
    if not region.any():
        raise EmptyRegion("Filter region has no pixels")
    weight = gaussian_filter(G.mask.astype(float), sigma_px)
    safe = np.where(weight > 0, weight, 1.0)

    def smooth(values):
        blurred = gaussian_filter(np.where(G.mask, values, 0.0), sigma_px) / safe
        return np.where(region, blurred, values)

    return G.replace(smooth(G.gx), smooth(G.gy))
