"""
Core Types
==========
Domain types shared by every stage: image plane, observation stack,
proxy geometry, key points, light rig, gradient field and depth map.

All arrays are copied and frozen (read-only) on construction, so instances
can be shared between threads without locking.

Conventions:
    - per-pixel arrays are indexed [row, col] with shape (H, W, ...)
    - world x runs along columns, world y along rows, z towards the camera
    - off-mask values of gradient and depth maps are NaN
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from errors import AllZeroInput, InsufficientSmoothRegion, InvalidGeometry

logger = logging.getLogger(__name__)

UNIT_TOLERANCE = 1e-6


def _frozen(array, dtype=np.float64) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _set(obj, name, value):
    object.__setattr__(obj, name, value)


@dataclass(frozen=True)
class ImagePlane:
    width: int
    height: int
    pixel_scale: float = 1.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise InvalidGeometry(f"Image plane must be non-empty, got {self.width}x{self.height}")
        if not self.pixel_scale > 0:
            raise InvalidGeometry(f"pixel_scale must be > 0, got {self.pixel_scale}")

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    def pixel_grid(self) -> Tuple[np.ndarray, np.ndarray]:
        """World (x, y) of every pixel centre, origin at the image centre."""
        cols = (np.arange(self.width) - (self.width - 1) / 2.0) * self.pixel_scale
        rows = (np.arange(self.height) - (self.height - 1) / 2.0) * self.pixel_scale
        x, y = np.meshgrid(cols, rows)
        return x, y

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "pixel_scale": self.pixel_scale}


@dataclass(frozen=True)
class ObservationStack:
    """Per-pixel intensities under n single-light exposures, shape (H, W, n)."""

    plane: ImagePlane
    intensities: np.ndarray

    def __post_init__(self):
        values = _frozen(self.intensities)
        if values.ndim == 2:
            values = _frozen(values[:, :, None])
        if values.shape[:2] != self.plane.shape:
            raise InvalidGeometry(f"Observation shape {values.shape[:2]} != plane {self.plane.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidGeometry("Observations contain non-finite values")
        if np.any(values < 0):
            raise InvalidGeometry("Observations contain negative intensities")
        _set(self, "intensities", values)

    @property
    def n_lights(self) -> int:
        return self.intensities.shape[2]


@dataclass(frozen=True)
class ProxyGeometry:
    """Approximate surface: per-pixel normals N, positions V and region masks."""

    plane: ImagePlane
    normals: np.ndarray
    positions: np.ndarray
    recon_mask: np.ndarray
    smooth_mask: np.ndarray
    hairy_mask: np.ndarray

    def __post_init__(self):
        shape = self.plane.shape
        normals = _frozen(self.normals)
        positions = _frozen(self.positions)
        if normals.shape != shape + (3,) or positions.shape != shape + (3,):
            raise InvalidGeometry("Normal and position maps must have shape (H, W, 3)")
        masks = {}
        for name in ("recon_mask", "smooth_mask", "hairy_mask"):
            mask = _frozen(getattr(self, name), dtype=bool)
            if mask.shape != shape:
                raise InvalidGeometry(f"{name} has shape {mask.shape}, expected {shape}")
            masks[name] = mask

        recon, smooth, hairy = masks["recon_mask"], masks["smooth_mask"], masks["hairy_mask"]
        if np.any(smooth & ~recon) or np.any(hairy & ~recon):
            raise InvalidGeometry("smooth_mask and hairy_mask must lie inside recon_mask")
        if np.any(smooth & hairy):
            raise InvalidGeometry("smooth_mask and hairy_mask must be disjoint")

        lengths = np.linalg.norm(normals[recon], axis=-1)
        if lengths.size and np.max(np.abs(lengths - 1.0)) > UNIT_TOLERANCE:
            raise InvalidGeometry("Proxy normals must have unit length inside recon_mask")
        if not np.all(np.isfinite(positions[recon])):
            raise InvalidGeometry("Proxy positions must be finite inside recon_mask")

        _set(self, "normals", normals)
        _set(self, "positions", positions)
        for name, mask in masks.items():
            _set(self, name, mask)

    def with_surface(self, normals: np.ndarray, positions: np.ndarray) -> "ProxyGeometry":
        """Same plane and masks, new normals and positions."""
        return ProxyGeometry(self.plane, normals, positions,
                             self.recon_mask, self.smooth_mask, self.hairy_mask)


@dataclass(frozen=True)
class KeyPointSet:
    """
    Key points sampled from the smooth region.

    pixels holds (row, col) per key point; intensities is (m, n).
    albedo is only known for synthetic scenes.
    """

    pixels: np.ndarray
    normals: np.ndarray
    positions: np.ndarray
    intensities: np.ndarray
    albedo: Optional[np.ndarray] = None

    def __post_init__(self):
        pixels = _frozen(self.pixels, dtype=np.int64).reshape(-1, 2)
        normals = _frozen(self.normals).reshape(-1, 3)
        positions = _frozen(self.positions).reshape(-1, 3)
        intensities = _frozen(self.intensities)
        if intensities.ndim == 1:
            intensities = _frozen(intensities[:, None])
        m = pixels.shape[0]
        if normals.shape[0] != m or positions.shape[0] != m or intensities.shape[0] != m:
            raise InvalidGeometry("Key point arrays disagree on the number of points")
        _set(self, "pixels", pixels)
        _set(self, "normals", normals)
        _set(self, "positions", positions)
        _set(self, "intensities", intensities)
        if self.albedo is not None:
            albedo = _frozen(self.albedo).reshape(-1)
            if albedo.shape[0] != m:
                raise InvalidGeometry("Key point albedo length mismatch")
            _set(self, "albedo", albedo)

    @property
    def count(self) -> int:
        return self.pixels.shape[0]

    @property
    def n_lights(self) -> int:
        return self.intensities.shape[1]

    def with_normals(self, normals: np.ndarray) -> "KeyPointSet":
        return KeyPointSet(self.pixels, normals, self.positions, self.intensities, self.albedo)


@dataclass(frozen=True)
class LightRig:
    """Near point lights: positions P (n, 3) in world units and intensities beta (n,)."""

    positions: np.ndarray
    betas: np.ndarray

    def __post_init__(self):
        positions = _frozen(self.positions).reshape(-1, 3)
        betas = _frozen(self.betas).reshape(-1)
        if positions.shape[0] != betas.shape[0]:
            raise InvalidGeometry("Rig positions and betas disagree on the number of lights")
        if not (np.all(np.isfinite(positions)) and np.all(np.isfinite(betas))):
            raise InvalidGeometry("Rig contains non-finite values")
        if np.any(betas <= 0):
            raise InvalidGeometry(f"Light intensities must be > 0, got {betas.tolist()}")
        if np.any(positions[:, 2] <= 0):
            raise InvalidGeometry("Lights must sit in the z > 0 half-space")
        _set(self, "positions", positions)
        _set(self, "betas", betas)

    @property
    def n_lights(self) -> int:
        return self.betas.shape[0]

    def to_dict(self) -> dict:
        return {
            "lights": [
                {"position": [float(c) for c in p], "beta": float(b)}
                for p, b in zip(self.positions, self.betas)
            ]
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LightRig":
        try:
            lights = data["lights"]
            positions = [light["position"] for light in lights]
            betas = [light["beta"] for light in lights]
        except (KeyError, TypeError) as e:
            raise InvalidGeometry(f"Malformed rig description: {e}") from e
        if not lights:
            raise InvalidGeometry("Rig description has no lights")
        return cls(np.array(positions, dtype=float), np.array(betas, dtype=float))


@dataclass(frozen=True)
class GradientField:
    """Depth gradients (dz/dx, dz/dy); NaN off mask. clamped flags grazing-angle pixels."""

    plane: ImagePlane
    gx: np.ndarray
    gy: np.ndarray
    mask: np.ndarray
    clamped: Optional[np.ndarray] = None

    def __post_init__(self):
        mask = _frozen(self.mask, dtype=bool)
        gx = np.where(mask, np.asarray(self.gx, dtype=float), np.nan)
        gy = np.where(mask, np.asarray(self.gy, dtype=float), np.nan)
        if gx.shape != self.plane.shape or gy.shape != self.plane.shape:
            raise InvalidGeometry("Gradient maps must match the image plane")
        if not (np.all(np.isfinite(gx[mask])) and np.all(np.isfinite(gy[mask]))):
            raise InvalidGeometry("Gradient field is not finite on its mask")
        clamped = np.zeros(self.plane.shape, bool) if self.clamped is None else self.clamped
        _set(self, "mask", mask)
        _set(self, "gx", _frozen(gx))
        _set(self, "gy", _frozen(gy))
        _set(self, "clamped", _frozen(clamped, dtype=bool))

    def replace(self, gx: np.ndarray, gy: np.ndarray) -> "GradientField":
        return GradientField(self.plane, gx, gy, self.mask, self.clamped)


@dataclass(frozen=True)
class DepthMap:
    """Height field in world units; NaN off mask, zero mean on mask."""

    plane: ImagePlane
    depth: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        mask = _frozen(self.mask, dtype=bool)
        depth = np.where(mask, np.asarray(self.depth, dtype=float), np.nan)
        if depth.shape != self.plane.shape:
            raise InvalidGeometry("Depth map must match the image plane")
        values = depth[mask]
        if not np.all(np.isfinite(values)):
            raise InvalidGeometry("Depth map is not finite on its mask")
        if values.size and abs(values.mean()) > 1e-9 * (1.0 + np.abs(values).max()):
            raise InvalidGeometry("Depth map must be zero-mean on its mask; use DepthMap.centered")
        _set(self, "mask", mask)
        _set(self, "depth", _frozen(depth))

    @classmethod
    def centered(cls, plane: ImagePlane, depth: np.ndarray, mask: np.ndarray) -> "DepthMap":
        mask = np.asarray(mask, dtype=bool)
        depth = np.asarray(depth, dtype=float)
        offset = depth[mask].mean() if mask.any() else 0.0
        return cls(plane, depth - offset, mask)

    @property
    def depth_range(self) -> float:
        values = self.depth[self.mask]
        return float(values.max() - values.min()) if values.size else 0.0


def normalize_observations(raw: ObservationStack) -> ObservationStack:
    """
    Scale all layers by the global maximum so the brightest sample is exactly 1.

    Args:
        raw: Observation stack with intensities >= 0

    Returns:
        New stack with relative ratios preserved
    """
    peak = float(raw.intensities.max())
    if peak == 0.0:
        raise AllZeroInput("Every observation is zero; nothing to normalize")
    return ObservationStack(raw.plane, raw.intensities / peak)


def sample_keypoints(proxy: ProxyGeometry, obs: ObservationStack, m: int, seed: int) -> KeyPointSet:
    """
    Pick m key points from the smooth region by stratified grid subsampling.

    The smooth mask is cut into square cells; one random pixel is drawn per
    occupied cell and m of those are kept. The cell side starts at
    sqrt(population / m) and shrinks until enough cells are occupied, so the
    picks spread over the whole region. Deterministic for a given seed.

    Args:
        proxy: Proxy geometry providing normals, positions and smooth_mask
        obs: Observations the intensities are sampled from
        m: Number of key points
        seed: Seed for the random generator

    Returns:
        KeyPointSet ordered by (row, col)
    """
    if m < 1:
        raise InsufficientSmoothRegion(f"Need at least one key point, asked for {m}")
    if obs.plane.shape != proxy.plane.shape:
        raise InvalidGeometry("Observations and proxy live on different image planes")

    rows, cols = np.nonzero(proxy.smooth_mask)
    population = rows.size
    if population < m:
        raise InsufficientSmoothRegion(
            f"Smooth region has {population} pixels, fewer than the {m} key points requested")

    rng = np.random.default_rng(seed)
    order = rng.permutation(population)
    cell = max(1, int(np.floor(np.sqrt(population / m))))
    while True:
        keys = (rows[order] // cell) * (proxy.plane.width + 1) + cols[order] // cell
        # first occurrence in the shuffled order = random pixel of each cell
        _, first = np.unique(keys, return_index=True)
        picks = order[first]
        if picks.size >= m or cell == 1:
            break
        cell -= 1

    # np.nonzero is row-major, so sorted indices give (row, col) order
    chosen = np.sort(rng.choice(picks, size=m, replace=False)) if picks.size > m else np.sort(picks)
    r, c = rows[chosen], cols[chosen]

    logger.debug("Sampled %d key points with cell size %d from %d smooth pixels", m, cell, population)
    return KeyPointSet(
        pixels=np.stack([r, c], axis=1),
        normals=proxy.normals[r, c],
        positions=proxy.positions[r, c],
        intensities=obs.intensities[r, c],
    )
