"""
Synthetic Renderer
==================
Forward Lambertian renderer for near point lights plus the synthetic scenes
the tests and the distance sweep run on.

    I_ij = max(0, rho_i N_i . D_ij)     (0 where light j is occluded)

Orthographic camera: pixel (row, col) sees world (x, y) from
ImagePlane.pixel_grid(); the height field z(x, y) faces +z.
Cast shadows come from a ray march over the height field with 0.5 pixel
steps and bilinear height lookups.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from calibration import shading
from core import DepthMap, ImagePlane, LightRig, ObservationStack, ProxyGeometry
from errors import InvalidGeometry

logger = logging.getLogger(__name__)

MARCH_STEP_PX = 0.5
# skip the first pixel of each ray: bilinear lookups there see the start point itself
MARCH_START_PX = 1.0

AlbedoSpec = Union[None, float, np.ndarray]


@dataclass(frozen=True)
class SyntheticScene:
    """Ground-truth scene: geometry, albedo, rig and the height field it came from."""

    proxy_truth: ProxyGeometry
    albedo: np.ndarray
    rig_truth: LightRig
    height: np.ndarray
    cast_shadows: bool = False
    name: str = "scene"

    def __post_init__(self):
        albedo = np.array(self.albedo, dtype=float)
        height = np.array(self.height, dtype=float)
        shape = self.proxy_truth.plane.shape
        if albedo.shape != shape or height.shape != shape:
            raise InvalidGeometry("Albedo and height maps must match the image plane")
        if np.any(albedo[self.proxy_truth.recon_mask] <= 0):
            raise InvalidGeometry("Albedo must be > 0 inside recon_mask")
        albedo.setflags(write=False)
        height.setflags(write=False)
        object.__setattr__(self, "albedo", albedo)
        object.__setattr__(self, "height", height)

    @property
    def plane(self) -> ImagePlane:
        return self.proxy_truth.plane

    def with_rig(self, rig: LightRig) -> "SyntheticScene":
        return SyntheticScene(self.proxy_truth, self.albedo, rig, self.height, self.cast_shadows, self.name)

    def depth_truth(self) -> DepthMap:
        return DepthMap.centered(self.plane, self.height, self.proxy_truth.recon_mask)


# ---------------------------------------------------------------------------
# Light rigs
# ---------------------------------------------------------------------------

def make_ring_rig(n: int, distance: float, elevation_deg: float = 45.0,
                  betas: Optional[np.ndarray] = None) -> LightRig:
    """
    Light 0 at the zenith, the rest evenly spaced in azimuth at one elevation.

    Every light sits at `distance` from the origin, in the z > 0 half-space.
    """
    if n < 1:
        raise InvalidGeometry("A rig needs at least one light")
    if not distance > 0 or not 0 < elevation_deg <= 90:
        raise InvalidGeometry("Rig distance must be > 0 and elevation in (0, 90] degrees")
    elevation = np.radians(elevation_deg)
    positions = [[0.0, 0.0, distance]]
    for k in range(n - 1):
        azimuth = 2.0 * np.pi * k / (n - 1)
        positions.append([distance * np.cos(elevation) * np.cos(azimuth),
                          distance * np.cos(elevation) * np.sin(azimuth),
                          distance * np.sin(elevation)])
    betas = np.ones(n) if betas is None else np.asarray(betas, dtype=float)
    return LightRig(np.array(positions), betas)


def scale_rig(rig: LightRig, distance: float) -> LightRig:
    """Same directions from the origin, every light moved to `distance`."""
    unit = rig.positions / np.linalg.norm(rig.positions, axis=1, keepdims=True)
    return LightRig(unit * distance, rig.betas)


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------

def _albedo_map(plane: ImagePlane, albedo: AlbedoSpec) -> np.ndarray:
    if albedo is None:
        # smooth, non-uniform reference texture in [0.3, 0.9]
        x, y = plane.pixel_grid()
        wx = 2.0 * np.pi * 1.5 / (plane.width * plane.pixel_scale)
        wy = 2.0 * np.pi / (plane.height * plane.pixel_scale)
        return 0.6 + 0.3 * np.sin(wx * x + 0.3) * np.cos(wy * y - 0.2)
    if np.isscalar(albedo):
        return np.full(plane.shape, float(albedo))
    return np.asarray(albedo, dtype=float)


def _height_field_scene(plane, z, zx, zy, recon, hairy, rig, albedo, cast_shadows, name) -> SyntheticScene:
    x, y = plane.pixel_grid()
    normals = np.dstack([-zx, -zy, np.ones_like(z)])
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    positions = np.dstack([x, y, z])
    recon = np.asarray(recon, bool)
    hairy = np.asarray(hairy, bool) & recon
    proxy = ProxyGeometry(plane, normals, positions, recon, recon & ~hairy, hairy)
    return SyntheticScene(proxy, _albedo_map(plane, albedo), rig, z, cast_shadows, name)


def make_sphere_scene(radius: float, rig: LightRig, size: int = 64, cap_deg: float = 60.0,
                      pixel_scale: Optional[float] = None, albedo: AlbedoSpec = None,
                      cast_shadows: bool = False) -> SyntheticScene:
    """
    Spherical cap of the given radius resting on the z = 0 plane.

    z = sqrt(R^2 - r^2) - R cos(cap) inside the cap footprint (r <= R sin(cap)),
    0 outside. recon and smooth masks are the footprint; no hairy region.

    Args:
        radius: Sphere radius in world units
        rig: Ground-truth lights
        size: Image side in pixels
        cap_deg: Polar angle of the cap rim (90 = full hemisphere)
        pixel_scale: World units per pixel; default fits the footprint to 90% of the image
    """
    if not radius > 0:
        raise InvalidGeometry(f"Sphere radius must be > 0, got {radius}")
    if not 0 < cap_deg <= 90:
        raise InvalidGeometry("cap_deg must be in (0, 90]")
    cap = np.radians(cap_deg)
    footprint = radius * np.sin(cap)
    if pixel_scale is None:
        pixel_scale = 2.0 * footprint / (0.9 * size)
    plane = ImagePlane(size, size, pixel_scale)
    x, y = plane.pixel_grid()
    r2 = x * x + y * y
    inside = r2 <= footprint ** 2

    root = np.sqrt(np.maximum(radius ** 2 - r2, 0.0))
    z = np.where(inside, root - radius * np.cos(cap), 0.0)
    safe = np.where(inside & (root > 0), root, 1.0)
    zx = np.where(inside, -x / safe, 0.0)
    zy = np.where(inside, -y / safe, 0.0)
    return _height_field_scene(plane, z, zx, zy, inside, np.zeros_like(inside), rig,
                               albedo, cast_shadows, "sphere")


def make_bumpy_scene(freq: float, amp: float, rig: LightRig, size: int = 64,
                     pixel_scale: Optional[float] = None, albedo: AlbedoSpec = None,
                     cast_shadows: bool = False) -> SyntheticScene:
    """
    Egg-crate height field z = amp sin(2 pi f x / L) sin(2 pi f y / L) over
    the full image, L the image width.

    Pixels where |curvature| exceeds half its maximum form the hairy mask,
    so amp = 0 gives the flat plane with no hairy pixels.
    """
    if pixel_scale is None:
        pixel_scale = 1.0 / size
    plane = ImagePlane(size, size, pixel_scale)
    x, y = plane.pixel_grid()
    k = 2.0 * np.pi * freq / (size * pixel_scale)
    sx, sy = np.sin(k * x), np.sin(k * y)
    z = amp * sx * sy
    zx = amp * k * np.cos(k * x) * sy
    zy = amp * k * sx * np.cos(k * y)

    curvature = np.abs(-2.0 * k * k * z)
    hairy = curvature > 0.5 * curvature.max()
    recon = np.ones(plane.shape, bool)
    return _height_field_scene(plane, z, zx, zy, recon, hairy, rig, albedo, cast_shadows, "bumpy")


def make_plane_scene(rig: LightRig, size: int = 64, pixel_scale: Optional[float] = None,
                     albedo: AlbedoSpec = None) -> SyntheticScene:
    """Flat z = 0 plane, normals (0, 0, 1)."""
    scene = make_bumpy_scene(1.0, 0.0, rig, size=size, pixel_scale=pixel_scale, albedo=albedo)
    return SyntheticScene(scene.proxy_truth, scene.albedo, rig, scene.height, False, "plane")


def scene_unit(scene: SyntheticScene) -> float:
    """Bounding-box height of the reconstruction mask in world units."""
    rows = np.nonzero(scene.proxy_truth.recon_mask.any(axis=1))[0]
    if rows.size == 0:
        raise InvalidGeometry("Scene has an empty reconstruction mask")
    return float(rows[-1] - rows[0] + 1) * scene.plane.pixel_scale


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _march_light(height, plane, start, light, candidates) -> np.ndarray:
    """Occlusion flags for the candidate pixels (k,) toward one light."""
    H, W = plane.shape
    s = plane.pixel_scale
    rows, cols = candidates
    x0, y0, z0 = start[:, 0], start[:, 1], start[:, 2]
    dcol = (light[0] - x0) / s
    drow = (light[1] - y0) / s
    span = np.hypot(dcol, drow)
    occluded = np.zeros(rows.size, bool)

    # lights straight overhead cannot be blocked by a height field
    active = np.nonzero(span > 1e-9)[0]
    dt = MARCH_STEP_PX / np.where(span > 1e-9, span, 1.0)
    t = MARCH_START_PX / np.where(span > 1e-9, span, 1.0)
    bias = 1e-6 * max(1.0, float(np.abs(height).max()))

    while active.size:
        ta = t[active]
        alive = ta < 1.0
        r = rows[active] + ta * drow[active]
        c = cols[active] + ta * dcol[active]
        alive &= (r >= 0) & (r <= H - 1) & (c >= 0) & (c <= W - 1)
        active, ta, r, c = active[alive], ta[alive], r[alive], c[alive]
        if not active.size:
            break
        ray_z = z0[active] + ta * (light[2] - z0[active])
        surface = map_coordinates(height, [r, c], order=1, mode="nearest")
        hit = surface > ray_z + bias
        occluded[active[hit]] = True
        active = active[~hit]
        t[active] += dt[active]
    return occluded


def cast_shadow_masks(scene: SyntheticScene, rig: Optional[LightRig] = None) -> np.ndarray:
    """
    Per-pixel, per-light cast-shadow flags (H, W, n) from the height field.

    Only pixels inside recon_mask that face the light are marched.
    """
    rig = rig or scene.rig_truth
    proxy = scene.proxy_truth
    occluded = np.zeros(scene.plane.shape + (rig.n_lights,), bool)
    rows, cols = np.nonzero(proxy.recon_mask)
    V = proxy.positions[rows, cols]
    facing = shading(proxy.normals[rows, cols], V, rig) > 0
    for j in range(rig.n_lights):
        pick = np.nonzero(facing[:, j])[0]
        hit = _march_light(scene.height, scene.plane, V[pick],
                           rig.positions[j], (rows[pick].astype(float), cols[pick].astype(float)))
        occluded[rows[pick[hit]], cols[pick[hit]], j] = True
    return occluded


def render(scene: SyntheticScene) -> ObservationStack:
    """
    Render one image per light of scene.rig_truth.

    Pixels outside recon_mask are black; back-facing pixels clamp to 0 and,
    with cast_shadows on, occluded pixels are 0 too.
    """
    proxy = scene.proxy_truth
    rig = scene.rig_truth
    out = np.zeros(scene.plane.shape + (rig.n_lights,))
    recon = proxy.recon_mask
    s = shading(proxy.normals[recon], proxy.positions[recon], rig)
    out[recon] = np.maximum(0.0, scene.albedo[recon][:, None] * s)
    if scene.cast_shadows:
        shadows = cast_shadow_masks(scene)
        out[shadows] = 0.0
        logger.debug("Cast shadows darkened %d pixel/light pairs", int(shadows.sum()))
    return ObservationStack(scene.plane, out)


def render_parallel(scene: SyntheticScene, directions: np.ndarray, strengths: Optional[np.ndarray] = None) -> ObservationStack:
    """Directional lights, no falloff: I = max(0, rho N . (strength L)). Cast shadows are not traced."""
    directions = np.asarray(directions, dtype=float).reshape(-1, 3)
    directions = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    strengths = np.ones(len(directions)) if strengths is None else np.asarray(strengths, dtype=float)
    proxy = scene.proxy_truth
    out = np.zeros(scene.plane.shape + (len(directions),))
    recon = proxy.recon_mask
    out[recon] = np.maximum(0.0, scene.albedo[recon][:, None] * (proxy.normals[recon] @ (directions * strengths[:, None]).T))
    return ObservationStack(scene.plane, out)


def add_intensity_noise(obs: ObservationStack, sigma: float, seed: int) -> ObservationStack:
    """Additive Gaussian noise with standard deviation sigma, clamped at 0."""
    if sigma <= 0:
        return obs
    rng = np.random.default_rng(seed)
    noisy = obs.intensities + rng.normal(0.0, sigma, obs.intensities.shape)
    return ObservationStack(obs.plane, np.maximum(noisy, 0.0))


# ---------------------------------------------------------------------------
# Proxy perturbation
# ---------------------------------------------------------------------------

def _smooth_field(rng, shape, mask, smooth_scale) -> np.ndarray:
    """Gaussian-smoothed noise, zero mean and unit RMS over mask."""
    field = rng.standard_normal(shape)
    if smooth_scale > 0:
        field = gaussian_filter(field, smooth_scale, mode="reflect")
    values = field[mask]
    field = field - values.mean()
    rms = np.sqrt(np.mean(field[mask] ** 2))
    return field / rms if rms > 0 else field


def _tangent_basis(normals: np.ndarray):
    helper = np.zeros_like(normals)
    use_y = np.abs(normals[..., 0]) > 0.9
    helper[..., 0] = ~use_y
    helper[..., 1] = use_y
    t1 = np.cross(normals, helper)
    t1 /= np.linalg.norm(t1, axis=-1, keepdims=True)
    return t1, np.cross(normals, t1)


def perturb_proxy(truth: ProxyGeometry, angle_sigma: float, smooth_scale: float, seed: int) -> ProxyGeometry:
    """
    Simulate an inaccurate proxy by tilting normals with smooth random fields.

    Each normal turns by theta = sigma (1 + 0.25 u) toward a smoothly varying
    tangent direction, u a smooth zero-mean field, so the mean angular
    deviation stays close to angle_sigma. Depths get a matching smooth offset.

    Args:
        truth: Exact proxy
        angle_sigma: Target angular error in degrees
        smooth_scale: Correlation length of the random fields in pixels
        seed: Random seed

    Returns:
        Perturbed proxy with unit normals
    """
    if angle_sigma < 0:
        raise InvalidGeometry(f"angle_sigma must be >= 0, got {angle_sigma}")
    if angle_sigma == 0:
        return truth

    mask = truth.recon_mask
    rng = np.random.default_rng(seed)
    shape = truth.plane.shape
    sigma = np.radians(angle_sigma)

    magnitude = _smooth_field(rng, shape, mask, smooth_scale)
    a = _smooth_field(rng, shape, mask, smooth_scale)
    b = _smooth_field(rng, shape, mask, smooth_scale)
    depth_noise = _smooth_field(rng, shape, mask, smooth_scale)

    theta = np.clip(sigma * (1.0 + 0.25 * magnitude), 0.0, np.pi / 2)
    t1, t2 = _tangent_basis(truth.normals)
    phi = np.arctan2(b, a)
    tangent = np.cos(phi)[..., None] * t1 + np.sin(phi)[..., None] * t2
    tilted = truth.normals * np.cos(theta)[..., None] + tangent * np.sin(theta)[..., None]
    tilted /= np.linalg.norm(tilted, axis=-1, keepdims=True)
    normals = np.where(mask[..., None], tilted, truth.normals)

    positions = np.array(truth.positions)
    offset = np.tan(sigma) * max(smooth_scale, 1.0) * truth.plane.pixel_scale * depth_noise
    positions[..., 2] = np.where(mask, positions[..., 2] + offset, positions[..., 2])

    logger.debug("Perturbed proxy normals by %.1f deg (seed %d)", angle_sigma, seed)
    return truth.with_surface(normals, positions)
