"""
Shadow Mask
===========
Photometric shadow test: per pixel, a light is kept when the albedo it
implies does not drop far below the pixel's typical albedo, and the light
faces the surface.

    rho_ij = I_ij / (N_i . D_ij)
    S_i    = {j : rho_ij > mean_j(rho_ij)}          mu_i = mean(S_i)
    L_i    = {j : rho_ij > (1 - tau) mu_i}
    A_i    = {j : N_i . D_ij > 0}
    valid  = L_i & A_i                              (A_i when S_i is empty)
"""

import logging
from dataclasses import dataclass

import numpy as np

from calibration import shading
from core import ImagePlane, LightRig, ObservationStack, ProxyGeometry
from errors import ConfigError, InvalidGeometry

logger = logging.getLogger(__name__)

GRAZING_EPSILON = 1e-6


@dataclass(frozen=True)
class ShadowConfig:
    tau: float = 0.4
    epsilon: float = GRAZING_EPSILON

    def __post_init__(self):
        if not 0 <= self.tau < 1:
            raise ConfigError(f"tau must be in [0, 1), got {self.tau}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")


@dataclass(frozen=True)
class ValidLightMask:
    """valid and albedo_per_light are (H, W, n); facing keeps N . D > 0 for reference."""

    plane: ImagePlane
    valid: np.ndarray
    albedo_per_light: np.ndarray
    facing: np.ndarray

    @property
    def valid_count(self) -> np.ndarray:
        return self.valid.sum(axis=2)


def proxy_shading(proxy: ProxyGeometry, rig: LightRig) -> np.ndarray:
    """N . D for every recon pixel and light, NaN outside recon_mask: (H, W, n)."""
    out = np.full(proxy.plane.shape + (rig.n_lights,), np.nan)
    recon = proxy.recon_mask
    out[recon] = shading(proxy.normals[recon], proxy.positions[recon], rig)
    return out


def albedo_per_light(obs: ObservationStack, proxy: ProxyGeometry, rig: LightRig,
                     epsilon: float = GRAZING_EPSILON) -> np.ndarray:
    """
    Albedo implied by each light: I / (N . D), NaN where N . D <= epsilon.

    Args:
        obs: Observations
        proxy: Geometry supplying N and V
        rig: Calibrated lights

    Returns:
        (H, W, n) array; NaN off recon_mask and at grazing or back-facing lights
    """
    if obs.plane.shape != proxy.plane.shape:
        raise InvalidGeometry("Observations and proxy live on different image planes")
    if obs.n_lights != rig.n_lights:
        raise InvalidGeometry(f"{obs.n_lights} images but {rig.n_lights} lights in the rig")
    s = proxy_shading(proxy, rig)
    defined = s > epsilon
    return np.divide(obs.intensities, s, out=np.full(s.shape, np.nan), where=defined)


def valid_lights(albedos: np.ndarray, proxy: ProxyGeometry, rig: LightRig,
                 config: ShadowConfig = ShadowConfig()) -> ValidLightMask:
    """
    Per-pixel valid light sets from per-light albedos.

    Args:
        albedos: Output of albedo_per_light
        proxy: Same geometry used for the albedos
        rig: Same rig
        config: Threshold tau

    Returns:
        ValidLightMask
    """
    s = proxy_shading(proxy, rig)
    facing = np.nan_to_num(s, nan=-1.0) > 0
    defined = np.isfinite(albedos)
    count = defined.sum(axis=2)

    with np.errstate(invalid="ignore", divide="ignore"):
        rho_bar = np.where(count > 0, np.nansum(albedos, axis=2) / np.maximum(count, 1), np.nan)
        above = defined & (albedos > rho_bar[..., None])
        n_above = above.sum(axis=2)
        mu = np.where(n_above > 0,
                      np.sum(np.where(above, albedos, 0.0), axis=2) / np.maximum(n_above, 1), np.nan)
        bright = defined & (albedos > ((1.0 - config.tau) * mu)[..., None])

    valid = bright & facing
    fallback = (n_above == 0) & proxy.recon_mask
    valid[fallback] = facing[fallback]
    valid[~proxy.recon_mask] = False

    if fallback.any():
        logger.debug("%d pixels had no above-mean albedo; kept every facing light", int(fallback.sum()))
    recon = proxy.recon_mask
    if recon.any():
        rejected = (facing & ~valid)[recon].sum()
        logger.info("✓ Shadow test rejected %d of %d facing pixel/light pairs (tau=%.2f)",
                    int(rejected), int(facing[recon].sum()), config.tau)
    return ValidLightMask(proxy.plane, valid, albedos, facing)
