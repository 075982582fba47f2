"""
Normal Estimation
=================
Per-pixel least squares over the valid lights:

    I_ij = b_i . D_ij,  j in valid_i      b_i = rho_i N_i

rho_i = |b_i|, N_i = b_i / rho_i. Pixels with fewer than 3 valid lights keep
the proxy normal and are flagged as fallback. Pixels whose design matrix is
ill-conditioned keep their (pseudo-inverse) estimate and are flagged as
degenerate.
"""

import logging
from dataclasses import dataclass

import numpy as np

from calibration import scaled_directions
from core import ImagePlane, LightRig, ObservationStack, ProxyGeometry
from errors import InvalidGeometry
from shadow_mask import ValidLightMask

logger = logging.getLogger(__name__)

MIN_VALID_LIGHTS = 3
MAX_CONDITION = 1e6


@dataclass(frozen=True)
class NormalEstimate:
    plane: ImagePlane
    normals: np.ndarray
    albedo: np.ndarray
    mask: np.ndarray
    fallback: np.ndarray
    degenerate: np.ndarray
    residual_rms: np.ndarray


def estimate_normals(obs: ObservationStack, proxy: ProxyGeometry, rig: LightRig,
                     valid: ValidLightMask) -> NormalEstimate:
    """
    Recover albedo and unit normals over recon_mask from the valid lights.

    Args:
        obs: Observations
        proxy: Geometry supplying V and the fallback normals
        rig: Calibrated lights
        valid: Output of valid_lights

    Returns:
        NormalEstimate; normals outside recon_mask are the proxy's, albedo there is 0
    """
    if obs.n_lights != rig.n_lights or valid.valid.shape != obs.intensities.shape:
        raise InvalidGeometry("Observations, rig and validity mask disagree on the number of lights")

    shape = proxy.plane.shape
    recon = proxy.recon_mask
    normals = np.array(proxy.normals)
    albedo = np.zeros(shape)
    fallback = np.zeros(shape, bool)
    degenerate = np.zeros(shape, bool)
    residual_rms = np.zeros(shape)

    V = proxy.positions[recon]
    I = obs.intensities[recon]
    w = valid.valid[recon].astype(float)
    D = scaled_directions(rig.positions, rig.betas, V)

    A = np.einsum("kj,kjc,kjd->kcd", w, D, D)
    b = np.einsum("kj,kj,kjc->kc", w, I, D)
    count = w.sum(axis=1)

    solvable = count >= MIN_VALID_LIGHTS
    cond = np.full(len(w), np.inf)
    if solvable.any():
        eig = np.linalg.eigvalsh(A[solvable])
        with np.errstate(divide="ignore", invalid="ignore"):
            cond[solvable] = np.where(eig[:, 0] > 0, np.sqrt(eig[:, -1] / eig[:, 0]), np.inf)
    bad_condition = solvable & (cond > MAX_CONDITION)
    well = solvable & ~bad_condition

    g = np.zeros((len(w), 3))
    if well.any():
        g[well] = np.linalg.solve(A[well], b[well][..., None])[..., 0]
    if bad_condition.any():
        g[bad_condition] = (np.linalg.pinv(A[bad_condition]) @ b[bad_condition][..., None])[..., 0]
    solve = solvable.copy()
    rho = np.linalg.norm(g, axis=1)
    solve &= rho > 0

    est_n = np.array(proxy.normals[recon])
    est_n[solve] = g[solve] / rho[solve, None]
    est_rho = np.where(solve, rho, 0.0)

    # fallback albedo: least squares with the proxy normal over the facing lights
    keep = ~solve
    if keep.any():
        s = np.einsum("kc,kjc->kj", est_n[keep], D[keep])
        lit = np.where(s > 0, 1.0, 0.0)
        num = np.sum(lit * I[keep] * s, axis=1)
        den = np.sum(lit * s * s, axis=1)
        est_rho[keep] = np.maximum(np.divide(num, den, out=np.zeros_like(num), where=den > 0), 0.0)

    predicted = est_rho[:, None] * np.maximum(0.0, np.einsum("kc,kjc->kj", est_n, D))
    err = w * (predicted - I) ** 2
    rms = np.sqrt(np.divide(err.sum(axis=1), count, out=np.zeros_like(count), where=count > 0))

    normals[recon] = est_n
    albedo[recon] = est_rho
    fallback[recon] = keep
    degenerate[recon] = bad_condition
    residual_rms[recon] = rms

    n_fallback = int(keep.sum())
    if n_fallback:
        logger.warning("⚠️ %d of %d pixels fell back to the proxy normal", n_fallback, int(recon.sum()))
    if bad_condition.any():
        logger.warning("⚠️ %d pixels have an ill-conditioned light set (condition > %.0e)",
                       int(bad_condition.sum()), MAX_CONDITION)
    logger.info("✓ Estimated normals for %d pixels", int(solve.sum()))
    return NormalEstimate(proxy.plane, normals, albedo, recon.copy(), fallback, degenerate, residual_rms)
