"""
Light Calibration
=================
Estimates near point light positions P and intensities beta from key-point
intensities, without assuming a uniform albedo.

Shading model for key point i under light j:

    I_ij = rho_i * max(0, N_i . D_ij),   D_ij = beta_j (P_j - V_i) / |P_j - V_i|^3

The clamp is the renderer's attached shadow: a light behind the surface
predicts 0, which is what an exact image records there.

Two solvers:
    1. calibrate_joint     - (rho, beta, P) with the proxy normals held fixed
    2. refine_alternating  - alternates (rho, N_hat) and (beta, P) updates

Both are block-coordinate schemes: rho has a closed form per key point once
the lights are known, the light block takes damped Gauss-Newton steps.

Gauge: the data term is unchanged by rho -> rho / k, beta -> k * beta. Light
steps keep mean(beta) fixed; the shared scale k is then set in closed form by
the lambda1 / lambda2 balance, so lambda2 never moves the lights. Results are
reported with mean(beta) = 1.

Also provides the parallel-light baseline (I = diag(rho) N L^T).
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.linalg import null_space

from core import KeyPointSet, LightRig
from errors import (CoincidentLightAndVertex, ConfigError, DivergedSolve,
                    InsufficientSmoothRegion, RankDeficient)

logger = logging.getLogger(__name__)

MIN_DISTANCE = 1e-9
GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))
MU_FLOOR = 1e-6
GAUGE_STEP = 10.0


@dataclass(frozen=True)
class CalibrationConfig:
    """Regularizer weights and stopping rules."""

    lambda1: float = 1e-3
    lambda2: float = 1e-3
    lambda3: float = 1e-4
    lambda_n: float = 1e-6
    lambda_beta: float = 1e-3
    lambda_P: float = 1e-4
    d: float = 1.0
    max_outer_iters: int = 50
    tol: float = 1e-6
    max_damping_escalations: int = 5
    uniform_albedo: bool = False
    init_candidates: int = 256
    normal_passes: int = 3

    def __post_init__(self):
        weights = (self.lambda1, self.lambda2, self.lambda3,
                   self.lambda_n, self.lambda_beta, self.lambda_P)
        if any(w < 0 for w in weights):
            raise ConfigError("Calibration weights must be >= 0")
        if not self.d > 0:
            raise ConfigError(f"Prior light distance d must be > 0, got {self.d}")
        if self.max_outer_iters < 1 or self.max_damping_escalations < 1:
            raise ConfigError("Iteration caps must be >= 1")
        if self.tol < 0:
            raise ConfigError("tol must be >= 0")
        if self.init_candidates < 1 or self.normal_passes < 1:
            raise ConfigError("init_candidates and normal_passes must be >= 1")


@dataclass(frozen=True)
class CalibrationResult:
    rig: LightRig
    keypoint_albedo: np.ndarray
    refined_normals: np.ndarray
    objective_trace: Tuple[float, ...]


# ---------------------------------------------------------------------------
# Shading model
# ---------------------------------------------------------------------------

def scaled_direction(P_j, V_i, beta_j: float) -> np.ndarray:
    """
    Scaled light direction for one light and one surface point.

    Args:
        P_j: Light position (3,)
        V_i: Surface point (3,)
        beta_j: Light intensity

    Returns:
        beta_j (P_j - V_i) / |P_j - V_i|^3
    """
    u = np.asarray(P_j, dtype=float) - np.asarray(V_i, dtype=float)
    dist = float(np.linalg.norm(u))
    if dist < MIN_DISTANCE:
        raise CoincidentLightAndVertex(f"Light and vertex coincide (distance {dist:.3g})")
    return beta_j * u / dist ** 3


def scaled_directions(positions: np.ndarray, betas: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Vectorised scaled_direction: vertices (..., 3) -> (..., n, 3)."""
    u = np.asarray(positions, dtype=float) - np.asarray(vertices, dtype=float)[..., None, :]
    dist = np.linalg.norm(u, axis=-1)
    if dist.size and dist.min() < MIN_DISTANCE:
        raise CoincidentLightAndVertex("A light coincides with a surface point")
    return np.asarray(betas, dtype=float)[:, None] * u / dist[..., None] ** 3


def shading(normals: np.ndarray, vertices: np.ndarray, rig: LightRig) -> np.ndarray:
    """N . D for every point and light: (..., 3) -> (..., n)."""
    D = scaled_directions(rig.positions, rig.betas, vertices)
    return np.einsum("...c,...jc->...j", np.asarray(normals, dtype=float), D)



def _shading_terms(theta: np.ndarray, normals: np.ndarray, vertices: np.ndarray):
    """
    Clamped shading max(0, s_ij) and its derivatives w.r.t. (beta_j, P_j) for
    packed theta (n, 4).

    Returns s (m, n) and ds (m, n, 4), zero where the light is behind the
    surface; non-raising, distances may blow up.
    """
    betas, positions = theta[:, 0], theta[:, 1:]
    u = positions[None, :, :] - vertices[:, None, :]
    r2 = np.sum(u * u, axis=-1)
    r = np.sqrt(r2)
    r3 = r2 * r
    a = np.einsum("ic,ijc->ij", normals, u)
    s = betas * a / r3
    ds = np.empty(s.shape + (4,))
    ds[..., 0] = a / r3
    ds[..., 1:] = betas[None, :, None] * (normals[:, None, :] / r3[..., None]
                                          - 3.0 * (a / (r3 * r2))[..., None] * u)
    facing = s > 0
    return np.where(facing, s, 0.0), ds * facing[..., None]


def _pack(betas, positions) -> np.ndarray:
    return np.column_stack([np.asarray(betas, float), np.asarray(positions, float)])


# ---------------------------------------------------------------------------
# Objective, residuals and Jacobian
# ---------------------------------------------------------------------------
#
# Residual vector layout:
#   [ data (m*n, row i*n + j) | beta spread (n) | rho size (m) | distance prior (n) ]
# Parameter layout for the Jacobian:
#   [ rho_1..rho_m | beta_1, Px_1, Py_1, Pz_1 | ... | beta_n, Px_n, Py_n, Pz_n ]

def _stack_residuals(rho, s, theta, I, lam_beta, lam_rho, lam_P, d) -> np.ndarray:
    betas, positions = theta[:, 0], theta[:, 1:]
    data = I - rho[:, None] * s
    beta_spread = np.sqrt(lam_beta) * (betas.mean() - betas)
    rho_size = np.sqrt(lam_rho) * rho
    distance = np.sqrt(lam_P) * (np.linalg.norm(positions, axis=1) - d)
    return np.concatenate([data.ravel(), beta_spread, rho_size, distance])


def _jacobian_blocks(rho, s, ds, theta, lam_beta, lam_rho, lam_P):
    """Jacobian split into the rho columns (rows, m) and light columns (rows, 4n)."""
    m, n = s.shape
    rows = m * n + n + m + n
    J_rho = np.zeros((rows, m))
    J_theta = np.zeros((rows, 4 * n))

    J_rho[np.arange(m * n), np.repeat(np.arange(m), n)] = -s.ravel()
    data = np.zeros((m, n, n, 4))
    data[:, np.arange(n), np.arange(n), :] = -rho[:, None, None] * ds
    J_theta[:m * n] = data.reshape(m * n, 4 * n)

    off = m * n
    J_theta[off:off + n, 0::4] = np.sqrt(lam_beta) * (np.full((n, n), 1.0 / n) - np.eye(n))
    off += n
    J_rho[off + np.arange(m), np.arange(m)] = np.sqrt(lam_rho)
    off += m
    positions = theta[:, 1:]
    unit = positions / np.linalg.norm(positions, axis=1, keepdims=True)
    for j in range(n):
        J_theta[off + j, 4 * j + 1:4 * j + 4] = np.sqrt(lam_P) * unit[j]
    return J_rho, J_theta


def residuals(rho, betas, positions, normals, keypoints: KeyPointSet,
              config: CalibrationConfig) -> np.ndarray:
    """Stacked residual vector whose squared norm is the joint objective."""
    theta = _pack(betas, positions)
    rho = np.asarray(rho, dtype=float).reshape(-1)
    s, _ = _shading_terms(theta, np.asarray(normals, float), keypoints.positions)
    return _stack_residuals(rho, s, theta, keypoints.intensities,
                            config.lambda1, config.lambda2, config.lambda3, config.d)


def jacobian(rho, betas, positions, normals, keypoints: KeyPointSet,
             config: CalibrationConfig) -> np.ndarray:
    """Analytic Jacobian of residuals() w.r.t. [rho | (beta_j, P_j) per light]."""
    theta = _pack(betas, positions)
    rho = np.asarray(rho, dtype=float).reshape(-1)
    s, ds = _shading_terms(theta, np.asarray(normals, float), keypoints.positions)
    J_rho, J_theta = _jacobian_blocks(rho, s, ds, theta,
                                      config.lambda1, config.lambda2, config.lambda3)
    return np.hstack([J_rho, J_theta])


def objective(rho, rig: LightRig, normals, keypoints: KeyPointSet, config: CalibrationConfig) -> float:
    """
    Joint calibration objective, summed over every key point and light.

    sum_ij |I_ij - rho_i N_i.D_ij|^2 + l1 sum_j (mean(beta) - beta_j)^2
        + l2 |rho|^2 + l3 sum_j (|P_j| - d)^2

    N_i.D_ij is clamped at 0 for lights behind the surface.
    """
    r = residuals(rho, rig.betas, rig.positions, normals, keypoints, config)
    return float(r @ r)


def data_misfit(result: "CalibrationResult", keypoints: KeyPointSet) -> float:
    """Data term alone for a calibrated rig; unchanged by the rho / beta gauge."""
    s, _ = _shading_terms(_pack(result.rig.betas, result.rig.positions),
                          result.refined_normals, keypoints.positions)
    return float(np.sum((keypoints.intensities - result.keypoint_albedo[:, None] * s) ** 2))


# ---------------------------------------------------------------------------
# Closed-form albedo block
# ---------------------------------------------------------------------------

def _solve_albedo(s, I, lam_rho, uniform):
    """rho minimising the data + rho-size terms for fixed shading s."""
    m = s.shape[0]
    A = np.sum(s * I, axis=1)
    S = np.sum(s * s, axis=1) + lam_rho
    if uniform:
        A = np.full(m, A.sum())
        S = np.full(m, S.sum())
    rho = np.divide(A, S, out=np.zeros(m), where=S > 0)
    return rho, S


def _albedo_sensitivity(s, ds, I, rho, S, uniform) -> np.ndarray:
    """d rho / d theta for the closed-form albedo, shape (m, 4n)."""
    m, n = s.shape
    terms = (I - 2.0 * rho[:, None] * s)[..., None] * ds
    if uniform:
        terms = np.broadcast_to(terms.sum(axis=0, keepdims=True), terms.shape)
    safe = np.where(S > 0, S, 1.0)
    R = terms / safe[:, None, None]
    R[S <= 0] = 0.0
    return R.reshape(m, 4 * n)


# ---------------------------------------------------------------------------
# Damped Gauss-Newton step on the light block
# ---------------------------------------------------------------------------

def _gauge_basis(n: int) -> np.ndarray:
    """Columns spanning light-parameter steps that keep mean(beta) fixed."""
    Z = null_space(np.ones((1, n)))
    B = np.zeros((4 * n, (n - 1) + 3 * n))
    beta_idx = np.arange(n) * 4
    B[beta_idx, :n - 1] = Z
    for j in range(n):
        B[4 * j + 1:4 * j + 4, n - 1 + 3 * j:n - 1 + 3 * j + 3] = np.eye(3)
    return B


def _feasible(theta: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(theta)) and np.all(theta[:, 0] > 0) and np.all(theta[:, 3] > 0))


def _damped_step(theta, r, J, basis, mu, cost: Callable[[np.ndarray], float], escalations: int,
                 tol: float, floor: float):
    """
    One Levenberg-Marquardt step in the gauge-fixed light parameters.

    The first trial uses mu, each failed trial multiplies it by 10, up to
    `escalations` times. Returns (theta, cost, mu, status) with status:
        accepted   - a trial lowered the cost
        stationary - no trial lowered it, the most damped one did not raise it
                     beyond tol * cost (a minimum up to rounding)
        diverged   - the most damped trial still raised it
    """
    F = float(r @ r)
    Jb = J @ basis
    H = Jb.T @ Jb
    g = Jb.T @ r
    diag = np.diag(H).copy()
    diag = np.maximum(diag, 1e-12 * max(1.0, float(diag.max(initial=0.0))))

    F_last = np.inf
    for _ in range(escalations + 1):
        try:
            step = np.linalg.solve(H + mu * np.diag(diag), -g)
        except np.linalg.LinAlgError:
            F_last = np.inf
            mu *= 10.0
            continue
        candidate = theta + (basis @ step).reshape(theta.shape)
        F_last = np.inf
        if _feasible(candidate):
            with np.errstate(all="ignore"):
                F_new = cost(candidate)
            if np.isfinite(F_new):
                if F_new < F:
                    return candidate, F_new, max(mu / 3.0, MU_FLOOR), "accepted"
                F_last = F_new
        mu *= 10.0
    if F_last - F <= tol * F + floor:
        return theta, F, mu, "stationary"
    return theta, F, mu, "diverged"


def _gauge_factor(betas: np.ndarray, rho: np.ndarray, lam_beta: float, lam_rho: float) -> float:
    """
    k minimising lam_beta * k^2 * spread + lam_rho * |rho|^2 / k^2 along
    beta -> k * beta, rho -> rho / k, limited to one GAUGE_STEP per call.
    """
    B = float(rho @ rho)
    if lam_rho <= 0 or B <= 0:
        return 1.0
    A = float(np.sum((betas.mean() - betas) ** 2))
    k = (lam_rho * B / (lam_beta * A)) ** 0.25 if lam_beta * A > 0 else np.inf
    return float(np.clip(k, 1.0 / GAUGE_STEP, GAUGE_STEP))


def _converged(previous: float, current: float, tol: float, floor: float) -> bool:
    return current <= floor or (previous - current) <= tol * previous


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def fibonacci_hemisphere(k: int, radius: float) -> np.ndarray:
    """k points spread evenly over the z > 0 half-sphere of the given radius."""
    i = np.arange(k)
    z = 1.0 - (i + 0.5) / k
    r = np.sqrt(1.0 - z * z)
    phi = i * GOLDEN_ANGLE
    return radius * np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def _initial_positions(keypoints: KeyPointSet, rho0: np.ndarray, config: CalibrationConfig) -> np.ndarray:
    """
    Starting light positions on the radius-d half-sphere.

    Every light picks the spiral point whose shading, with the best scalar
    intensity, fits its key-point column best.
    """
    n = keypoints.n_lights
    I = keypoints.intensities
    candidates = fibonacci_hemisphere(max(config.init_candidates, n), config.d)
    theta_c = _pack(np.ones(len(candidates)), candidates)
    with np.errstate(all="ignore"):
        s, _ = _shading_terms(theta_c, keypoints.normals, keypoints.positions)
        shade = rho0[:, None] * s
        num = I.T @ shade
        den = np.sum(shade * shade, axis=0)[None, :]
        base = np.sum(I * I, axis=0)[:, None]
        fit = np.where((den > 0) & (num > 0), base - num * num / den, np.inf)
    fit[~np.isfinite(fit)] = np.inf
    return candidates[np.argmin(fit, axis=1)]


def _check_keypoints(keypoints: KeyPointSet):
    if keypoints.count < 4:
        raise InsufficientSmoothRegion(
            f"Light calibration needs at least 4 key points, got {keypoints.count}")
    if keypoints.n_lights < 1:
        raise InsufficientSmoothRegion("Light calibration needs at least one light")


def _reported(theta: np.ndarray, rho: np.ndarray) -> Tuple[LightRig, np.ndarray]:
    """Rig and albedo in the gauge mean(beta) = 1."""
    if not _feasible(theta):
        raise DivergedSolve("Calibrated rig left the feasible set (beta <= 0 or z <= 0)")
    scale = float(theta[:, 0].mean())
    return LightRig(theta[:, 1:].copy(), theta[:, 0] / scale), rho * scale


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------

def calibrate_joint(keypoints: KeyPointSet, config: CalibrationConfig,
                    initial_rig: Optional[LightRig] = None) -> CalibrationResult:
    """
    Jointly estimate albedo, light intensities and light positions.

    rho starts at each key point's brightest sample, beta at 1 and P on the
    radius-d half-sphere (or at initial_rig when warm-starting). Each outer
    iteration solves rho in closed form, takes one damped Gauss-Newton step
    on (beta, P) with mean(beta) held, then rescales the rho / beta gauge.

    Args:
        keypoints: Key points with proxy normals and positions
        config: Weights and stopping rules
        initial_rig: Optional warm start

    Returns:
        CalibrationResult with the objective after every iteration

    Raises:
        DivergedSolve: when every damped trial of a step raises the objective
    """
    _check_keypoints(keypoints)
    m, n = keypoints.count, keypoints.n_lights
    I, N, V = keypoints.intensities, keypoints.normals, keypoints.positions
    uniform = config.uniform_albedo
    lam = (config.lambda1, config.lambda2, config.lambda3)

    rho0 = I.max(axis=1)
    if uniform:
        rho0 = np.full(m, rho0.mean())
    if initial_rig is not None:
        theta = _pack(initial_rig.betas, initial_rig.positions)
        theta[:, 0] /= theta[:, 0].mean()
    else:
        theta = _pack(np.ones(n), _initial_positions(keypoints, rho0, config))

    def albedo(th):
        s, ds = _shading_terms(th, N, V)
        rho, S = _solve_albedo(s, I, config.lambda2, uniform)
        return s, ds, rho, S

    def evaluate(th, with_jacobian=False):
        s, ds, rho, S = albedo(th)
        r = _stack_residuals(rho, s, th, I, *lam, config.d)
        if not with_jacobian:
            return r
        J_rho, J_theta = _jacobian_blocks(rho, s, ds, th, *lam)
        R = _albedo_sensitivity(s, ds, I, rho, S, uniform)
        return r, J_theta + J_rho @ R

    def cost(th):
        r = evaluate(th)
        return float(r @ r)

    with np.errstate(all="ignore"):
        s0, _ = _shading_terms(theta, N, V)
        r0 = _stack_residuals(rho0, s0, theta, I, *lam, config.d)
    F0 = float(r0 @ r0)
    if not np.isfinite(F0):
        raise DivergedSolve("Objective is not finite at the starting point")

    basis = _gauge_basis(n)
    floor = 1e-24 * max(1.0, float(np.sum(I * I)))
    trace = [F0]
    mu = 1e-3
    for iteration in range(1, config.max_outer_iters + 1):
        with np.errstate(all="ignore"):
            r, J = evaluate(theta, with_jacobian=True)
        theta, F, mu, status = _damped_step(theta, r, J, basis, mu, cost,
                                            config.max_damping_escalations, config.tol, floor)
        if status == "diverged":
            logger.error("❌ Joint calibration diverged at iteration %d", iteration)
            raise DivergedSolve(
                f"Joint calibration objective rose through {config.max_damping_escalations} "
                f"damping escalations at iteration {iteration}")

        rescaled = False
        k = _gauge_factor(theta[:, 0], albedo(theta)[2], config.lambda1, config.lambda2)
        if k != 1.0:
            candidate = theta.copy()
            candidate[:, 0] *= k
            with np.errstate(all="ignore"):
                F_k = cost(candidate)
            if np.isfinite(F_k) and F - F_k > config.tol * F:
                theta, F, rescaled = candidate, F_k, True

        trace.append(F)
        logger.debug("joint iter %d: objective %.6e (%s, mu=%.1e, gauge x%.3g)", iteration, F,
                     status, mu, k if rescaled else 1.0)
        if status == "stationary" and not rescaled:
            break
        if _converged(trace[-2], F, config.tol, floor):
            break

    _, _, rho, _ = albedo(theta)
    rig, rho = _reported(theta, rho)
    if np.any(rho <= 0):
        logger.warning("⚠️ %d key points ended with non-positive albedo", int(np.sum(rho <= 0)))
    logger.info("✓ Joint calibration: %d iterations, objective %.6e", len(trace) - 1, trace[-1])
    return CalibrationResult(rig, rho, N.copy(), tuple(trace))


def _update_albedo_normals(theta, rho, normals, anchor, V, I, lam_n, uniform, passes):
    """
    Albedo and normal update for fixed lights, accepted only where it lowers
    the per-point cost |I_i - rho_i max(0, N_i.D_i)|^2 + lam_n |N_i - anchor_i|^2.
    """
    m = len(rho)
    u = theta[None, :, 1:] - V[:, None, :]
    dist = np.linalg.norm(u, axis=-1)
    D = theta[None, :, 0, None] * u / dist[..., None] ** 3

    def point_cost(r, Nh):
        s = np.maximum(0.0, np.einsum("ic,ijc->ij", Nh, D))
        return np.sum((I - r[:, None] * s) ** 2, axis=1) + lam_n * np.sum((Nh - anchor) ** 2, axis=1)

    cost = point_cost(rho, normals)
    eye = np.eye(3)
    for _ in range(passes):
        s = np.einsum("ic,ijc->ij", normals, D)
        facing = (s > 0).astype(float)
        rho_c, _ = _solve_albedo(s * facing, I, 0.0, uniform)
        DD = np.einsum("ij,ijc,ijd->icd", facing, D, D)
        DI = np.einsum("ij,ij,ijc->ic", facing, I, D)
        M = (rho_c ** 2)[:, None, None] * DD + lam_n * eye
        M += 1e-12 * (1.0 + np.trace(M, axis1=1, axis2=2))[:, None, None] * eye
        b = rho_c[:, None] * DI + lam_n * anchor
        N_c = np.linalg.solve(M, b[..., None])[..., 0]
        length = np.linalg.norm(N_c, axis=1, keepdims=True)
        N_c = np.where(length > 0, N_c / np.where(length > 0, length, 1.0), normals)
        cost_c = point_cost(rho_c, N_c)

        if uniform:
            accept = np.full(m, cost_c.sum() < cost.sum())
        else:
            accept = cost_c < cost
        rho = np.where(accept, rho_c, rho)
        normals = np.where(accept[:, None], N_c, normals)
        cost = np.where(accept, cost_c, cost)
    return rho, normals


def refine_alternating(result: CalibrationResult, keypoints: KeyPointSet,
                       config: CalibrationConfig) -> CalibrationResult:
    """
    Refine lights by alternating two sub-problems until the objective settles.

    (a) lights fixed: per key point, rho_i and a unit normal N_hat_i anchored
        to the proxy normal with weight lambda_n
    (b) albedo and normals fixed: (beta, P) with lambda_beta and lambda_P priors

    Args:
        result: Output of calibrate_joint
        keypoints: The same key points
        config: Weights and stopping rules

    Returns:
        CalibrationResult with refined normals and the refinement trace

    Raises:
        DivergedSolve: when every damped trial of a light step raises the objective
    """
    _check_keypoints(keypoints)
    I, N, V = keypoints.intensities, keypoints.normals, keypoints.positions
    n = keypoints.n_lights
    lam = (config.lambda_beta, 0.0, config.lambda_P)

    theta = _pack(result.rig.betas, result.rig.positions)
    rho = np.array(result.keypoint_albedo, dtype=float)
    normals = np.array(result.refined_normals, dtype=float)

    def total(th, r_, Nh):
        s, _ = _shading_terms(th, Nh, V)
        r = _stack_residuals(r_, s, th, I, *lam, config.d)
        return float(r @ r) + config.lambda_n * float(np.sum((Nh - N) ** 2))

    basis = _gauge_basis(n)
    floor = 1e-24 * max(1.0, float(np.sum(I * I)))
    trace = [total(theta, rho, normals)]
    mu = 1e-3
    for iteration in range(1, config.max_outer_iters + 1):
        with np.errstate(all="ignore"):
            rho, normals = _update_albedo_normals(theta, rho, normals, N, V, I, config.lambda_n,
                                                  config.uniform_albedo, config.normal_passes)
            anchor = config.lambda_n * float(np.sum((normals - N) ** 2))
            s, ds = _shading_terms(theta, normals, V)
            r = _stack_residuals(rho, s, theta, I, *lam, config.d)
            _, J_theta = _jacobian_blocks(rho, s, ds, theta, *lam)

        def cost(th, rho=rho, normals=normals):
            s_, _ = _shading_terms(th, normals, V)
            r_ = _stack_residuals(rho, s_, th, I, *lam, config.d)
            return float(r_ @ r_)

        theta, F, mu, status = _damped_step(theta, r, J_theta, basis, mu, cost,
                                            config.max_damping_escalations, config.tol, floor)
        if status == "diverged":
            logger.error("❌ Alternating refinement diverged at iteration %d", iteration)
            raise DivergedSolve(
                f"Alternating refinement objective rose through {config.max_damping_escalations} "
                f"damping escalations at iteration {iteration}")
        trace.append(F + anchor)
        logger.debug("refine iter %d: objective %.6e (%s)", iteration, trace[-1], status)
        if status == "stationary" or _converged(trace[-2], trace[-1], config.tol, floor):
            break

    rig, rho = _reported(theta, rho)
    logger.info("✓ Alternating refinement: %d iterations, objective %.6e", len(trace) - 1, trace[-1])
    return CalibrationResult(rig, rho, normals, tuple(trace))


# ---------------------------------------------------------------------------
# Parallel-light baseline
# ---------------------------------------------------------------------------

def fit_parallel_lights(keypoints: KeyPointSet, albedo: Optional[np.ndarray] = None,
                        intensity_floor: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Directional lights from known albedo and normals: I_:,j = diag(rho) N L_j.

    Args:
        keypoints: Key points (ground-truth normals in synthetic mode)
        albedo: Per key point albedo; defaults to keypoints.albedo, else 1

    Returns:
        (unit directions (n, 3), strengths (n,))
    """
    if albedo is None:
        albedo = keypoints.albedo if keypoints.albedo is not None else np.ones(keypoints.count)
    A = np.asarray(albedo, dtype=float)[:, None] * keypoints.normals
    if keypoints.count < 3 or np.linalg.matrix_rank(A) < 3:
        raise RankDeficient("Key point normals do not span 3D; cannot fit parallel lights")

    lights = np.zeros((keypoints.n_lights, 3))
    for j in range(keypoints.n_lights):
        lit = keypoints.intensities[:, j] > intensity_floor
        if lit.sum() < 3 or np.linalg.matrix_rank(A[lit]) < 3:
            raise RankDeficient(f"Light {j}: lit key points do not span 3D")
        lights[j], *_ = np.linalg.lstsq(A[lit], keypoints.intensities[lit, j], rcond=None)

    strengths = np.linalg.norm(lights, axis=1)
    return lights / strengths[:, None], strengths


def calibrate_parallel_baseline(keypoints: KeyPointSet, albedo: Optional[np.ndarray] = None) -> np.ndarray:
    """Unit light directions under the parallel-light assumption."""
    directions, _ = fit_parallel_lights(keypoints, albedo)
    return directions


def angular_error_deg(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Angle in degrees between matching rows of two direction arrays."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    cos = np.sum(a * b, axis=-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
