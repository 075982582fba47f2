"""
Integration
===========
Gradient field -> depth map, depth error metric and mesh export.

Integration is the least-squares problem over neighbouring mask pixels

    z_q - z_p = s (g_p + g_q) / 2       (s = pixel_scale)

whose normal equations are the Neumann Poisson equation L z = D^T g.
Rectangular masks are solved with a 2D DCT, anything else with
preconditioned conjugate gradients on the sparse graph Laplacian.
"""

import logging
import os
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import scipy.sparse as sp
from scipy.fft import dctn, idctn
from scipy.optimize import minimize_scalar
from scipy.sparse.linalg import LinearOperator, cg

from core import DepthMap, GradientField
from errors import DegenerateTruth, EmptyRegion, ImageFormatError, InvalidGeometry, SingularSystem
from image_io import write_obj, write_ply

logger = logging.getLogger(__name__)

CG_RTOL = 1e-10


# ---------------------------------------------------------------------------
# Poisson integration
# ---------------------------------------------------------------------------

def _edge_targets(G: GradientField):
    """Horizontal and vertical edge targets between mask pixels, NaN where an edge is missing."""
    s = G.plane.pixel_scale
    mask = G.mask
    horizontal = mask[:, :-1] & mask[:, 1:]
    vertical = mask[:-1, :] & mask[1:, :]
    tx = np.where(horizontal, s * 0.5 * (G.gx[:, :-1] + G.gx[:, 1:]), np.nan)
    ty = np.where(vertical, s * 0.5 * (G.gy[:-1, :] + G.gy[1:, :]), np.nan)
    return tx, ty


def _divergence(tx: np.ndarray, ty: np.ndarray, shape) -> np.ndarray:
    """D^T t: every edge adds its target to the far pixel and subtracts it from the near one."""
    tx = np.nan_to_num(tx)
    ty = np.nan_to_num(ty)
    rhs = np.zeros(shape)
    rhs[:, 1:] += tx
    rhs[:, :-1] -= tx
    rhs[1:, :] += ty
    rhs[:-1, :] -= ty
    return rhs


def _solve_dct(rhs: np.ndarray) -> np.ndarray:
    H, W = rhs.shape
    kx = 2.0 - 2.0 * np.cos(np.pi * np.arange(W) / W)
    ky = 2.0 - 2.0 * np.cos(np.pi * np.arange(H) / H)
    eig = ky[:, None] + kx[None, :]
    eig[0, 0] = 1.0
    z_hat = dctn(rhs, type=2, norm="ortho") / eig
    z_hat[0, 0] = 0.0
    return idctn(z_hat, type=2, norm="ortho")


def _laplacian(mask: np.ndarray) -> Tuple[sp.csr_matrix, np.ndarray]:
    """Graph Laplacian over mask pixels and the pixel index map."""
    index = np.full(mask.shape, -1, dtype=np.int64)
    index[mask] = np.arange(int(mask.sum()))
    pairs = []
    for a, b in ((index[:, :-1], index[:, 1:]), (index[:-1, :], index[1:, :])):
        both = (a >= 0) & (b >= 0)
        pairs.append(np.stack([a[both], b[both]], axis=1))
    edges = np.concatenate(pairs)
    n_edges, n_pix = len(edges), int(mask.sum())
    rows = np.repeat(np.arange(n_edges), 2)
    cols = edges.ravel()
    vals = np.tile([-1.0, 1.0], n_edges)
    D = sp.csr_matrix((vals, (rows, cols)), shape=(n_edges, n_pix))
    return (D.T @ D).tocsr(), index


def _solve_sparse(rhs: np.ndarray, mask: np.ndarray) -> np.ndarray:
    L, index = _laplacian(mask)
    b = rhs[mask]
    degree = L.diagonal()
    inv = np.where(degree > 0, 1.0 / np.where(degree > 0, degree, 1.0), 1.0)
    M = LinearOperator(L.shape, matvec=lambda x: inv * x, dtype=float)
    x, info = cg(L, b, rtol=CG_RTOL, atol=0.0, maxiter=10 * L.shape[0] + 100, M=M)
    if info > 0:
        logger.warning("⚠️ Conjugate gradients stopped after %d iterations without reaching rtol=%g",
                       info, CG_RTOL)
    z = np.zeros(mask.shape)
    z[mask] = x
    return z


def _bounding_box(mask: np.ndarray):
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    return slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1)


def integrate(G: GradientField) -> DepthMap:
    """
    Integrate a gradient field into a zero-mean depth map in world units.

    Args:
        G: Gradient field, finite on its mask

    Returns:
        DepthMap over G.mask
    """
    mask = G.mask
    if not mask.any():
        raise SingularSystem("Cannot integrate over an empty mask")

    tx, ty = _edge_targets(G)
    rhs = _divergence(tx, ty, mask.shape)
    box = _bounding_box(mask)
    if mask[box].all():
        z = np.zeros(mask.shape)
        z[box] = _solve_dct(rhs[box])
        backend = "dct"
    else:
        z = _solve_sparse(rhs, mask)
        backend = "cg"
    logger.info("✓ Integrated %d pixels (%s)", int(mask.sum()), backend)
    return DepthMap.centered(G.plane, z, mask)


# ---------------------------------------------------------------------------
# Error metric
# ---------------------------------------------------------------------------

def _l1_alignment(recon: np.ndarray, truth: np.ndarray, fit_scale: bool) -> Tuple[float, float]:
    """(scale, offset) minimizing mean |scale * recon + offset - truth|."""

    def offset_for(a):
        return float(np.median(truth - a * recon))

    if not fit_scale:
        return 1.0, offset_for(1.0)

    def cost(a):
        return float(np.mean(np.abs(a * recon + offset_for(a) - truth)))

    centered = recon - recon.mean()
    denom = float(centered @ centered)
    a0 = float(centered @ (truth - truth.mean())) / denom if denom > 0 else 1.0
    bound = 3.0 * abs(a0) + 1.0
    result = minimize_scalar(cost, bounds=(-bound, bound), method="bounded", options={"xatol": 1e-10})
    a = float(result.x) if cost(result.x) <= cost(a0) else a0
    return a, offset_for(a)


def depth_error(recon: DepthMap, truth: DepthMap, fit_scale: bool = False) -> float:
    """
    Mean absolute depth error after L1 alignment, divided by the truth depth range.

    Args:
        recon: Reconstructed depth
        truth: Ground-truth depth on the same plane
        fit_scale: Also fit a scale factor, not just an offset

    Returns:
        Normalized error (0 = perfect)
    """
    if recon.depth.shape != truth.depth.shape:
        raise InvalidGeometry("Depth maps live on different image planes")
    mask = recon.mask & truth.mask
    if not mask.any():
        raise EmptyRegion("Depth maps share no pixels")
    r = recon.depth[mask]
    t = truth.depth[mask]
    depth_range = float(t.max() - t.min())
    if depth_range == 0:
        raise DegenerateTruth("Ground-truth depth has zero range")
    a, b = _l1_alignment(r, t, fit_scale)
    return float(np.mean(np.abs(a * r + b - t)) / depth_range)


# ---------------------------------------------------------------------------
# Meshes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray


def build_mesh(depth: DepthMap, pixel_scale: float = None) -> Mesh:
    """
    Two triangles per 2x2 block whose four pixels are all on the mask.

    Vertices are (col * s, row * s, z) for every mask pixel, in row-major order.
    """
    s = depth.plane.pixel_scale if pixel_scale is None else pixel_scale
    mask = depth.mask
    index = np.full(mask.shape, -1, dtype=np.int64)
    rows, cols = np.nonzero(mask)
    index[rows, cols] = np.arange(rows.size)
    vertices = np.column_stack([cols * s, rows * s, depth.depth[rows, cols]])

    p00, p01 = index[:-1, :-1], index[:-1, 1:]
    p10, p11 = index[1:, :-1], index[1:, 1:]
    full = (p00 >= 0) & (p01 >= 0) & (p10 >= 0) & (p11 >= 0)
    a, b, c, d = p00[full], p01[full], p10[full], p11[full]
    faces = np.concatenate([np.stack([a, c, b], axis=1), np.stack([b, c, d], axis=1)])
    # interleave so each quad's two triangles are adjacent
    faces = faces.reshape(2, -1, 3).transpose(1, 0, 2).reshape(-1, 3)
    return Mesh(vertices, faces)


def export_mesh(depth: DepthMap, path: str, pixel_scale: float = None) -> Mesh:
    """Write the depth map as OBJ or binary PLY, chosen by file extension."""
    mesh = build_mesh(depth, pixel_scale)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".obj":
        write_obj(path, mesh.vertices, mesh.faces)
    elif ext == ".ply":
        write_ply(path, mesh.vertices, mesh.faces)
    else:
        raise ImageFormatError(f"Mesh format must be .obj or .ply, got '{ext}'")
    logger.info("✓ Wrote mesh with %d vertices and %d triangles to %s",
                len(mesh.vertices), len(mesh.faces), path)
    return mesh
