"""
Image and Mesh I/O
==================
File formats read and written by the CLI:

    - observations: one 16-bit PNG or float PFM per light
    - proxy maps: 3-channel PFM normals/positions, 8-bit PNG masks, plane.json
    - light rig: JSON {"lights": [{"position": [x, y, z], "beta": b}, ...]}
    - key points: CSV for inspection
    - depth / gradients / normals: PFM
    - meshes: ASCII OBJ or binary little-endian PLY

Inputs must be linear radiance; no gamma curve is undone here.
"""

import glob
import json
import logging
import os
from typing import List, Optional, Tuple

import cv2
import numpy as np
import pandas as pd

from core import DepthMap, GradientField, ImagePlane, KeyPointSet, LightRig, ObservationStack, ProxyGeometry
from errors import ImageFormatError, InvalidGeometry

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".pfm", ".png")
PNG16_MAX = 65535.0


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------

def read_pfm(path: str) -> np.ndarray:
    """
    Read a PFM file into float32 (H, W) or (H, W, 3), first row = top of image.

    Args:
        path: File path

    Returns:
        Image array
    """
    try:
        with open(path, "rb") as f:
            kind = f.readline().decode("ascii").strip()
            dims = f.readline().decode("ascii").split()
            scale = float(f.readline().decode("ascii").strip())
            payload = f.read()
    except (OSError, UnicodeDecodeError, ValueError) as e:
        raise ImageFormatError(f"Cannot read PFM header of {path}: {e}") from e

    if kind not in ("Pf", "PF") or len(dims) != 2:
        raise ImageFormatError(f"{path} is not a PFM file")
    width, height = int(dims[0]), int(dims[1])
    channels = 3 if kind == "PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"

    expected = width * height * channels
    data = np.frombuffer(payload, dtype=dtype, count=-1)
    if data.size < expected:
        raise ImageFormatError(f"{path}: truncated PFM payload ({data.size} of {expected} floats)")
    data = data[:expected].reshape(height, width, channels)
    # PFM stores rows bottom-to-top
    image = np.flipud(data).astype(np.float32)
    return image[:, :, 0] if channels == 1 else image


def write_pfm(path: str, image: np.ndarray) -> None:
    """Write a float (H, W) or (H, W, 3) array as little-endian PFM."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    if image.ndim == 2:
        kind = "Pf"
    elif image.ndim == 3 and image.shape[2] == 3:
        kind = "PF"
    else:
        raise ImageFormatError(f"PFM holds 1 or 3 channels, got shape {image.shape}")

    _ensure_parent(path)
    height, width = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{kind}\n{width} {height}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(np.flipud(image)).astype("<f4").tobytes())


# ---------------------------------------------------------------------------
# Single images and masks
# ---------------------------------------------------------------------------

def _luminance(image: np.ndarray, bgr: bool) -> np.ndarray:
    if image.ndim == 2:
        return image
    if image.shape[2] == 4:
        image = image[:, :, :3]
    if bgr:
        return cv2.cvtColor(image, cv2.COLOR_BGR2GRAY)
    return cv2.cvtColor(image, cv2.COLOR_RGB2GRAY)


def read_image(path: str) -> np.ndarray:
    """
    Read one observation as single-channel float64 linear intensity.

    PNG values are scaled to [0, 1] by the bit depth; colour images are
    reduced to luminance.
    """
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pfm":
        return _luminance(read_pfm(path), bgr=False).astype(np.float64)
    if ext != ".png":
        raise ImageFormatError(f"Unsupported image format: {path}")

    image = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if image is None:
        raise ImageFormatError(f"Cannot decode image {path}")
    if image.dtype == np.uint16:
        peak = PNG16_MAX
    elif image.dtype == np.uint8:
        peak = 255.0
    else:
        raise ImageFormatError(f"{path}: unsupported PNG sample type {image.dtype}")
    gray = _luminance(image.astype(np.float32), bgr=True)
    return gray.astype(np.float64) / peak


def write_png16(path: str, image: np.ndarray) -> None:
    """Write a [0, 1] single-channel image as 16-bit PNG."""
    _ensure_parent(path)
    values = np.clip(np.nan_to_num(np.asarray(image, dtype=float)), 0.0, 1.0)
    if not cv2.imwrite(path, np.round(values * PNG16_MAX).astype(np.uint16)):
        raise ImageFormatError(f"Failed to write {path}")


def read_mask(path: str) -> np.ndarray:
    image = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if image is None:
        raise ImageFormatError(f"Cannot decode mask {path}")
    if image.ndim == 3:
        image = image.max(axis=2)
    return image != 0


def write_mask(path: str, mask: np.ndarray) -> None:
    _ensure_parent(path)
    if not cv2.imwrite(path, np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8)):
        raise ImageFormatError(f"Failed to write {path}")


# ---------------------------------------------------------------------------
# Observation stacks
# ---------------------------------------------------------------------------

def list_images(directory: str) -> List[str]:
    """Image files in a directory, sorted by name (one per light)."""
    paths = []
    for ext in IMAGE_EXTENSIONS:
        paths.extend(glob.glob(os.path.join(directory, f"*{ext}")))
    return sorted(paths)


def load_observations(directory: str, plane: Optional[ImagePlane] = None) -> ObservationStack:
    """
    Load every image in a directory as one light layer.

    Args:
        directory: Folder with one PNG/PFM per light
        plane: Image plane to attach; built from the image size if omitted

    Returns:
        ObservationStack (not normalized)
    """
    paths = list_images(directory)
    if not paths:
        raise ImageFormatError(f"No .png or .pfm images found in {directory}")
    layers = [read_image(p) for p in paths]
    shapes = {layer.shape for layer in layers}
    if len(shapes) != 1:
        raise ImageFormatError(f"Images in {directory} have different sizes: {sorted(shapes)}")
    height, width = layers[0].shape
    if plane is None:
        plane = ImagePlane(width, height)
    logger.info("✓ Loaded %d observations (%dx%d) from %s", len(layers), width, height, directory)
    return ObservationStack(plane, np.stack(layers, axis=2))


def save_observations(obs: ObservationStack, directory: str, fmt: str = "pfm") -> List[str]:
    """Write one file per light as light_XX.<fmt>; returns the paths."""
    if fmt not in ("pfm", "png"):
        raise ImageFormatError(f"Unknown observation format '{fmt}'")
    os.makedirs(directory, exist_ok=True)
    paths = []
    for j in range(obs.n_lights):
        path = os.path.join(directory, f"light_{j:02d}.{fmt}")
        if fmt == "pfm":
            write_pfm(path, obs.intensities[:, :, j])
        else:
            write_png16(path, obs.intensities[:, :, j])
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Proxy geometry
# ---------------------------------------------------------------------------

PROXY_FILES = {
    "normals": "normals.pfm",
    "positions": "positions.pfm",
    "recon_mask": "recon_mask.png",
    "smooth_mask": "smooth_mask.png",
    "hairy_mask": "hairy_mask.png",
    "plane": "plane.json",
}


def save_proxy(proxy: ProxyGeometry, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    write_pfm(os.path.join(directory, PROXY_FILES["normals"]), proxy.normals)
    write_pfm(os.path.join(directory, PROXY_FILES["positions"]), proxy.positions)
    for name in ("recon_mask", "smooth_mask", "hairy_mask"):
        write_mask(os.path.join(directory, PROXY_FILES[name]), getattr(proxy, name))
    with open(os.path.join(directory, PROXY_FILES["plane"]), "w") as f:
        json.dump(proxy.plane.to_dict(), f, indent=2)


def load_proxy(directory: str) -> ProxyGeometry:
    """
    Load proxy maps written by save_proxy (or by an external proxy fitter).

    Normals are re-normalized inside recon_mask since float32 storage
    loses the 1e-6 unit-length tolerance.
    """
    plane_path = os.path.join(directory, PROXY_FILES["plane"])
    normals = read_pfm(os.path.join(directory, PROXY_FILES["normals"])).astype(np.float64)
    positions = read_pfm(os.path.join(directory, PROXY_FILES["positions"])).astype(np.float64)
    masks = {name: read_mask(os.path.join(directory, PROXY_FILES[name]))
             for name in ("recon_mask", "smooth_mask", "hairy_mask")}

    height, width = normals.shape[:2]
    if os.path.exists(plane_path):
        with open(plane_path) as f:
            info = json.load(f)
        plane = ImagePlane(int(info["width"]), int(info["height"]), float(info.get("pixel_scale", 1.0)))
    else:
        plane = ImagePlane(width, height)

    lengths = np.linalg.norm(normals, axis=-1, keepdims=True)
    recon = masks["recon_mask"]
    if np.any(lengths[recon] == 0):
        raise InvalidGeometry("Proxy normal map has zero vectors inside recon_mask")
    normals = np.where(recon[..., None], normals / np.where(lengths > 0, lengths, 1.0), normals)
    return ProxyGeometry(plane, normals, positions, **masks)


# ---------------------------------------------------------------------------
# Light rigs and key points
# ---------------------------------------------------------------------------

def save_rig(rig: LightRig, path: str) -> None:
    _ensure_parent(path)
    with open(path, "w") as f:
        json.dump(rig.to_dict(), f, indent=2)


def load_rig(path: str) -> LightRig:
    try:
        with open(path) as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise InvalidGeometry(f"Cannot read light rig {path}: {e}") from e
    return LightRig.from_dict(data)


def keypoints_frame(keypoints: KeyPointSet) -> pd.DataFrame:
    """One row per key point: x, y, Nx, Ny, Nz, Vx, Vy, Vz, I_1..I_n."""
    frame = pd.DataFrame({
        "x": keypoints.pixels[:, 1],
        "y": keypoints.pixels[:, 0],
        "Nx": keypoints.normals[:, 0],
        "Ny": keypoints.normals[:, 1],
        "Nz": keypoints.normals[:, 2],
        "Vx": keypoints.positions[:, 0],
        "Vy": keypoints.positions[:, 1],
        "Vz": keypoints.positions[:, 2],
    })
    for j in range(keypoints.n_lights):
        frame[f"I_{j + 1}"] = keypoints.intensities[:, j]
    return frame


def save_keypoints_csv(keypoints: KeyPointSet, path: str) -> None:
    _ensure_parent(path)
    keypoints_frame(keypoints).to_csv(path, index=False)


# ---------------------------------------------------------------------------
# Stage outputs
# ---------------------------------------------------------------------------

def save_depth(depth: DepthMap, path: str) -> None:
    """Depth as 1-channel PFM, NaN off mask."""
    write_pfm(path, depth.depth)


def load_depth(path: str, plane: Optional[ImagePlane] = None) -> DepthMap:
    values = read_pfm(path).astype(np.float64)
    if values.ndim != 2:
        raise ImageFormatError(f"{path}: depth must be single-channel")
    if plane is None:
        plane = ImagePlane(values.shape[1], values.shape[0])
    mask = np.isfinite(values)
    return DepthMap.centered(plane, np.where(mask, values, 0.0), mask)


def save_gradients(gradients: GradientField, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    write_pfm(os.path.join(directory, "gx.pfm"), gradients.gx)
    write_pfm(os.path.join(directory, "gy.pfm"), gradients.gy)


def normal_preview(normals: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """False-colour 8-bit BGR rendering of a normal map, black off mask."""
    rgb = np.clip((np.nan_to_num(normals) + 1.0) * 0.5 * 255.0, 0, 255).astype(np.uint8)
    rgb[~np.asarray(mask, bool)] = 0
    return rgb[:, :, ::-1].copy()


def save_normal_map(normals: np.ndarray, path: str, mask: Optional[np.ndarray] = None,
                    preview_path: Optional[str] = None) -> None:
    write_pfm(path, normals)
    if preview_path:
        mask = np.ones(normals.shape[:2], bool) if mask is None else mask
        _ensure_parent(preview_path)
        cv2.imwrite(preview_path, normal_preview(normals, mask))


def save_validity_masks(valid: np.ndarray, directory: str) -> List[str]:
    """One PNG per light from a (H, W, n) boolean array."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for j in range(valid.shape[2]):
        path = os.path.join(directory, f"valid_light_{j:02d}.png")
        write_mask(path, valid[:, :, j])
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Meshes
# ---------------------------------------------------------------------------

def write_obj(path: str, vertices: np.ndarray, faces: np.ndarray) -> None:
    """ASCII OBJ with 1-based face indices."""
    _ensure_parent(path)
    with open(path, "w") as f:
        f.write(f"# {len(vertices)} vertices, {len(faces)} faces\n")
        for x, y, z in vertices:
            f.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        for a, b, c in faces:
            f.write(f"f {a + 1} {b + 1} {c + 1}\n")


def read_obj(path: str) -> Tuple[np.ndarray, np.ndarray]:
    """Vertices (V, 3) and 0-based triangle faces (F, 3) from an OBJ file."""
    vertices, faces = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vertices.append([float(v) for v in parts[1:4]])
            elif parts[0] == "f":
                # "f 1/1/1 2/2/2 ..." keeps only the vertex index
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.array(vertices, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def write_ply(path: str, vertices: np.ndarray, faces: np.ndarray) -> None:
    """Binary little-endian PLY with float vertices and uchar/int face lists."""
    _ensure_parent(path)
    vertices = np.asarray(vertices, dtype="<f4").reshape(-1, 3)
    faces = np.asarray(faces, dtype="<i4").reshape(-1, 3)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(vertices)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        f"element face {len(faces)}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    face_records = np.empty(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    face_records["n"] = 3
    face_records["idx"] = faces
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(vertices.tobytes())
        f.write(face_records.tobytes())
