import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from core import KeyPointSet, normalize_observations  # noqa: E402
from renderer import make_bumpy_scene, make_ring_rig, make_sphere_scene, render  # noqa: E402


def sphere_keypoints(m=60, seed=0, rig=None, albedo=None):
    """Key points drawn from the visible half of a unit-ish sphere, rendered exactly."""
    rng = np.random.default_rng(seed)
    rig = rig or make_ring_rig(5, 1.0)
    theta = np.radians(rng.uniform(0.0, 55.0, m))
    phi = rng.uniform(0.0, 2.0 * np.pi, m)
    normals = np.column_stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])
    positions = 0.2 * normals - np.array([0.0, 0.0, 0.1])
    if albedo is None:
        albedo = rng.uniform(0.4, 0.9, m)
    u = rig.positions[None, :, :] - positions[:, None, :]
    dist = np.linalg.norm(u, axis=-1)
    s = np.einsum("ic,ijc->ij", normals, rig.betas[None, :, None] * u / dist[..., None] ** 3)
    intensities = np.maximum(0.0, albedo[:, None] * s)
    pixels = np.column_stack([np.arange(m), np.zeros(m, int)])
    return KeyPointSet(pixels, normals, positions, intensities, albedo), rig


@pytest.fixture
def ring_rig():
    return make_ring_rig(5, 1.0)


@pytest.fixture
def sphere_scene(ring_rig):
    return make_sphere_scene(0.3, ring_rig, size=48)


@pytest.fixture
def bumpy_scene(ring_rig):
    return make_bumpy_scene(2.0, 0.03, ring_rig, size=48)


@pytest.fixture
def sphere_obs(sphere_scene):
    return normalize_observations(render(sphere_scene))


@pytest.fixture
def keypoints():
    kp, _ = sphere_keypoints()
    return kp
