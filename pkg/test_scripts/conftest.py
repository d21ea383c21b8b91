"""
Shared fixtures: small cameras, synthetic planes, a tiny room and one-disk maps.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add the project root to Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from g2s_slam.datasets import SyntheticScene  # noqa: E402
from g2s_slam.gaussian_map import GaussianMap  # noqa: E402
from g2s_slam.geometry import Frame, Intrinsics  # noqa: E402


def make_plane_frame(intrinsics: Intrinsics, depth: float = 2.0, index: int = 0, timestamp: float = 0.0,
                     seed: int = 0) -> Frame:
    """Fronto-parallel plane at ``depth`` with a random color pattern."""
    rng = np.random.default_rng(seed)
    color = rng.uniform(0.2, 0.8, size=(intrinsics.height, intrinsics.width, 3))
    return Frame(color, np.full((intrinsics.height, intrinsics.width), depth), intrinsics, index, timestamp)


def single_disk(gmap: GaussianMap, center=(0.0, 0.0, 2.0), frame=None, scales=(0.1, 0.1),
                color=(1.0, 0.0, 0.0), opacity: float = 1.0) -> GaussianMap:
    """Append one disk (fronto-parallel by default) and return the map."""
    gmap.add_disks(np.asarray(center), np.eye(3) if frame is None else frame, np.asarray(scales),
                   np.asarray(color), opacity)
    return gmap


@pytest.fixture
def small_intrinsics() -> Intrinsics:
    return Intrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)


@pytest.fixture
def tiny_intrinsics() -> Intrinsics:
    return Intrinsics(40.0, 40.0, 16.0, 12.0, 32, 24)


@pytest.fixture
def plane_frame(tiny_intrinsics) -> Frame:
    return make_plane_frame(tiny_intrinsics)


@pytest.fixture
def tiny_scene() -> SyntheticScene:
    return SyntheticScene(frame_count=6).resized(64)


@pytest.fixture
def disk_map() -> GaussianMap:
    return single_disk(GaussianMap())


# ---------------------------------------------------------------------------
# Finite-difference gradient checks
# ---------------------------------------------------------------------------

FD_STEP = 1e-5

# 12×10 camera: every stacked disk below covers every pixel well inside its 3-sigma support
GRADIENT_INTRINSICS = Intrinsics(10.0, 10.0, 6.0, 5.0, 12, 10)


def stacked_disk_parameters(opacities=(0.5, 0.6, 0.7)) -> dict:
    """Three large, tilted, camera-facing disks at distinct depths in front of an identity camera."""
    from scipy.spatial.transform import Rotation
    from g2s_slam.geometry import tangent_frame_from_normal

    normals = np.array([[0.2, -0.1, -1.0], [-0.3, 0.15, -1.0], [0.1, 0.35, -1.0]])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    spin = Rotation.from_euler('z', [0.3, -0.7, 1.1]).as_matrix()
    return {
        'centers': np.array([[0.05, -0.02, 1.5], [-0.1, 0.08, 2.0], [0.12, 0.03, 2.5]]),
        # rotate the in-plane axes so that s1 != s2 matters
        'frames': tangent_frame_from_normal(normals) @ spin,
        'scales': np.array([[0.8, 0.7], [0.9, 0.75], [1.0, 0.85]]),
        'colors': np.array([[0.9, 0.2, 0.1], [0.1, 0.8, 0.3], [0.2, 0.3, 0.9]]),
        'opacities': np.array(opacities, dtype=np.float64),
    }


def map_from_parameters(params: dict) -> GaussianMap:
    gmap = GaussianMap()
    gmap.add_disks(params['centers'], params['frames'], params['scales'], params['colors'], params['opacities'])
    return gmap


def finite_difference_gradients(objective, params: dict, h: float = FD_STEP) -> dict:
    """
    Central differences of ``objective(params)`` for every disk parameter.

    Frames are perturbed by a left-multiplied world rotation so that the result
    is comparable with the twist gradient of the renderer.
    """
    from g2s_slam.geometry import so3_exp

    grads = {}
    for name in ('centers', 'scales', 'colors', 'opacities'):
        values = params[name]
        grad = np.zeros_like(values)
        for index in np.ndindex(values.shape):
            plus = {**params, name: values.copy()}
            minus = {**params, name: values.copy()}
            plus[name][index] += h
            minus[name][index] -= h
            grad[index] = (objective(plus) - objective(minus)) / (2 * h)
        grads[name] = grad

    frames = params['frames']
    grad = np.zeros((len(frames), 3))
    for i in range(len(frames)):
        for k in range(3):
            step = np.zeros(3)
            step[k] = h
            plus = {**params, 'frames': frames.copy()}
            minus = {**params, 'frames': frames.copy()}
            plus['frames'][i] = so3_exp(step) @ frames[i]
            minus['frames'][i] = so3_exp(-step) @ frames[i]
            grad[i, k] = (objective(plus) - objective(minus)) / (2 * h)
    grads['frames'] = grad
    return grads
