"""
Camera models, SE(3) algebra, back-projection, depth normals and local covariances.

Every function here is a pure function of its inputs.
"""

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation
from sklearn.neighbors import KDTree

from .errors import CovarianceError, InsufficientPointsError

# Default floor for the normal-direction variance of a plane-prior covariance
DEFAULT_EPSILON = 1e-3

# Cross products smaller than this mark a degenerate depth neighbourhood
NORMAL_DEGENERACY = 1e-12

SYMMETRY_TOLERANCE = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera. ``depth_scale`` is raw depth units per meter (TUM: 5000)."""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 5000.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")
        if self.depth_scale <= 0:
            raise ValueError(f"depth_scale must be positive, got {self.depth_scale}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> 'Intrinsics':
        """Intrinsics of the same camera resampled by ``factor``."""
        return Intrinsics(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                          int(round(self.width * factor)), int(round(self.height * factor)), self.depth_scale)

    def pixel_rays(self) -> np.ndarray:
        """H×W×3 rays with unit z through every pixel center."""
        u, v = np.meshgrid(np.arange(self.width, dtype=np.float64),
                           np.arange(self.height, dtype=np.float64))
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


def skew(w: np.ndarray) -> np.ndarray:
    """Cross-product matrix; works on (3,) or (..., 3) inputs."""
    w = np.asarray(w, dtype=np.float64)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def orthonormalize(rotations: np.ndarray) -> np.ndarray:
    """Project (..., 3, 3) matrices onto SO(3) with an SVD."""
    u, _, vt = np.linalg.svd(rotations)
    det = np.sign(np.linalg.det(u @ vt))
    u = u.copy()
    u[..., :, 2] *= det[..., None]
    return u @ vt


@dataclass(frozen=True)
class Pose:
    """Rigid transform x' = R x + t (camera-to-world for trajectory poses)."""
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, 'rotation', np.array(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, 'translation', np.array(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> 'Pose':
        return cls()

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> 'Pose':
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(matrix[:3, :3], matrix[:3, 3])

    @classmethod
    def from_quaternion(cls, quat_xyzw, translation) -> 'Pose':
        return cls(Rotation.from_quat(np.asarray(quat_xyzw, dtype=np.float64)).as_matrix(), translation)

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def quaternion(self) -> np.ndarray:
        """Rotation as (qx, qy, qz, qw)."""
        return Rotation.from_matrix(self.rotation).as_quat()

    def inverse(self) -> 'Pose':
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: 'Pose') -> 'Pose':
        """self ∘ other: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: 'Pose') -> 'Pose':
        return self.compose(other)

    def transform(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def orthonormalized(self) -> 'Pose':
        return Pose(orthonormalize(self.rotation), self.translation)

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return (np.all(np.isfinite(r)) and np.all(np.isfinite(self.translation))
                and np.max(np.abs(r.T @ r - np.eye(3))) <= tol
                and abs(np.linalg.det(r) - 1.0) <= tol)


@dataclass
class Frame:
    """One RGB-D observation. Depth is in meters with 0 marking invalid pixels."""
    color: np.ndarray
    depth: np.ndarray
    intrinsics: Intrinsics
    index: int = 0
    timestamp: float = 0.0

    def __post_init__(self):
        if self.depth.shape != (self.intrinsics.height, self.intrinsics.width):
            raise ValueError(f"depth shape {self.depth.shape} does not match intrinsics "
                             f"{self.intrinsics.height}x{self.intrinsics.width}")
        if np.any(self.depth < 0) or not np.all(np.isfinite(self.depth)):
            raise ValueError("depth must be finite and non-negative")
        if not np.all(np.isfinite(self.color)):
            raise ValueError("color must be finite")


@dataclass
class PointCloud:
    points: np.ndarray
    covariances: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None
    pixels: Optional[np.ndarray] = None  # (N, 2) integer (u, v) of the source pixel

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def transformed(self, pose: Pose) -> 'PointCloud':
        r = pose.rotation
        covariances = None if self.covariances is None else r @ self.covariances @ r.T
        normals = None if self.normals is None else self.normals @ r.T
        return PointCloud(pose.transform(self.points), covariances, normals, self.pixels)


@dataclass
class NormalMap:
    normals: np.ndarray  # H×W×3, zero where invalid
    valid: np.ndarray    # H×W bool


# ---------------------------------------------------------------------------
# SE(3)
# ---------------------------------------------------------------------------

def _left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    k = skew(omega)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * k + k @ k / 6.0
    return (np.eye(3) + (1 - np.cos(theta)) / theta ** 2 * k
            + (theta - np.sin(theta)) / theta ** 3 * k @ k)


def _left_jacobian_inverse(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    k = skew(omega)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * k + k @ k / 12.0
    coeff = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta ** 2
    return np.eye(3) - 0.5 * k + coeff * k @ k


def se3_exp(twist: np.ndarray) -> Pose:
    """
    Exponential map of a twist ordered (translation part, rotation part).

    Args:
        twist: 6-vector (rho_x, rho_y, rho_z, omega_x, omega_y, omega_z)

    Returns:
        The corresponding Pose
    """
    twist = np.asarray(twist, dtype=np.float64).reshape(6)
    rho, omega = twist[:3], twist[3:]
    rotation = Rotation.from_rotvec(omega).as_matrix()
    return Pose(rotation, _left_jacobian(omega) @ rho)


def se3_log(pose: Pose) -> np.ndarray:
    """Inverse of ``se3_exp`` for rotation angles below pi."""
    omega = Rotation.from_matrix(pose.rotation).as_rotvec()
    rho = _left_jacobian_inverse(omega) @ pose.translation
    return np.concatenate([rho, omega])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Batched rotation-vector exponential, (..., 3) -> (..., 3, 3)."""
    omega = np.asarray(omega, dtype=np.float64)
    flat = omega.reshape(-1, 3)
    return Rotation.from_rotvec(flat).as_matrix().reshape(omega.shape[:-1] + (3, 3))


# ---------------------------------------------------------------------------
# Depth processing
# ---------------------------------------------------------------------------

def backproject(depth: np.ndarray, intrinsics: Intrinsics, stride: int = 1) -> PointCloud:
    """
    Lift valid depth pixels into camera-frame 3D points.

    Args:
        depth: H×W depth in meters, 0 = invalid
        intrinsics: Camera model
        stride: Sample every ``stride``-th pixel along both axes

    Returns:
        PointCloud with one point per valid sampled pixel and its (u, v) pixel
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    sampled = depth[::stride, ::stride]
    vs, us = np.nonzero(sampled > 0)
    us = us * stride
    vs = vs * stride
    z = depth[vs, us].astype(np.float64)
    points = np.stack([(us - intrinsics.cx) / intrinsics.fx * z,
                       (vs - intrinsics.cy) / intrinsics.fy * z,
                       z], axis=-1)
    return PointCloud(points.reshape(-1, 3), pixels=np.stack([us, vs], axis=-1).reshape(-1, 2))


def project(points_cam: np.ndarray, intrinsics: Intrinsics) -> np.ndarray:
    """Perspective projection of camera-frame points to (u, v) pixel coordinates."""
    points_cam = np.asarray(points_cam, dtype=np.float64)
    z = points_cam[..., 2]
    return np.stack([intrinsics.fx * points_cam[..., 0] / z + intrinsics.cx,
                     intrinsics.fy * points_cam[..., 1] / z + intrinsics.cy], axis=-1)


def depth_to_points(depth: np.ndarray, intrinsics: Intrinsics) -> np.ndarray:
    """H×W×3 camera-frame positions for every pixel (zeros where depth is 0)."""
    return intrinsics.pixel_rays() * depth[..., None]


def _depth_gradients(depth: np.ndarray, intrinsics: Intrinsics):
    points = depth_to_points(depth, intrinsics)
    grad_x = np.zeros_like(points)
    grad_y = np.zeros_like(points)
    grad_x[:, 1:-1] = 0.5 * (points[:, 2:] - points[:, :-2])
    grad_y[1:-1, :] = 0.5 * (points[2:, :] - points[:-2, :])

    valid_depth = depth > 0
    neighbourhood = np.zeros_like(valid_depth)
    if depth.shape[0] >= 3 and depth.shape[1] >= 3:
        inner = np.ones((depth.shape[0] - 2, depth.shape[1] - 2), dtype=bool)
        for dv in range(3):
            for du in range(3):
                inner &= valid_depth[dv:dv + depth.shape[0] - 2, du:du + depth.shape[1] - 2]
        neighbourhood[1:-1, 1:-1] = inner
    return points, grad_x, grad_y, neighbourhood


def normals_from_depth(depth: np.ndarray, intrinsics: Intrinsics) -> NormalMap:
    """
    Camera-facing unit normals from central differences of back-projected depth.

    Args:
        depth: H×W depth in meters, 0 = invalid
        intrinsics: Camera model

    Returns:
        NormalMap; border pixels and pixels with any invalid 3×3 neighbour are invalid
    """
    points, grad_x, grad_y, valid = _depth_gradients(depth, intrinsics)
    raw = np.cross(grad_x, grad_y)
    norm = np.linalg.norm(raw, axis=-1)
    valid = valid & (norm >= NORMAL_DEGENERACY)
    safe = np.where(valid, norm, 1.0)
    normals = raw / safe[..., None]
    facing = np.sum(normals * points, axis=-1) > 0
    normals[facing] *= -1.0
    normals[~valid] = 0.0
    return NormalMap(normals, valid)


def normals_from_depth_backward(depth: np.ndarray, intrinsics: Intrinsics,
                                grad_normals: np.ndarray) -> np.ndarray:
    """
    Vector-Jacobian product of ``normals_from_depth``: dL/d(normal) -> dL/d(depth).

    Args:
        depth: The depth image the forward pass was evaluated on
        intrinsics: Camera model
        grad_normals: H×W×3 upstream gradient (ignored at invalid pixels)

    Returns:
        H×W gradient with respect to depth
    """
    points, grad_x, grad_y, valid = _depth_gradients(depth, intrinsics)
    raw = np.cross(grad_x, grad_y)
    norm = np.linalg.norm(raw, axis=-1)
    valid = valid & (norm >= NORMAL_DEGENERACY)
    safe = np.where(valid, norm, 1.0)[..., None]
    unit = raw / safe
    sign = np.where(np.sum(unit * points, axis=-1) > 0, -1.0, 1.0)[..., None]

    g = np.where(valid[..., None], grad_normals, 0.0) * sign
    g_raw = (g - unit * np.sum(unit * g, axis=-1, keepdims=True)) / safe
    g_gx = np.cross(grad_y, g_raw)
    g_gy = np.cross(g_raw, grad_x)

    g_points = np.zeros_like(points)
    g_points[:, 2:] += 0.5 * g_gx[:, 1:-1]
    g_points[:, :-2] -= 0.5 * g_gx[:, 1:-1]
    g_points[2:, :] += 0.5 * g_gy[1:-1, :]
    g_points[:-2, :] -= 0.5 * g_gy[1:-1, :]
    return np.sum(g_points * intrinsics.pixel_rays(), axis=-1)


# ---------------------------------------------------------------------------
# Covariances
# ---------------------------------------------------------------------------

def estimate_point_covariances(cloud: PointCloud, k_neighbors: int = 10) -> PointCloud:
    """
    Sample covariance of each point's k nearest neighbours (the point included).

    Args:
        cloud: Input cloud
        k_neighbors: Neighbourhood size, at least 4

    Returns:
        A copy of the cloud with ``covariances`` filled
    """
    if k_neighbors < 4:
        raise ValueError(f"k_neighbors must be >= 4, got {k_neighbors}")
    n = len(cloud)
    if n < k_neighbors:
        raise InsufficientPointsError(n, k_neighbors)
    _, indices = KDTree(cloud.points).query(cloud.points, k=k_neighbors)
    neighbours = cloud.points[indices]
    centered = neighbours - neighbours.mean(axis=1, keepdims=True)
    covariances = np.einsum('nki,nkj->nij', centered, centered) / (k_neighbors - 1)
    return PointCloud(cloud.points, covariances, cloud.normals, cloud.pixels)


def flatten_covariance(covariance: np.ndarray, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """
    Plane-prior covariance: unit variance in the estimated plane, ``epsilon`` along its normal.

    Args:
        covariance: (3,3) or (N,3,3) symmetric PSD matrices
        epsilon: Variance kept along the smallest-eigenvalue direction

    Returns:
        V·diag(1, 1, epsilon)·Vᵀ with V the eigenvectors of the input
    """
    covariance = np.asarray(covariance, dtype=np.float64)
    asymmetry = np.max(np.abs(covariance - np.swapaxes(covariance, -1, -2))) if covariance.size else 0.0
    if asymmetry > SYMMETRY_TOLERANCE:
        raise CovarianceError(f"covariance is not symmetric (max asymmetry {asymmetry:.3g})")
    _, vectors = np.linalg.eigh(covariance)
    weights = np.array([epsilon, 1.0, 1.0])
    return np.einsum('...ik,k,...jk->...ij', vectors, weights, vectors)


def tangent_frame_from_normal(normals: np.ndarray) -> np.ndarray:
    """
    Complete unit normals to frames [t1, t2, n] with det = +1.

    Args:
        normals: (..., 3) unit normals

    Returns:
        (..., 3, 3) rotation matrices whose third column is the normal
    """
    normals = np.asarray(normals, dtype=np.float64)
    helper = np.zeros_like(normals)
    near_z = np.abs(normals[..., 2]) > 0.9
    helper[..., 2] = np.where(near_z, 0.0, 1.0)
    helper[..., 1] = np.where(near_z, 1.0, 0.0)
    t1 = np.cross(helper, normals)
    t1 /= np.linalg.norm(t1, axis=-1, keepdims=True)
    t2 = np.cross(normals, t1)
    return np.stack([t1, t2, normals], axis=-1)


def sample_image(image: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Nearest-pixel lookup at integer (u, v) coordinates."""
    return image[pixels[:, 1], pixels[:, 0]]


def look_at(eye: np.ndarray, target: np.ndarray, up: Tuple[float, float, float] = (0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose of a camera at ``eye`` looking at ``target`` (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return Pose(np.stack([right, down, forward], axis=-1), eye)
