"""
Frame-to-model Generalized ICP with surface-aligned (plane-prior) covariances.

Source points carry flattened neighbourhood covariances; targets are map disk
centers whose covariances come from the disk geometry. The solver minimizes
the summed Mahalanobis distance over SE(3) with Gauss-Newton steps on a
left-multiplied twist.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .errors import CovarianceError, TrackingLostError
from .gaussian_map import MapSnapshot, disk_covariances
from .geometry import (DEFAULT_EPSILON, PointCloud, Pose, estimate_point_covariances, flatten_covariance,
                       se3_exp, skew)
from .logging_utils import log_kv

logger = logging.getLogger(__name__)

# Eigenvalues below this mean the combined covariance lost its epsilon floor
SINGULARITY_FLOOR = 1e-14


@dataclass
class Correspondences:
    """Matched pairs: source row ``src_indices[i]`` ↔ map disk ``tgt_indices[i]``."""
    src_indices: np.ndarray
    tgt_indices: np.ndarray
    sq_distances: np.ndarray
    corr_ratio: float

    def __len__(self) -> int:
        return int(self.src_indices.shape[0])


@dataclass
class RegistrationResult:
    pose: Pose
    iterations: int
    objective: float
    corr_ratio: float
    converged: bool
    matched: int = 0
    # (objective before, objective after) per accepted step
    objective_trace: List[Tuple[float, float]] = field(default_factory=list)


@dataclass(frozen=True)
class GicpParams:
    max_iters: int = 30
    gate_radius: float = 0.1
    tol: float = 1e-6
    epsilon: float = DEFAULT_EPSILON
    min_matches: int = 10
    max_halvings: int = 8
    covariance_mode: str = 'plane'  # plane | isotropic | raw


def prepare_source(cloud: PointCloud, k_neighbors: int = 10, epsilon: float = DEFAULT_EPSILON,
                   mode: str = 'plane') -> PointCloud:
    """
    Attach the source covariances the tracker expects.

    Args:
        cloud: Camera-frame cloud from ``backproject``
        k_neighbors: Neighbourhood size for covariance estimation
        epsilon: Normal-direction variance floor
        mode: ``plane`` (flattened), ``isotropic`` (identity) or ``raw`` (neighbourhood + epsilon·I)

    Returns:
        Cloud with covariances filled
    """
    if mode == 'isotropic':
        covariances = np.broadcast_to(np.eye(3), (len(cloud), 3, 3)).copy()
        return PointCloud(cloud.points, covariances, cloud.normals, cloud.pixels)
    with_cov = estimate_point_covariances(cloud, k_neighbors)
    if mode == 'plane':
        with_cov.covariances = flatten_covariance(with_cov.covariances, epsilon)
    elif mode == 'raw':
        with_cov.covariances = with_cov.covariances + epsilon * np.eye(3)
    else:
        raise ValueError(f"unknown covariance mode '{mode}'")
    return with_cov


def target_covariances(snapshot: MapSnapshot, indices: np.ndarray, epsilon: float = DEFAULT_EPSILON,
                       mode: str = 'plane') -> np.ndarray:
    """Covariances of map disks used as GICP targets."""
    if mode == 'isotropic':
        return np.broadcast_to(np.eye(3), (len(indices), 3, 3)).copy()
    covariances = disk_covariances(snapshot.frames[indices], snapshot.scales[indices])
    if mode == 'plane':
        return flatten_covariance(covariances, epsilon)
    return covariances + epsilon * np.eye(3)


def find_correspondences(src_cloud: PointCloud, pose_guess: Pose, snapshot: MapSnapshot,
                         gate_radius: float) -> Correspondences:
    """
    Match each transformed source point to its nearest disk center inside the gate.

    Args:
        src_cloud: Camera-frame source points
        pose_guess: Camera-to-world estimate
        snapshot: Map snapshot
        gate_radius: Euclidean gate in meters; 0 matches nothing

    Returns:
        Correspondences and the matched / total ratio
    """
    total = len(src_cloud)
    empty = Correspondences(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0), 0.0)
    if total == 0 or len(snapshot) == 0 or gate_radius <= 0:
        return empty
    distances, indices = snapshot.nearest(pose_guess.transform(src_cloud.points))
    matched = distances <= gate_radius
    src_indices = np.nonzero(matched)[0]
    return Correspondences(src_indices, indices[matched], distances[matched] ** 2,
                           float(len(src_indices)) / total)


def residual_and_information(x_src: np.ndarray, c_src: np.ndarray, x_tgt: np.ndarray, c_tgt: np.ndarray,
                             pose: Pose) -> Tuple[np.ndarray, np.ndarray]:
    """
    Residual d = x_tgt − T·x_src and information Ω = (C_tgt + R·C_src·Rᵀ)⁻¹.

    Works on single correspondences (3,), (3,3) or batches (M,3), (M,3,3).
    """
    single = np.ndim(x_src) == 1
    x_src, x_tgt = np.atleast_2d(x_src), np.atleast_2d(x_tgt)
    c_src = np.asarray(c_src, dtype=np.float64).reshape(-1, 3, 3)
    c_tgt = np.asarray(c_tgt, dtype=np.float64).reshape(-1, 3, 3)
    r = pose.rotation
    residuals = x_tgt - pose.transform(x_src)
    combined = c_tgt + r @ c_src @ r.T
    if len(combined) and np.min(np.linalg.eigvalsh(combined)) < SINGULARITY_FLOOR:
        raise CovarianceError("epsilon floor violated: combined covariance is singular")
    information = np.linalg.inv(combined)
    if single:
        return residuals[0], information[0]
    return residuals, information


def mahalanobis_objective(residuals: np.ndarray, information: np.ndarray) -> float:
    return float(np.einsum('mi,mij,mj->', residuals, information, residuals))


def _normal_equations(points_world: np.ndarray, residuals: np.ndarray, information: np.ndarray):
    m = len(points_world)
    jac = np.zeros((m, 3, 6))
    jac[:, :, :3] = np.eye(3)
    jac[:, :, 3:] = -skew(points_world)
    omega_j = information @ jac
    hessian = np.einsum('mki,mkj->ij', jac, omega_j)
    gradient = np.einsum('mki,mk->i', omega_j, residuals)
    return hessian, gradient


def _solve(hessian: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(hessian, gradient)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(hessian, gradient, rcond=None)[0]


def solve_gicp(src_cloud: PointCloud, snapshot: MapSnapshot, pose_init: Pose,
               params: GicpParams = GicpParams(), frame_index=None) -> RegistrationResult:
    """
    Register a source cloud against the map.

    Args:
        src_cloud: Camera-frame points with covariances (see ``prepare_source``)
        snapshot: Map snapshot providing target disks
        pose_init: Initial camera-to-world estimate
        params: Solver settings
        frame_index: Frame being tracked, for diagnostics

    Returns:
        RegistrationResult with the refined pose and final correspondence ratio
    """
    if src_cloud.covariances is None:
        raise ValueError("source cloud needs covariances; call prepare_source first")
    if len(src_cloud) < params.min_matches:
        raise TrackingLostError(len(src_cloud), params.min_matches, frame_index)

    pose = pose_init
    objective = float('inf')
    corr_ratio = 0.0
    matched = 0
    converged = False
    iterations = 0
    trace: List[Tuple[float, float]] = []
    for iteration in range(1, params.max_iters + 1):
        iterations = iteration
        corr = find_correspondences(src_cloud, pose, snapshot, params.gate_radius)
        matched, corr_ratio = len(corr), corr.corr_ratio
        if matched < params.min_matches:
            raise TrackingLostError(matched, params.min_matches, frame_index)

        x_src = src_cloud.points[corr.src_indices]
        c_src = src_cloud.covariances[corr.src_indices]
        x_tgt = snapshot.centers[corr.tgt_indices]
        c_tgt = target_covariances(snapshot, corr.tgt_indices, params.epsilon, params.covariance_mode)
        residuals, information = residual_and_information(x_src, c_src, x_tgt, c_tgt, pose)
        objective = mahalanobis_objective(residuals, information)

        hessian, gradient = _normal_equations(pose.transform(x_src), residuals, information)
        step = _solve(hessian, gradient)

        accepted = False
        for _ in range(params.max_halvings + 1):
            candidate = (se3_exp(step) @ pose).orthonormalized()
            candidate_objective = mahalanobis_objective(x_tgt - candidate.transform(x_src), information)
            if candidate_objective <= objective:
                accepted = True
                break
            step = 0.5 * step

        log_kv(logger, 'gicp.iter', frame=frame_index, iter=iteration, objective=objective,
               matched=matched, corr_ratio=corr_ratio, step=float(np.linalg.norm(step)), accepted=accepted)
        if not accepted:
            converged = True
            break
        trace.append((objective, candidate_objective))
        pose = candidate
        objective = candidate_objective
        if np.linalg.norm(step) < params.tol:
            converged = True
            break

    return RegistrationResult(pose, iterations, objective, corr_ratio, converged, matched, trace)
