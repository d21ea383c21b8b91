"""
Trajectory and image metrics: ATE RMSE, depth L1, PSNR, SSIM.
"""

import logging
from typing import Dict, Mapping, Sequence, Tuple

import cv2
import numpy as np
import pandas as pd

from ..errors import AssociationError, EmptyMaskError
from ..geometry import Frame, Pose
from ..trajectory import Trajectory, associate_timestamps

logger = logging.getLogger(__name__)

ASSOCIATION_TOLERANCE = 0.02

PSNR_CAP_DB = 100.0
PSNR_MSE_FLOOR = 1e-10

SSIM_WINDOW = (11, 11)
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

# Rendered pixels with less accumulated opacity are not scored for depth
DEPTH_ALPHA_MIN = 0.5


def associated_positions(estimated: Trajectory, ground_truth: Trajectory,
                         tolerance: float = ASSOCIATION_TOLERANCE) -> Tuple[np.ndarray, np.ndarray]:
    pairs = associate_timestamps(estimated.timestamps, ground_truth.timestamps, tolerance)
    if len(pairs) < 2:
        raise AssociationError(f"need at least 2 associated poses, found {len(pairs)}")
    est = estimated.positions[[i for i, _ in pairs]]
    gt = ground_truth.positions[[j for _, j in pairs]]
    return est, gt


def rigid_alignment(source: np.ndarray, target: np.ndarray) -> Pose:
    """
    Least-squares rotation and translation (no scale) mapping ``source`` onto ``target``.

    Args:
        source: (N, 3) points
        target: (N, 3) corresponding points

    Returns:
        Pose T minimizing Σ|target - T·source|²
    """
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    cross = (target - mu_t).T @ (source - mu_s)
    u, _, vt = np.linalg.svd(cross)
    fix = np.eye(3)
    fix[2, 2] = np.sign(np.linalg.det(u @ vt)) or 1.0
    rotation = u @ fix @ vt
    return Pose(rotation, mu_t - rotation @ mu_s)


def align_trajectories(estimated: Trajectory, ground_truth: Trajectory,
                       tolerance: float = ASSOCIATION_TOLERANCE) -> Pose:
    """Transform taking the estimated frame into the ground-truth frame."""
    est, gt = associated_positions(estimated, ground_truth, tolerance)
    return rigid_alignment(est, gt)


def ate_rmse(estimated: Trajectory, ground_truth: Trajectory, tolerance: float = ASSOCIATION_TOLERANCE) -> float:
    """
    Absolute trajectory error in meters.

    Poses are associated by timestamp (within ``tolerance`` seconds), the
    estimated positions are rigidly aligned to ground truth, and the RMSE of
    the residual translations is returned.
    """
    est, gt = associated_positions(estimated, ground_truth, tolerance)
    alignment = rigid_alignment(est, gt)
    residuals = gt - alignment.transform(est)
    return float(np.sqrt(np.mean(np.sum(residuals ** 2, axis=1))))


def depth_mask(rendered_alpha: np.ndarray, gt_depth: np.ndarray) -> np.ndarray:
    return (gt_depth > 0) & (rendered_alpha >= DEPTH_ALPHA_MIN)


def depth_l1(rendered_depth: np.ndarray, gt_depth: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute depth error over the mask, in centimeters."""
    if not np.any(mask):
        raise EmptyMaskError("depth L1")
    return float(np.mean(np.abs(rendered_depth[mask] - gt_depth[mask]))) * 100.0


def depth_error_map(rendered_depth: np.ndarray, gt_depth: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """H×W absolute error in meters, 0 outside the mask."""
    return np.where(mask, np.abs(rendered_depth - gt_depth), 0.0)


def psnr(img_a: np.ndarray, img_b: np.ndarray) -> float:
    if img_a.shape != img_b.shape:
        raise ValueError(f"shape mismatch {img_a.shape} vs {img_b.shape}")
    mse = float(np.mean((np.asarray(img_a, dtype=np.float64) - np.asarray(img_b, dtype=np.float64)) ** 2))
    if mse < PSNR_MSE_FLOOR:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def ssim(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """
    Structural similarity with an 11×11 Gaussian window (sigma 1.5), averaged
    over pixels and channels. Images are expected in [0, 1].
    """
    if img_a.shape != img_b.shape:
        raise ValueError(f"shape mismatch {img_a.shape} vs {img_b.shape}")
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)

    def blur(x):
        return cv2.GaussianBlur(x, SSIM_WINDOW, SSIM_SIGMA, sigmaY=SSIM_SIGMA)

    mu_a = blur(a)
    mu_b = blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2))
    return float(np.mean(ssim_map))


def evaluate_keyframes(gmap, trajectory: Trajectory, frames: Mapping[int, Frame], keyframes: Sequence[int],
                       rasterizer, tolerance: float = ASSOCIATION_TOLERANCE) -> Tuple[pd.DataFrame, Dict[str, float]]:
    """
    Render every keyframe at its estimated pose and score it against the sensor frame.

    Args:
        gmap: GaussianMap to render
        trajectory: Estimated trajectory
        frames: Frame index -> sensor frame
        keyframes: Keyframe indices to score
        rasterizer: Renderer configuration
        tolerance: Largest timestamp difference between a keyframe and its trajectory pose

    Returns:
        Per-keyframe table (index, psnr_db, ssim, depth_l1_cm) and its column means
    """
    keyframes = list(keyframes)
    pairs = associate_timestamps([frames[k].timestamp for k in keyframes], trajectory.timestamps, tolerance)
    pose_of = {keyframes[i]: trajectory.poses[j] for i, j in pairs}
    snapshot = gmap.snapshot()
    rows = []
    for index in keyframes:
        frame = frames[index]
        pose = pose_of.get(index)
        if pose is None:
            logger.warning(f"⚠️ keyframe {index} has no pose in the trajectory; skipped")
            continue
        render = rasterizer.render(snapshot, pose, frame.intrinsics, keep_cache=False)
        mask = depth_mask(render.alpha, frame.depth)
        rows.append({
            'index': index,
            'psnr_db': psnr(np.clip(render.color, 0.0, 1.0), frame.color),
            'ssim': ssim(np.clip(render.color, 0.0, 1.0), frame.color),
            'depth_l1_cm': depth_l1(render.depth, frame.depth, mask) if np.any(mask) else float('nan'),
        })
    table = pd.DataFrame(rows, columns=['index', 'psnr_db', 'ssim', 'depth_l1_cm'])
    means = {column: float(table[column].mean()) if len(table) else float('nan')
             for column in ('psnr_db', 'ssim', 'depth_l1_cm')}
    return table, means
