"""
Sequential SLAM loop: track every frame against the map, insert keyframes,
seed new disks and refine the map between frames.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from .config import SlamConfig
from .datasets import FrameSequence
from .errors import AssociationError, G2SError, TrackingLostError
from .evaluation.metrics import ate_rmse, evaluate_keyframes
from .gaussian_map import (GaussianMap, KeyframePolicy, is_mapping_keyframe, is_tracking_keyframe,
                           seed_disks_from_frame)
from .geometry import Frame, Pose, backproject
from .gicp import GicpParams, prepare_source, solve_gicp
from .logging_utils import log_kv, log_warning, log_with_emoji, progress_enabled
from .optimizer import MapOptimizer
from .trajectory import Trajectory

logger = logging.getLogger(__name__)

TRACKING = 'tracking'
MAPPING = 'mapping'

SUMMARY_KEYS = ('ate_rmse_cm', 'depth_l1_cm', 'psnr_db', 'ssim', 'precision_pct', 'recall_pct', 'f1_pct', 'fps',
                'disk_count')

# Rows of the module ablation: volumetric baseline, surface disks, depth supervision, full loss
ABLATION_LADDER: Dict[str, Dict[str, Any]] = {
    'baseline': {'mapping.representation': 'isotropic', 'tracking.covariance_mode': 'raw',
                 'loss.lambda_d': 0.0, 'loss.lambda_gan': 0.0},
    '+2d_disk': {'mapping.representation': 'disk', 'tracking.covariance_mode': 'plane',
                 'loss.lambda_d': 0.0, 'loss.lambda_gan': 0.0},
    '+geometry_aware_optimization': {'mapping.representation': 'disk', 'tracking.covariance_mode': 'plane',
                                     'loss.lambda_gan': 0.0},
    'full': {},
}


def gicp_params(config: SlamConfig) -> GicpParams:
    t = config.tracking
    return GicpParams(t.max_iters, t.gate_radius, t.tol, t.epsilon, t.min_matches, t.max_halvings,
                      t.covariance_mode)


@dataclass
class SlamState:
    """Everything the loop carries between frames."""
    config: SlamConfig
    gmap: GaussianMap = field(default_factory=GaussianMap)
    trajectory: Trajectory = field(default_factory=Trajectory)
    keyframe_frames: Dict[int, Frame] = field(default_factory=dict)
    previous_pose: Optional[Pose] = None
    frames_processed: int = 0
    log: logging.Logger = field(default=logger, repr=False)

    def __post_init__(self):
        self.policy = KeyframePolicy(self.config.keyframes.corr_ratio_threshold,
                                     self.config.keyframes.mapping_interval)
        self.params = gicp_params(self.config)
        self.optimizer = MapOptimizer.from_config(self.config)

    @property
    def mapping_poses(self) -> Dict[int, Pose]:
        return {index: self.gmap.keyframes[index].pose for index in self.keyframe_frames}

    def seed(self, frame: Frame, pose: Pose) -> int:
        m = self.config.mapping
        return seed_disks_from_frame(frame, pose, self.gmap, m.seed_stride, m.base_scale, m.p_exponent,
                                     m.initial_opacity, m.gate_factor)


def _insert_mapping_keyframe(state: SlamState, frame: Frame, pose: Pose) -> int:
    state.gmap.register_keyframe(frame.index, pose, MAPPING)
    state.keyframe_frames[frame.index] = frame
    return state.seed(frame, pose)


def process_frame(state: SlamState, frame: Frame) -> Pose:
    """
    Track one frame and update the map.

    Args:
        state: Loop state (updated in place)
        frame: Next RGB-D observation

    Returns:
        Estimated camera-to-world pose of the frame
    """
    if state.previous_pose is None:
        pose = Pose.identity()
        state.gmap.register_keyframe(frame.index, pose, TRACKING)
        added = _insert_mapping_keyframe(state, frame, pose)
        log_with_emoji("🗺️", f"Initialized map from frame {frame.index}", f"{added} disks", context=state)
    else:
        t = state.config.tracking
        source = prepare_source(backproject(frame.depth, frame.intrinsics, t.stride), t.k_neighbors, t.epsilon,
                                t.covariance_mode)
        result = solve_gicp(source, state.gmap.snapshot(), state.previous_pose, state.params, frame.index)
        pose = result.pose
        added = 0
        if is_tracking_keyframe(result.corr_ratio, state.policy):
            state.gmap.register_keyframe(frame.index, pose, TRACKING)
            added += state.seed(frame, pose)
        if is_mapping_keyframe(frame.index, state.policy):
            added += _insert_mapping_keyframe(state, frame, pose)
            state.optimizer.optimize(state.gmap, state.keyframe_frames, state.mapping_poses,
                                     state.config.mapping.iters_per_keyframe)
        log_kv(state.log, 'frame', index=frame.index, iterations=result.iterations, objective=result.objective,
               corr_ratio=result.corr_ratio, converged=result.converged, added=added, disks=len(state.gmap))

    state.trajectory.append(frame.timestamp, pose)
    state.previous_pose = pose
    state.frames_processed += 1
    return pose


@dataclass
class PipelineResult:
    trajectory: Trajectory
    gmap: GaussianMap
    summary: Dict[str, Optional[float]]
    loss_trace: List[Dict[str, float]]
    keyframes: Dict[int, Frame]
    keyframe_table: Optional[pd.DataFrame] = None


def summarize(state: SlamState, dataset: FrameSequence, elapsed: float
              ) -> Tuple[Dict[str, Optional[float]], Optional[pd.DataFrame]]:
    """Trajectory error, keyframe rendering scores, disk count and throughput, plus the per-keyframe table."""
    summary: Dict[str, Optional[float]] = {key: None for key in SUMMARY_KEYS}
    summary['disk_count'] = len(state.gmap)
    table = None
    if not state.config.runtime.deterministic and elapsed > 0:
        summary['fps'] = state.frames_processed / elapsed

    if dataset.ground_truth is not None and len(state.trajectory) >= 2:
        try:
            summary['ate_rmse_cm'] = 100.0 * ate_rmse(state.trajectory, dataset.ground_truth,
                                                      state.config.eval.association_tolerance)
        except AssociationError as e:
            log_warning(state, f"ATE skipped: {e}")

    if len(state.gmap) and state.keyframe_frames:
        table, means = evaluate_keyframes(state.gmap, state.trajectory, state.keyframe_frames,
                                          sorted(state.keyframe_frames), state.optimizer.rasterizer,
                                          state.config.eval.association_tolerance)
        for key in ('depth_l1_cm', 'psnr_db', 'ssim'):
            summary[key] = None if np.isnan(means[key]) else means[key]
    return summary, table


def _result(state: SlamState, summary) -> PipelineResult:
    return PipelineResult(state.trajectory, state.gmap, summary, list(state.optimizer.trace),
                          dict(state.keyframe_frames))


def run(dataset: FrameSequence, config: Optional[SlamConfig] = None, max_frames: Optional[int] = None,
        optimize: bool = True) -> PipelineResult:
    """
    Run SLAM over a frame sequence.

    Args:
        dataset: Frame source
        config: Engine configuration (defaults when None)
        max_frames: Stop after this many frames
        optimize: When False, map refinement is skipped entirely (tracking only)

    Returns:
        PipelineResult with trajectory, map, metrics summary and loss trace

    Raises:
        TrackingLostError: with the partial result attached as ``partial``
    """
    config = config or SlamConfig()
    if not optimize:
        config = config.with_overrides({'mapping.iters_per_keyframe': 0, 'mapping.final_iters': 0})
    np.random.seed(config.runtime.seed)
    n_frames = len(dataset) if max_frames is None else min(len(dataset), max_frames)
    if n_frames < 1:
        raise G2SError("dataset has no frames")

    state = SlamState(config)
    log_with_emoji("🚀", f"Starting SLAM on {dataset.name}", f"{n_frames} frames", context=state)
    start = time.perf_counter()
    progress = tqdm(range(n_frames), desc="tracking", disable=not progress_enabled())
    for index in progress:
        frame = dataset.frame(index)
        try:
            process_frame(state, frame)
        except TrackingLostError as e:
            log_warning(state, f"halting at frame {frame.index}: {e}")
            e.partial = _result(state, {key: None for key in SUMMARY_KEYS})
            raise

    if state.keyframe_frames and len(state.gmap) and config.mapping.final_iters > 0:
        log_with_emoji("🎯", "Final map refinement", f"{config.mapping.final_iters} iterations", context=state)
        state.optimizer.optimize(state.gmap, state.keyframe_frames, state.mapping_poses, config.mapping.final_iters)
    elapsed = time.perf_counter() - start

    summary, table = summarize(state, dataset, elapsed)
    log_with_emoji("✅", "SLAM finished", ", ".join(f"{k}={v:.4g}" for k, v in summary.items() if v is not None),
                   context=state)
    result = _result(state, summary)
    result.keyframe_table = table
    return result


def run_ablation(dataset: FrameSequence, base_config: Optional[SlamConfig] = None,
                 variants: Optional[Mapping[str, Dict[str, Any]]] = None,
                 max_frames: Optional[int] = None) -> pd.DataFrame:
    """
    Run the pipeline once per named override set.

    Args:
        dataset: Frame source shared by every variant
        base_config: Configuration the overrides apply to
        variants: Variant name -> dotted-key overrides (defaults to ``ABLATION_LADDER``)
        max_frames: Frame limit per run

    Returns:
        One row per variant, in input order: variant, psnr_db, depth_l1_cm, ate_rmse_cm
    """
    base_config = base_config or SlamConfig()
    variants = ABLATION_LADDER if variants is None else variants
    rows = []
    for name, overrides in variants.items():
        log_with_emoji("🧪", f"Ablation variant {name}", str(overrides))
        result = run(dataset, base_config.with_overrides(overrides), max_frames)
        rows.append({'variant': name, **{key: result.summary[key] for key in ('psnr_db', 'depth_l1_cm',
                                                                            'ate_rmse_cm')}})
    return pd.DataFrame(rows, columns=['variant', 'psnr_db', 'depth_l1_cm', 'ate_rmse_cm'])
