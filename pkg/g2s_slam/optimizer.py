"""
Geometry-aware map refinement.

Keyframes are rendered at their frozen poses and compared with the sensor
frames through an L1 photometric term, an L1 depth term and the
geometry-aware normal term. Gradients come from the renderer's analytic
backward pass; parameters move with per-group Adam updates.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from .errors import EmptyMaskError, FrozenPoseError
from .gaussian_map import SCALE_MAX, SCALE_MIN, GaussianMap, MapSnapshot
from .geometry import Frame, NormalMap, Pose, normals_from_depth, normals_from_depth_backward, \
    orthonormalize, so3_exp
from .logging_utils import log_kv, log_warning, progress_enabled
from .renderer import Rasterizer, RenderGradients, RenderOutput, UpstreamGradients

logger = logging.getLogger(__name__)

# Norm floor of the cosine terms
COSINE_NORM_FLOOR = 1e-8

# Rendered pixels below this accumulated opacity are not depth-supervised
DEPTH_ALPHA_MIN = 0.5

LOSS_TRACE_COLUMNS = ['iteration', 'total', 'photometric', 'depth', 'gan', 'disk_count']


@dataclass(frozen=True)
class LossWeights:
    lambda_p: float = 1.0
    lambda_d: float = 0.1
    lambda_gan: float = 0.05

    def __post_init__(self):
        for name in ('lambda_p', 'lambda_d', 'lambda_gan'):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")

    @classmethod
    def from_config(cls, config) -> 'LossWeights':
        return cls(config.loss.lambda_p, config.loss.lambda_d, config.loss.lambda_gan)


@dataclass
class LossReport:
    total: float
    photometric: float = 0.0
    depth: float = 0.0
    gan: float = 0.0
    photometric_pixels: int = 0
    depth_pixels: int = 0
    gan_pixels: int = 0


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------

def photometric_loss(rendered_color: np.ndarray, gt_color: np.ndarray,
                     mask: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Mean absolute color difference over masked pixels and channels.

    Args:
        rendered_color: H×W×3 render
        gt_color: H×W×3 observation
        mask: H×W boolean supervision mask

    Returns:
        (loss, dL/d rendered_color)
    """
    if rendered_color.shape != gt_color.shape:
        raise ValueError(f"shape mismatch {rendered_color.shape} vs {gt_color.shape}")
    count = int(np.count_nonzero(mask)) * rendered_color.shape[-1]
    if count == 0:
        raise EmptyMaskError("photometric loss")
    diff = rendered_color - gt_color
    selected = mask[..., None]
    value = float(np.sum(np.abs(diff), where=np.broadcast_to(selected, diff.shape))) / count
    grad = np.where(selected, np.sign(diff), 0.0) / count
    return value, grad


def depth_loss(rendered_depth: np.ndarray, gt_depth: np.ndarray, mask: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean absolute depth difference (meters) over the mask, with its gradient."""
    if rendered_depth.shape != gt_depth.shape:
        raise ValueError(f"shape mismatch {rendered_depth.shape} vs {gt_depth.shape}")
    count = int(np.count_nonzero(mask))
    if count == 0:
        raise EmptyMaskError("depth loss")
    diff = rendered_depth - gt_depth
    value = float(np.sum(np.abs(diff), where=mask)) / count
    grad = np.where(mask, np.sign(diff), 0.0) / count
    return value, grad


def _cosine_with_grad(reference: np.ndarray, vectors: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    ref_norm = np.maximum(np.linalg.norm(reference, axis=-1, keepdims=True), COSINE_NORM_FLOOR)
    raw_norm = np.linalg.norm(vectors, axis=-1, keepdims=True)
    vec_norm = np.maximum(raw_norm, COSINE_NORM_FLOOR)
    ref_unit = reference / ref_norm
    cosine = np.sum(ref_unit * vectors, axis=-1, keepdims=True) / vec_norm
    # below the floor the denominator is a constant
    radial = np.where(raw_norm >= COSINE_NORM_FLOOR, cosine * vectors / vec_norm, 0.0)
    grad = (ref_unit - radial) / vec_norm
    return cosine[..., 0], grad


def gan_loss(gt_normals: np.ndarray, rendered_normals: np.ndarray, depth_normals: np.ndarray,
             mask: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Geometry-aware normal loss: ‖N − N̂‖₁ + (1 − cos(N, N̂)) + (1 − cos(N, N̂_d)), averaged over the mask.

    Args:
        gt_normals: H×W×3 normals derived from sensor depth
        rendered_normals: H×W×3 rendered normal channel
        depth_normals: H×W×3 normals derived from the rendered depth
        mask: H×W boolean mask

    Returns:
        (loss, dL/d rendered_normals, dL/d depth_normals)
    """
    count = int(np.count_nonzero(mask))
    if count == 0:
        raise EmptyMaskError("normal loss")
    selected = mask[..., None]
    diff = rendered_normals - gt_normals
    cos_rendered, dcos_rendered = _cosine_with_grad(gt_normals, rendered_normals)
    cos_depth, dcos_depth = _cosine_with_grad(gt_normals, depth_normals)
    per_pixel = np.sum(np.abs(diff), axis=-1) + (1.0 - cos_rendered) + (1.0 - cos_depth)
    value = float(np.sum(per_pixel, where=mask)) / count
    grad_rendered = np.where(selected, np.sign(diff) - dcos_rendered, 0.0) / count
    grad_depth = np.where(selected, -dcos_depth, 0.0) / count
    return value, grad_rendered, grad_depth


def supervision_masks(frame: Frame, render_output: RenderOutput, gt_normals: Optional[NormalMap] = None,
                      depth_normals: Optional[NormalMap] = None) -> Dict[str, np.ndarray]:
    """Pixel masks of the loss terms; the normal mask needs both normal maps."""
    masks = {
        'photometric': np.ones(frame.depth.shape, dtype=bool),
        'depth': (frame.depth > 0) & (render_output.alpha >= DEPTH_ALPHA_MIN),
    }
    if gt_normals is not None and depth_normals is not None:
        rendered_normal_ok = np.linalg.norm(render_output.normal, axis=-1) > 0
        masks['gan'] = gt_normals.valid & rendered_normal_ok & depth_normals.valid
    return masks


def total_loss(frame: Frame, render_output: RenderOutput, weights: LossWeights, snapshot: MapSnapshot,
               rasterizer: Rasterizer, gt_normals: Optional[NormalMap] = None
               ) -> Tuple[LossReport, RenderGradients]:
    """
    Weighted loss of one keyframe and the fused backward pass through the renderer.

    Args:
        frame: Sensor observation
        render_output: Render of ``snapshot`` at the frame's pose (with backward cache)
        weights: Loss weights; terms with weight 0 are skipped
        snapshot: The rendered snapshot
        rasterizer: Rasterizer that produced ``render_output``
        gt_normals: Normals of the sensor depth, computed when omitted

    Returns:
        LossReport and per-disk gradients of the weighted total
    """
    intrinsics = frame.intrinsics
    h, w = frame.depth.shape
    g_color = np.zeros((h, w, 3))
    g_depth = np.zeros((h, w))
    g_normal = np.zeros((h, w, 3))
    report = LossReport(total=0.0)

    depth_normals = None
    if weights.lambda_gan > 0:
        if gt_normals is None:
            gt_normals = normals_from_depth(frame.depth, intrinsics)
        depth_normals = normals_from_depth(render_output.depth, intrinsics)
    masks = supervision_masks(frame, render_output, gt_normals, depth_normals)

    if weights.lambda_p > 0:
        report.photometric, grad = photometric_loss(render_output.color, frame.color, masks['photometric'])
        report.photometric_pixels = int(np.count_nonzero(masks['photometric']))
        g_color += weights.lambda_p * grad
    if weights.lambda_d > 0:
        report.depth, grad = depth_loss(render_output.depth, frame.depth, masks['depth'])
        report.depth_pixels = int(np.count_nonzero(masks['depth']))
        g_depth += weights.lambda_d * grad
    if weights.lambda_gan > 0:
        report.gan, grad_rendered, grad_depth_normals = gan_loss(
            gt_normals.normals, render_output.normal, depth_normals.normals, masks['gan'])
        report.gan_pixels = int(np.count_nonzero(masks['gan']))
        g_normal += weights.lambda_gan * grad_rendered
        g_depth += normals_from_depth_backward(render_output.depth, intrinsics,
                                               weights.lambda_gan * grad_depth_normals)

    report.total = (weights.lambda_p * report.photometric + weights.lambda_d * report.depth
                    + weights.lambda_gan * report.gan)
    gradients = rasterizer.backward(snapshot, render_output, UpstreamGradients(g_color, g_depth, g_normal))
    return report, gradients


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

PARAMETER_GROUPS = ('centers', 'frames', 'scales', 'colors', 'opacities')


@dataclass
class LearningRates:
    centers: float = 1.6e-4
    frames: float = 1e-3
    scales: float = 5e-3
    colors: float = 2.5e-3
    opacities: float = 5e-2

    @classmethod
    def from_config(cls, config) -> 'LearningRates':
        lr = config.learning_rates
        return cls(lr.center, lr.frame, lr.scales, lr.color, lr.opacity)


class Adam:
    """
    Adaptive-moment updates for the per-disk parameter groups.

    State rows follow the map's disk order: disks appended by seeding get zero
    moments, pruned disks drop their rows.
    """

    def __init__(self, learning_rates: LearningRates, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-15):
        self.learning_rates = learning_rates
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.first: Dict[str, np.ndarray] = {}
        self.second: Dict[str, np.ndarray] = {}

    def sync(self, gmap: GaussianMap):
        """Grow the moment buffers for disks appended since the last step."""
        for name in PARAMETER_GROUPS:
            shape = getattr(self._shape_source(gmap, name), 'shape')
            current = self.first.get(name)
            if current is None:
                self.first[name] = np.zeros(shape)
                self.second[name] = np.zeros(shape)
            elif current.shape[0] < shape[0]:
                pad = np.zeros((shape[0] - current.shape[0],) + shape[1:])
                self.first[name] = np.concatenate([current, pad])
                self.second[name] = np.concatenate([self.second[name], pad])
            elif current.shape[0] > shape[0]:
                raise ValueError("optimizer state is ahead of the map; prune through Adam.prune")

    @staticmethod
    def _shape_source(gmap: GaussianMap, name: str) -> np.ndarray:
        # frames are updated through a 3-vector twist
        return gmap.centers if name == 'frames' else getattr(gmap, name)

    def prune(self, keep: np.ndarray):
        for name in list(self.first):
            self.first[name] = self.first[name][keep]
            self.second[name] = self.second[name][keep]

    def step(self, gmap: GaussianMap, gradients: RenderGradients):
        """Apply one update to every group with a nonzero learning rate."""
        self.sync(gmap)
        self.step_count += 1
        t = self.step_count
        grads = gradients.groups()
        updates = {}
        for name in PARAMETER_GROUPS:
            lr = getattr(self.learning_rates, name)
            if lr == 0:
                continue
            g = grads[name]
            self.first[name] = self.beta1 * self.first[name] + (1.0 - self.beta1) * g
            self.second[name] = self.beta2 * self.second[name] + (1.0 - self.beta2) * g * g
            m_hat = self.first[name] / (1.0 - self.beta1 ** t)
            v_hat = self.second[name] / (1.0 - self.beta2 ** t)
            updates[name] = lr * m_hat / (np.sqrt(v_hat) + self.eps)

        if not updates:
            return
        new_values = {}
        if 'centers' in updates:
            new_values['centers'] = gmap.centers - updates['centers']
        if 'frames' in updates:
            new_values['frames'] = orthonormalize(so3_exp(-updates['frames']) @ gmap.frames)
        if 'scales' in updates:
            new_values['scales'] = np.clip(gmap.scales - updates['scales'], SCALE_MIN, SCALE_MAX)
        if 'colors' in updates:
            new_values['colors'] = gmap.colors - updates['colors']
        if 'opacities' in updates:
            new_values['opacities'] = np.clip(gmap.opacities - updates['opacities'], 0.0, 1.0)
        gmap.set_parameters(**new_values)


# ---------------------------------------------------------------------------
# Map optimization
# ---------------------------------------------------------------------------

def write_loss_trace(rows: Sequence[Dict[str, float]], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(list(rows), columns=LOSS_TRACE_COLUMNS).to_csv(path, index=False)
    return path


def read_loss_trace(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path)


@dataclass
class MapOptimizer:
    """
    Stateful optimizer over the mapping keyframes.

    Args:
        rasterizer: Renderer configuration used for every keyframe
        weights: Loss weights
        learning_rates: Per-group learning rates
        prune_opacity: Disks below this opacity are removed at epoch boundaries
        prune_every: Iterations per epoch
    """
    rasterizer: Rasterizer
    weights: LossWeights = field(default_factory=LossWeights)
    learning_rates: LearningRates = field(default_factory=LearningRates)
    prune_opacity: float = 0.005
    prune_every: int = 50
    iteration: int = 0
    trace: List[Dict[str, float]] = field(default_factory=list)

    def __post_init__(self):
        self.adam = Adam(self.learning_rates)
        self._cursor = 0
        self._gt_normals: Dict[int, NormalMap] = {}
        self.log = logger

    @classmethod
    def from_config(cls, config) -> 'MapOptimizer':
        return cls(Rasterizer.from_config(config), LossWeights.from_config(config),
                   LearningRates.from_config(config), config.mapping.prune_opacity, config.mapping.prune_every)

    def _gt_normals_for(self, index: int, frame: Frame) -> NormalMap:
        if index not in self._gt_normals:
            self._gt_normals[index] = normals_from_depth(frame.depth, frame.intrinsics)
        return self._gt_normals[index]

    def prune(self, gmap: GaussianMap) -> int:
        self.adam.sync(gmap)
        keep = gmap.opacities >= self.prune_opacity
        removed = gmap.prune(keep)
        if removed:
            self.adam.prune(keep)
            log_kv(logger, 'optimizer.prune', removed=removed, remaining=len(gmap))
        return removed

    def step(self, gmap: GaussianMap, frame: Frame, pose: Pose) -> LossReport:
        snapshot = gmap.snapshot()
        render_output = self.rasterizer.render(snapshot, pose, frame.intrinsics)
        report, gradients = total_loss(frame, render_output, self.weights, snapshot, self.rasterizer,
                                       self._gt_normals_for(frame.index, frame))
        self.adam.step(gmap, gradients)
        return report

    def optimize(self, gmap: GaussianMap, keyframes: Mapping[int, Frame], pose_lookup: Mapping[int, Pose],
                 iters: int) -> List[Dict[str, float]]:
        """
        Run ``iters`` round-robin steps over the keyframes.

        Args:
            gmap: Map to refine in place
            keyframes: Keyframe index -> sensor frame
            pose_lookup: Keyframe index -> frozen camera-to-world pose
            iters: Number of iterations

        Returns:
            Loss-trace rows produced by this call
        """
        if iters <= 0:
            return []
        if len(gmap) == 0:
            raise ValueError("cannot optimize an empty map")
        order = sorted(keyframes)
        missing = [k for k in order if k not in pose_lookup]
        if missing:
            raise ValueError(f"keyframes without poses: {missing}")
        frozen = {k: pose_lookup[k].matrix().copy() for k in order}

        rows: List[Dict[str, float]] = []
        progress = tqdm(range(iters), desc="optimizing", leave=False, disable=not progress_enabled())
        for _ in progress:
            index = order[self._cursor % len(order)]
            self._cursor += 1
            self.iteration += 1
            try:
                report = self.step(gmap, keyframes[index], pose_lookup[index])
            except EmptyMaskError as e:
                log_warning(self, f"skipping keyframe {index}: {e}")
                report = None
            if not np.array_equal(pose_lookup[index].matrix(), frozen[index]):
                raise FrozenPoseError(f"pose of keyframe {index} changed during map optimization")

            # epoch boundaries count skipped steps too
            if self.iteration % self.prune_every == 0:
                self.prune(gmap)
            if report is None:
                continue
            row = {'iteration': self.iteration, 'total': report.total, 'photometric': report.photometric,
                   'depth': report.depth, 'gan': report.gan, 'disk_count': len(gmap)}
            rows.append(row)
            log_kv(logger, 'optimizer.step', keyframe=index, **row)

        for k in order:
            if not np.array_equal(pose_lookup[k].matrix(), frozen[k]):
                raise FrozenPoseError(f"pose of keyframe {k} changed during map optimization")
        self.trace.extend(rows)
        return rows


def optimize_map(gmap: GaussianMap, keyframes: Mapping[int, Frame], pose_lookup: Mapping[int, Pose], iters: int,
                 weights: LossWeights = LossWeights(), learning_rates: LearningRates = LearningRates(),
                 rasterizer: Optional[Rasterizer] = None) -> List[Dict[str, float]]:
    """One-shot optimization with fresh optimizer state; see ``MapOptimizer.optimize``."""
    optimizer = MapOptimizer(rasterizer or Rasterizer(), weights, learning_rates)
    return optimizer.optimize(gmap, keyframes, pose_lookup, iters)
