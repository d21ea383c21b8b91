"""
Surface-aligned 2D Gaussian disks and the global map that holds them.

A disk stores only two tangent scales, so it cannot represent extent along
its normal. The map keeps disks in column arrays (struct of arrays) so that
the renderer, tracker and optimizer work on whole arrays at once; readers
take generation-stamped snapshots while a single writer mutates the map.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Set, Union

import numpy as np
from plyfile import PlyData, PlyElement
from scipy.spatial.transform import Rotation
from sklearn.neighbors import KDTree

from .errors import InvalidDepthError
from .geometry import Frame, Pose, backproject, normals_from_depth, tangent_frame_from_normal
from .logging_utils import log_debug

logger = logging.getLogger(__name__)

SCALE_MIN = 1e-6
SCALE_MAX = 10.0
INITIAL_OPACITY = 0.7
SEED_GATE_FACTOR = 0.5


@dataclass
class GaussianDisk:
    """One disk: center p, frame R = [t1, t2, n], tangent scales (s1, s2), color and opacity."""
    center: np.ndarray
    frame: np.ndarray
    scales: np.ndarray
    color: np.ndarray
    opacity: float
    creation_frame: int = 0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.frame = np.asarray(self.frame, dtype=np.float64).reshape(3, 3)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(2)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        if np.max(np.abs(self.frame.T @ self.frame - np.eye(3))) > 1e-6 or abs(np.linalg.det(self.frame) - 1) > 1e-6:
            raise ValueError("tangent frame must be a rotation matrix")
        if np.any(self.scales <= SCALE_MIN * 0.999) or np.any(self.scales >= SCALE_MAX * 1.001):
            raise ValueError(f"scales {self.scales} outside ({SCALE_MIN}, {SCALE_MAX})")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError(f"opacity {self.opacity} outside [0, 1]")

    @property
    def normal(self) -> np.ndarray:
        return self.frame[:, 2]


def disk_covariance(disk: GaussianDisk) -> np.ndarray:
    """C = R·diag(s1², s2², 0)·Rᵀ; rank 2 with the normal spanning the null space."""
    return disk_covariances(disk.frame[None], disk.scales[None])[0]


def disk_covariances(frames: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Batched ``disk_covariance`` over (N,3,3) frames and (N,2) scales."""
    tangents = frames[:, :, :2] * scales[:, None, :]
    return tangents @ np.swapaxes(tangents, 1, 2)


def disk_homography(disk: GaussianDisk) -> np.ndarray:
    """
    4×4 map from disk coordinates (u, v, 1, 1) to homogeneous world points.

    Columns are (s1·t1, s2·t2, 0, p) over the bottom row (0, 0, 0, 1).
    """
    h = np.zeros((4, 4))
    h[:3, 0] = disk.scales[0] * disk.frame[:, 0]
    h[:3, 1] = disk.scales[1] * disk.frame[:, 1]
    h[:3, 3] = disk.center
    h[3, 3] = 1.0
    return h


def initial_scale(z_depth, p_exponent: float, base_scale: float):
    """
    Distance-aware initial scale: base_scale · z^(-p), clamped to the scale bounds.

    Args:
        z_depth: Depth in meters (scalar or array), must be positive
        p_exponent: Rate of scaling with depth
        base_scale: Scale at unit depth

    Returns:
        s1 = s2 for each depth (same shape as the input)
    """
    z = np.asarray(z_depth, dtype=np.float64)
    if np.any(z <= 0):
        raise InvalidDepthError(f"initial_scale needs positive depth, got min {np.min(z)}")
    s = np.clip(base_scale * np.power(z, -p_exponent), SCALE_MIN, SCALE_MAX)
    return float(s) if s.ndim == 0 else s


@dataclass(frozen=True)
class KeyframePolicy:
    corr_ratio_threshold: float = 0.9
    mapping_interval: int = 8

    def __post_init__(self):
        if not 0.0 < self.corr_ratio_threshold < 1.0:
            raise ValueError(f"corr_ratio_threshold must be in (0, 1), got {self.corr_ratio_threshold}")
        if self.mapping_interval < 1:
            raise ValueError(f"mapping_interval must be >= 1, got {self.mapping_interval}")


def is_tracking_keyframe(corr_ratio: float, policy: KeyframePolicy) -> bool:
    return corr_ratio < policy.corr_ratio_threshold


def is_mapping_keyframe(frame_index: int, policy: KeyframePolicy) -> bool:
    return frame_index % policy.mapping_interval == 0


@dataclass
class Keyframe:
    index: int
    pose: Pose
    kinds: Set[str] = field(default_factory=set)


class MapSnapshot:
    """
    Immutable view of the map at one generation, with a KD-tree over disk centers.
    """

    def __init__(self, centers, frames, scales, colors, opacities, creation_frames, generation: int):
        self.centers = centers
        self.frames = frames
        self.scales = scales
        self.colors = colors
        self.opacities = opacities
        self.creation_frames = creation_frames
        self.generation = generation
        for array in (centers, frames, scales, colors, opacities, creation_frames):
            array.setflags(write=False)
        self._index: Optional[KDTree] = None

    def __len__(self) -> int:
        return int(self.centers.shape[0])

    @property
    def normals(self) -> np.ndarray:
        return self.frames[:, :, 2]

    @property
    def index(self) -> Optional[KDTree]:
        if self._index is None and len(self) > 0:
            self._index = KDTree(self.centers)
        return self._index

    def disk(self, i: int) -> GaussianDisk:
        return GaussianDisk(self.centers[i], self.frames[i], self.scales[i], self.colors[i],
                            float(self.opacities[i]), int(self.creation_frames[i]))

    def nearest(self, points: np.ndarray):
        """Nearest disk for each point as (distances, indices); lowest index wins ties."""
        points = np.atleast_2d(points)
        if len(self) == 0:
            return np.full(len(points), np.inf), np.full(len(points), -1, dtype=np.int64)
        k = min(4, len(self))
        distances, indices = self.index.query(points, k=k)
        # resolve equal-distance candidates by insertion index
        order = np.lexsort((indices, distances), axis=1) if k > 1 else np.zeros_like(indices)
        rows = np.arange(len(points))[:, None]
        distances = distances[rows, order]
        indices = indices[rows, order]
        return distances[:, 0], indices[:, 0].astype(np.int64)

    def query_neighbors(self, point: np.ndarray, max_count: int, max_radius: float) -> List[int]:
        """
        Disks within ``max_radius`` of ``point``, nearest first.

        Args:
            point: Query position (3,)
            max_count: Maximum number of disks returned
            max_radius: Inclusive distance gate in meters

        Returns:
            Disk indices ordered by distance, ties broken by insertion index
        """
        if len(self) == 0 or max_count <= 0:
            return []
        indices, distances = self.index.query_radius(np.asarray(point, dtype=np.float64).reshape(1, 3),
                                                     r=max_radius, return_distance=True)
        indices, distances = indices[0], distances[0]
        order = np.lexsort((indices, distances))
        return [int(i) for i in indices[order][:max_count]]


class GaussianMap:
    """
    Global disk collection, keyframe registry and generation counter.

    Single writer: every mutating method bumps ``generation``; readers use ``snapshot()``.
    """

    def __init__(self):
        self.centers = np.zeros((0, 3))
        self.frames = np.zeros((0, 3, 3))
        self.scales = np.zeros((0, 2))
        self.colors = np.zeros((0, 3))
        self.opacities = np.zeros(0)
        self.creation_frames = np.zeros(0, dtype=np.int64)
        self.keyframes: Dict[int, Keyframe] = {}
        self.generation = 0
        self._snapshot: Optional[MapSnapshot] = None

    def __len__(self) -> int:
        return int(self.centers.shape[0])

    def snapshot(self) -> MapSnapshot:
        if self._snapshot is None or self._snapshot.generation != self.generation:
            self._snapshot = MapSnapshot(self.centers.copy(), self.frames.copy(), self.scales.copy(),
                                         self.colors.copy(), self.opacities.copy(),
                                         self.creation_frames.copy(), self.generation)
        return self._snapshot

    def _bump(self):
        self.generation += 1

    def add_disks(self, centers, frames, scales, colors, opacities, creation_frame: Union[int, np.ndarray] = 0) -> int:
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        n = len(centers)
        if n == 0:
            return 0
        self.centers = np.concatenate([self.centers, centers])
        self.frames = np.concatenate([self.frames, np.asarray(frames, dtype=np.float64).reshape(n, 3, 3)])
        self.scales = np.concatenate([self.scales, np.clip(np.asarray(scales, dtype=np.float64).reshape(n, 2),
                                                           SCALE_MIN, SCALE_MAX)])
        self.colors = np.concatenate([self.colors, np.asarray(colors, dtype=np.float64).reshape(n, 3)])
        self.opacities = np.concatenate([self.opacities, np.broadcast_to(
            np.asarray(opacities, dtype=np.float64), (n,))])
        self.creation_frames = np.concatenate([self.creation_frames, np.broadcast_to(
            np.asarray(creation_frame, dtype=np.int64), (n,))])
        self._bump()
        return n

    def add_disk(self, disk: GaussianDisk) -> int:
        self.add_disks(disk.center, disk.frame, disk.scales, disk.color, disk.opacity, disk.creation_frame)
        return len(self) - 1

    def set_parameters(self, centers=None, frames=None, scales=None, colors=None, opacities=None):
        """Replace parameter arrays in place (same disk count)."""
        for name, value in (('centers', centers), ('frames', frames), ('scales', scales),
                            ('colors', colors), ('opacities', opacities)):
            if value is None:
                continue
            value = np.array(value, dtype=np.float64)
            if value.shape != getattr(self, name).shape:
                raise ValueError(f"{name} shape {value.shape} != {getattr(self, name).shape}")
            setattr(self, name, value)
        self._bump()

    def prune(self, keep: np.ndarray) -> int:
        """Drop disks where ``keep`` is False; returns the number removed."""
        keep = np.asarray(keep, dtype=bool)
        removed = int(np.count_nonzero(~keep))
        if removed == 0:
            return 0
        self.centers = self.centers[keep]
        self.frames = self.frames[keep]
        self.scales = self.scales[keep]
        self.colors = self.colors[keep]
        self.opacities = self.opacities[keep]
        self.creation_frames = self.creation_frames[keep]
        self._bump()
        return removed

    def register_keyframe(self, index: int, pose: Pose, kind: str):
        if not pose.is_valid(1e-6):
            raise ValueError(f"keyframe {index} has an invalid pose")
        keyframe = self.keyframes.setdefault(index, Keyframe(index, pose))
        keyframe.pose = pose
        keyframe.kinds.add(kind)

    def keyframe_indices(self, kind: Optional[str] = None) -> List[int]:
        return sorted(i for i, k in self.keyframes.items() if kind is None or kind in k.kinds)

    def query_neighbors(self, point: np.ndarray, max_count: int, max_radius: float) -> List[int]:
        return self.snapshot().query_neighbors(point, max_count, max_radius)

    # ------------------------------------------------------------------
    # PLY serialization
    # ------------------------------------------------------------------

    _PLY_FLOAT_FIELDS = ('x', 'y', 'z', 'nx', 'ny', 'nz', 's1', 's2', 'red', 'green', 'blue', 'opacity',
                         'qx', 'qy', 'qz', 'qw', 't1x', 't1y', 't1z', 't2x', 't2y', 't2z')

    def save_ply(self, path: Union[str, Path]) -> Path:
        """Write one vertex per disk; every float property is stored as float64."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        dtype = [(name, 'f8') for name in self._PLY_FLOAT_FIELDS] + [('creation_frame', 'i4')]
        vertices = np.empty(len(self), dtype=dtype)
        quats = Rotation.from_matrix(self.frames).as_quat() if len(self) else np.zeros((0, 4))
        columns = {
            'x': self.centers[:, 0], 'y': self.centers[:, 1], 'z': self.centers[:, 2],
            'nx': self.frames[:, 0, 2], 'ny': self.frames[:, 1, 2], 'nz': self.frames[:, 2, 2],
            's1': self.scales[:, 0], 's2': self.scales[:, 1],
            'red': self.colors[:, 0], 'green': self.colors[:, 1], 'blue': self.colors[:, 2],
            'opacity': self.opacities,
            'qx': quats[:, 0], 'qy': quats[:, 1], 'qz': quats[:, 2], 'qw': quats[:, 3],
            't1x': self.frames[:, 0, 0], 't1y': self.frames[:, 1, 0], 't1z': self.frames[:, 2, 0],
            't2x': self.frames[:, 0, 1], 't2y': self.frames[:, 1, 1], 't2z': self.frames[:, 2, 1],
            'creation_frame': self.creation_frames,
        }
        for name, values in columns.items():
            vertices[name] = values
        PlyData([PlyElement.describe(vertices, 'vertex')], text=False).write(str(path))
        logger.info(f"💾 Saved {len(self)} disks to {path}")
        return path

    @classmethod
    def load_ply(cls, path: Union[str, Path]) -> 'GaussianMap':
        vertex = PlyData.read(str(path))['vertex']
        gmap = cls()
        n = vertex.count
        if n == 0:
            return gmap
        col = lambda name: np.asarray(vertex[name], dtype=np.float64)
        frames = np.empty((n, 3, 3))
        frames[:, :, 0] = np.stack([col('t1x'), col('t1y'), col('t1z')], axis=-1)
        frames[:, :, 1] = np.stack([col('t2x'), col('t2y'), col('t2z')], axis=-1)
        frames[:, :, 2] = np.stack([col('nx'), col('ny'), col('nz')], axis=-1)
        gmap.centers = np.stack([col('x'), col('y'), col('z')], axis=-1)
        gmap.frames = frames
        gmap.scales = np.stack([col('s1'), col('s2')], axis=-1)
        gmap.colors = np.stack([col('red'), col('green'), col('blue')], axis=-1)
        gmap.opacities = col('opacity')
        gmap.creation_frames = np.asarray(vertex['creation_frame'], dtype=np.int64)
        gmap._bump()
        return gmap


def seed_disks_from_frame(frame: Frame, pose: Pose, gmap: GaussianMap, seed_stride: int = 4,
                          base_scale: float = 0.02, p_exponent: float = 0.333,
                          initial_opacity: float = INITIAL_OPACITY,
                          gate_factor: float = SEED_GATE_FACTOR) -> int:
    """
    Add surface-aligned disks for sampled pixels not already covered by the map.

    Args:
        frame: RGB-D observation
        pose: Camera-to-world pose of the frame
        gmap: Map to extend
        seed_stride: Pixel sampling stride
        base_scale: Disk scale at unit depth
        p_exponent: Distance-aware scaling exponent
        initial_opacity: Opacity of new disks
        gate_factor: A candidate is skipped when an existing center lies within
            gate_factor × its initial scale

    Returns:
        Number of disks added
    """
    cloud = backproject(frame.depth, frame.intrinsics, seed_stride)
    if len(cloud) == 0:
        return 0

    normal_map = normals_from_depth(frame.depth, frame.intrinsics)
    us, vs = cloud.pixels[:, 0], cloud.pixels[:, 1]
    normals_cam = normal_map.normals[vs, us]
    # pixels without a full neighbourhood face the camera
    fallback = ~normal_map.valid[vs, us]
    if np.any(fallback):
        rays = cloud.points[fallback]
        normals_cam[fallback] = -rays / np.linalg.norm(rays, axis=-1, keepdims=True)

    scales = initial_scale(cloud.points[:, 2], p_exponent, base_scale)
    centers = pose.transform(cloud.points)
    normals = normals_cam @ pose.rotation.T

    snapshot = gmap.snapshot()
    if len(snapshot) > 0:
        distances, _ = snapshot.nearest(centers)
        keep = distances > gate_factor * scales
    else:
        keep = np.ones(len(centers), dtype=bool)
    if not np.any(keep):
        return 0

    frames = tangent_frame_from_normal(normals[keep])
    colors = np.clip(frame.color[vs[keep], us[keep]], 0.0, 1.0)
    added = gmap.add_disks(centers[keep], frames, np.repeat(scales[keep, None], 2, axis=1), colors,
                           initial_opacity, frame.index)
    log_debug(None, f"seeded {added} disks from frame {frame.index} ({len(centers) - added} gated)")
    return added
