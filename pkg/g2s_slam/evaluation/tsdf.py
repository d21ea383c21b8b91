"""
Truncated signed distance fusion and marching-cubes mesh extraction.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import map_coordinates
from skimage import measure
from tqdm import tqdm

from ..geometry import Intrinsics, Pose
from ..logging_utils import log_kv, progress_enabled
from .mesh import TriangleMesh

logger = logging.getLogger(__name__)


@dataclass
class TsdfVolume:
    """
    Dense voxel grid. ``tsdf`` is normalized to [-1, 1] (1 where unobserved),
    ``weight`` counts fused observations, ``color`` is the running mean RGB.
    Voxel (i, j, k) has its center at ``origin + voxel_size·(i, j, k)``.
    """
    voxel_size: float
    truncation: float
    origin: np.ndarray
    tsdf: np.ndarray
    weight: np.ndarray
    color: np.ndarray

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        if self.truncation < 2 * self.voxel_size:
            raise ValueError(f"truncation {self.truncation} must be at least twice the voxel size {self.voxel_size}")
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)

    @classmethod
    def create(cls, bounds_min, bounds_max, voxel_size: float = 0.01, truncation: float = 0.04) -> 'TsdfVolume':
        """Allocate a volume covering [bounds_min, bounds_max] (meters)."""
        lo = np.asarray(bounds_min, dtype=np.float64)
        hi = np.asarray(bounds_max, dtype=np.float64)
        dims = np.maximum(np.ceil((hi - lo) / voxel_size).astype(np.int64) + 1, 2)
        shape = tuple(int(d) for d in dims)
        return cls(voxel_size, truncation, lo, np.ones(shape), np.zeros(shape), np.zeros(shape + (3,)))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.tsdf.shape)

    def voxel_centers(self, x_range: slice = slice(None)) -> np.ndarray:
        nx, ny, nz = self.shape
        xs = np.arange(nx)[x_range]
        grid = np.stack(np.meshgrid(xs, np.arange(ny), np.arange(nz), indexing='ij'), axis=-1)
        return self.origin + grid * self.voxel_size


def bounds_from_frames(depths: Iterable[np.ndarray], poses: Iterable[Pose], intrinsics: Intrinsics,
                       margin: float = 0.1, stride: int = 4) -> Tuple[np.ndarray, np.ndarray]:
    """Axis-aligned world bounds of all valid back-projected depth samples, padded by ``margin``."""
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    rays = intrinsics.pixel_rays()[::stride, ::stride]
    for depth, pose in zip(depths, poses):
        sampled = depth[::stride, ::stride]
        valid = sampled > 0
        if not np.any(valid):
            continue
        points = pose.transform(rays[valid] * sampled[valid][:, None])
        lo = np.minimum(lo, points.min(axis=0))
        hi = np.maximum(hi, points.max(axis=0))
    if not np.all(np.isfinite(lo)):
        raise ValueError("no valid depth to bound the volume")
    return lo - margin, hi + margin


def _integrate_slab(volume: TsdfVolume, x_range: slice, depth: np.ndarray, color: Optional[np.ndarray],
                    view: Pose, intrinsics: Intrinsics):
    centers = volume.voxel_centers(x_range)
    cam = centers @ view.rotation.T + view.translation
    z = cam[..., 2]
    in_front = z > 1e-9
    safe_z = np.where(in_front, z, 1.0)
    u = np.round(intrinsics.fx * cam[..., 0] / safe_z + intrinsics.cx).astype(np.int64)
    v = np.round(intrinsics.fy * cam[..., 1] / safe_z + intrinsics.cy).astype(np.int64)
    visible = in_front & (u >= 0) & (u < intrinsics.width) & (v >= 0) & (v < intrinsics.height)
    measured = np.zeros_like(z)
    measured[visible] = depth[v[visible], u[visible]]
    # distance to the surface along the viewing ray, not along the optical axis
    sdf = (measured - z) * np.linalg.norm(cam, axis=-1) / safe_z
    update = visible & (measured > 0) & (sdf >= -volume.truncation)
    if not np.any(update):
        return

    tsdf = volume.tsdf[x_range]
    weight = volume.weight[x_range]
    observed = np.minimum(1.0, sdf[update] / volume.truncation)
    w_old = weight[update]
    tsdf[update] = (tsdf[update] * w_old + observed) / (w_old + 1.0)
    if color is not None:
        col = volume.color[x_range]
        sample = color[v[update], u[update]]
        col[update] = (col[update] * w_old[:, None] + sample) / (w_old[:, None] + 1.0)
    weight[update] = w_old + 1.0


def tsdf_integrate(volume: TsdfVolume, depth: np.ndarray, color: Optional[np.ndarray], pose: Pose,
                   intrinsics: Intrinsics, threads: int = 1) -> TsdfVolume:
    """
    Fuse one depth (and color) observation.

    Args:
        volume: Volume updated in place
        depth: H×W depth in meters, 0 = invalid
        color: H×W×3 RGB or None
        pose: Camera-to-world pose
        intrinsics: Camera model
        threads: Worker threads; each owns a slab of x slices

    Returns:
        The same volume
    """
    view = pose.inverse()
    nx = volume.shape[0]
    n_slabs = max(1, min(threads, nx))
    bounds = np.linspace(0, nx, n_slabs + 1).astype(np.int64)
    slabs = [slice(int(bounds[i]), int(bounds[i + 1])) for i in range(n_slabs) if bounds[i + 1] > bounds[i]]
    if len(slabs) == 1:
        _integrate_slab(volume, slabs[0], depth, color, view, intrinsics)
    else:
        with ThreadPoolExecutor(max_workers=n_slabs) as pool:
            list(pool.map(lambda s: _integrate_slab(volume, s, depth, color, view, intrinsics), slabs))
    return volume


def integrate_frames(volume: TsdfVolume, frames: Sequence, poses: Sequence[Pose], threads: int = 1) -> TsdfVolume:
    """Fuse sensor frames at the given poses."""
    for frame, pose in tqdm(list(zip(frames, poses)), desc="fusing", leave=False, disable=not progress_enabled()):
        tsdf_integrate(volume, frame.depth, frame.color, pose, frame.intrinsics, threads)
    return volume


def extract_mesh(volume: TsdfVolume) -> TriangleMesh:
    """
    Zero level set of the volume as a triangle mesh with per-vertex colors.

    Only cells whose eight corners all carry positive weight emit triangles.
    """
    observed = volume.weight > 0
    if not np.any(observed):
        return TriangleMesh.empty()
    try:
        verts, faces, _, _ = measure.marching_cubes(volume.tsdf, level=0.0)
    except (ValueError, RuntimeError):
        # no zero crossing in the data range
        return TriangleMesh.empty()

    if len(faces):
        cells = np.floor(verts[faces].mean(axis=1)).astype(np.int64)
        cells = np.clip(cells, 0, np.array(volume.shape) - 2)
        keep = np.ones(len(faces), dtype=bool)
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    keep &= observed[cells[:, 0] + dx, cells[:, 1] + dy, cells[:, 2] + dz]
        faces = faces[keep]

    used = np.unique(faces)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    verts = verts[used]
    faces = remap[faces]
    colors = np.stack([map_coordinates(volume.color[..., c], verts.T, order=1, mode='nearest')
                       for c in range(3)], axis=-1) if len(verts) else np.zeros((0, 3))
    mesh = TriangleMesh(volume.origin + verts * volume.voxel_size, faces, colors).without_degenerate()
    log_kv(logger, 'tsdf.mesh', vertices=len(mesh.vertices), triangles=len(mesh))
    return mesh


def render_tsdf_over_trajectory(gmap, trajectory, intrinsics: Intrinsics, volume: TsdfVolume, rasterizer,
                                alpha_min: float = 0.5, threads: int = 1) -> TsdfVolume:
    """
    Fuse depth and color rendered from the map at every trajectory pose.

    Args:
        gmap: GaussianMap to render
        trajectory: Poses to render from
        intrinsics: Camera model of the rendered views
        volume: Volume updated in place
        rasterizer: Renderer configuration
        alpha_min: Pixels with less accumulated opacity are left out

    Returns:
        The same volume
    """
    snapshot = gmap.snapshot()
    for _, pose in tqdm(list(trajectory), desc="rendering for fusion", leave=False, disable=not progress_enabled()):
        rendered = rasterizer.render(snapshot, pose, intrinsics, keep_cache=False)
        depth = np.where(rendered.alpha >= alpha_min, rendered.depth, 0.0)
        tsdf_integrate(volume, depth, np.clip(rendered.color, 0.0, 1.0), pose, intrinsics, threads)
    return volume
