"""
CPU tile-based splatting of 2D Gaussian disks with an analytic backward pass.

Rendering works on fragments, one per (splat, pixel) pair inside the splat's
screen-space bounding box. Fragments are evaluated with whole-array numpy
operations, sorted tile-major and then by splat order, and composited front
to back per pixel. Work is partitioned into groups of 16×16 tiles; every tile
group owns its pixels, so the forward result does not depend on the
partitioning or on the number of worker threads.
"""

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import SceneMismatchError
from .gaussian_map import MapSnapshot
from .geometry import Intrinsics, Pose
from .logging_utils import log_kv

logger = logging.getLogger(__name__)

# Compositing stops once transmittance drops below this value
TRANSMITTANCE_MIN = 1e-4

# Kernel support: fragments with u² + v² beyond this are dropped (3 sigma)
KERNEL_CUTOFF_SQ = 9.0

# Rays closer than this to the disk plane do not intersect it
PARALLEL_EPS = 1e-8

# Accumulated normals shorter than this render as the zero normal
NORMAL_NORM_MIN = 1e-8

# Upper bound on fragments evaluated at once when expanding bounding boxes
FRAGMENT_BLOCK = 2_000_000


@dataclass
class ProjectedSplats:
    """Camera-frame disk data for one view, sorted front to back."""
    indices: np.ndarray      # (M,) disk index in the snapshot
    bboxes: np.ndarray       # (M, 4) u_min, u_max, v_min, v_max (inclusive pixel rect)
    centers: np.ndarray      # (M, 3) p_cam
    normals: np.ndarray      # (M, 3) n_cam
    tangents: np.ndarray     # (M, 2, 3) t1_cam, t2_cam
    scales: np.ndarray       # (M, 2)
    colors: np.ndarray       # (M, 3)
    opacities: np.ndarray    # (M,)
    sort_depths: np.ndarray  # (M,) camera-frame z of the center

    def __len__(self) -> int:
        return int(self.indices.shape[0])


@dataclass
class RenderOutput:
    color: np.ndarray   # H×W×3
    depth: np.ndarray   # H×W, meters
    normal: np.ndarray  # H×W×3, camera frame
    alpha: np.ndarray   # H×W accumulated opacity
    generation: int = -1
    fragment_count: int = 0
    _cache: Optional[Dict[str, np.ndarray]] = field(default=None, repr=False)


@dataclass
class UpstreamGradients:
    """dL/d(render channel). Channels left as None contribute nothing."""
    color: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None
    normal: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None


@dataclass
class RenderGradients:
    """Per-disk partials; ``frames`` is the world-frame rotation twist of each tangent frame."""
    centers: np.ndarray
    frames: np.ndarray
    scales: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    generation: int = -1

    @classmethod
    def zeros(cls, n: int, generation: int = -1) -> 'RenderGradients':
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 2)), np.zeros((n, 3)), np.zeros(n), generation)

    def groups(self) -> Dict[str, np.ndarray]:
        return {'centers': self.centers, 'frames': self.frames, 'scales': self.scales,
                'colors': self.colors, 'opacities': self.opacities}

    def __add__(self, other: 'RenderGradients') -> 'RenderGradients':
        return RenderGradients(self.centers + other.centers, self.frames + other.frames,
                               self.scales + other.scales, self.colors + other.colors,
                               self.opacities + other.opacities, self.generation)

    def scaled(self, factor: float) -> 'RenderGradients':
        return RenderGradients(self.centers * factor, self.frames * factor, self.scales * factor,
                               self.colors * factor, self.opacities * factor, self.generation)


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def _pixel_rect(us: np.ndarray, vs: np.ndarray, intrinsics: Intrinsics) -> np.ndarray:
    u_min = np.ceil(np.min(us, axis=1) - 1e-9)
    u_max = np.floor(np.max(us, axis=1) + 1e-9)
    v_min = np.ceil(np.min(vs, axis=1) - 1e-9)
    v_max = np.floor(np.max(vs, axis=1) + 1e-9)
    rect = np.stack([np.clip(u_min, 0, intrinsics.width - 1), np.clip(u_max, 0, intrinsics.width - 1),
                     np.clip(v_min, 0, intrinsics.height - 1), np.clip(v_max, 0, intrinsics.height - 1)],
                    axis=-1)
    onscreen = ((u_max >= 0) & (u_min <= intrinsics.width - 1) & (v_max >= 0) & (v_min <= intrinsics.height - 1)
                & (u_max >= u_min) & (v_max >= v_min))
    return rect.astype(np.int64), onscreen


def project_disks(snapshot: MapSnapshot, pose: Pose, intrinsics: Intrinsics, near: float = 0.05,
                  far: float = 10.0, representation: str = 'disk') -> ProjectedSplats:
    """
    Transform disks into the camera, cull them and sort front to back.

    Args:
        snapshot: Map snapshot
        pose: Camera-to-world pose of the view
        intrinsics: Camera model
        near: Near plane (meters); disks with center depth outside (near, far) are culled
        far: Far plane (meters)
        representation: ``disk`` or ``isotropic`` (volumetric baseline footprint)

    Returns:
        ProjectedSplats ordered by center depth, ties broken by disk index
    """
    view = pose.inverse()
    r, t = view.rotation, view.translation
    centers = snapshot.centers @ r.T + t
    z = centers[:, 2] if len(snapshot) else np.zeros(0)
    keep = (z > near) & (z < far)
    idx = np.nonzero(keep)[0]
    centers = centers[idx]
    frames = r @ snapshot.frames[idx]
    scales = snapshot.scales[idx]

    if representation == 'disk':
        signs = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=np.float64)
        offsets = 3.0 * np.einsum('cj,mij->mci', signs * 1.0, frames[:, :, :2] * scales[:, None, :])
        corners = centers[:, None, :] + offsets
        corner_z = corners[..., 2]
        safe_z = np.where(corner_z > 1e-9, corner_z, 1.0)
        us = intrinsics.fx * corners[..., 0] / safe_z + intrinsics.cx
        vs = intrinsics.fy * corners[..., 1] / safe_z + intrinsics.cy
        # a corner behind the camera means the footprint can reach any pixel
        straddle = np.any(corner_z <= near * 0.5, axis=1)
        us[straddle] = np.array([0.0, intrinsics.width - 1, 0.0, intrinsics.width - 1])
        vs[straddle] = np.array([0.0, 0.0, intrinsics.height - 1, intrinsics.height - 1])
    elif representation == 'isotropic':
        radius = 3.0 * scales[:, 0]
        cu = intrinsics.fx * centers[:, 0] / centers[:, 2] + intrinsics.cx
        cv = intrinsics.fy * centers[:, 1] / centers[:, 2] + intrinsics.cy
        # the cone tangent to the 3-sigma ball bounds its footprint
        dist = np.linalg.norm(centers, axis=1)
        ratio = radius / np.sqrt(np.maximum(dist ** 2 - radius ** 2, 1e-12))
        half_u = intrinsics.fx * ratio * (1.0 + ratio + np.abs(centers[:, 0]) / centers[:, 2])
        half_v = intrinsics.fy * ratio * (1.0 + ratio + np.abs(centers[:, 1]) / centers[:, 2])
        us = np.stack([cu - half_u, cu + half_u], axis=1)
        vs = np.stack([cv - half_v, cv + half_v], axis=1)
        inside = dist <= radius
        us[inside] = np.array([0.0, intrinsics.width - 1])
        vs[inside] = np.array([0.0, intrinsics.height - 1])
    else:
        raise ValueError(f"unknown representation '{representation}'")

    bboxes, onscreen = _pixel_rect(us, vs, intrinsics) if len(idx) else (np.zeros((0, 4), np.int64),
                                                                         np.zeros(0, bool))
    idx, centers, frames, scales, bboxes = idx[onscreen], centers[onscreen], frames[onscreen], scales[onscreen], \
        bboxes[onscreen]
    order = np.lexsort((idx, centers[:, 2]))
    idx, centers, frames, scales, bboxes = idx[order], centers[order], frames[order], scales[order], bboxes[order]
    return ProjectedSplats(
        indices=idx,
        bboxes=bboxes,
        centers=centers,
        normals=frames[:, :, 2],
        tangents=np.stack([frames[:, :, 0], frames[:, :, 1]], axis=1),
        scales=scales,
        colors=snapshot.colors[idx],
        opacities=snapshot.opacities[idx],
        sort_depths=centers[:, 2],
    )


# ---------------------------------------------------------------------------
# Fragment evaluation
# ---------------------------------------------------------------------------

def _pixel_ray(us: np.ndarray, vs: np.ndarray, intrinsics: Intrinsics) -> np.ndarray:
    return np.stack([(us - intrinsics.cx) / intrinsics.fx, (vs - intrinsics.cy) / intrinsics.fy,
                     np.ones_like(us, dtype=np.float64)], axis=-1)


def _disk_fragments(proj: ProjectedSplats, m: np.ndarray, rays: np.ndarray) -> Dict[str, np.ndarray]:
    """Ray–plane intersection, disk coordinates and kernel weight for each fragment."""
    p = proj.centers[m]
    n = proj.normals[m]
    t1 = proj.tangents[m, 0]
    t2 = proj.tangents[m, 1]
    s = proj.scales[m]
    a = np.sum(n * p, axis=1)
    b = np.sum(n * rays, axis=1)
    hit = np.abs(b) >= PARALLEL_EPS
    safe_b = np.where(hit, b, 1.0)
    lam = a / safe_b
    w = lam[:, None] * rays - p
    u = np.sum(t1 * w, axis=1) / s[:, 0]
    v = np.sum(t2 * w, axis=1) / s[:, 1]
    q2 = u * u + v * v
    valid = hit & (lam > 0) & (q2 <= KERNEL_CUTOFF_SQ)
    sign = np.where(a > 0, -1.0, 1.0)
    return {'lam': lam, 'a': a, 'b': safe_b, 'w': w, 'u': u, 'v': v, 'q2': q2,
            'kernel': np.exp(-0.5 * q2), 'depth': lam, 'sign': sign, 'valid': valid}


def _isotropic_fragments(proj: ProjectedSplats, m: np.ndarray, rays: np.ndarray) -> Dict[str, np.ndarray]:
    """Ball footprint: distance from the center to the pixel ray, center depth everywhere."""
    p = proj.centers[m]
    s = proj.scales[m, 0]
    unit = rays / np.linalg.norm(rays, axis=1, keepdims=True)
    along = np.sum(p * unit, axis=1)
    perp = p - along[:, None] * unit
    q2 = np.sum(perp * perp, axis=1) / (s * s)
    valid = (along > 0) & (q2 <= KERNEL_CUTOFF_SQ)
    sign = np.where(np.sum(proj.normals[m] * p, axis=1) > 0, -1.0, 1.0)
    return {'perp': perp, 'q2': q2, 'kernel': np.exp(-0.5 * q2), 'depth': p[:, 2].copy(),
            'sign': sign, 'valid': valid}


def splat_weight(proj: ProjectedSplats, i: int, pixel: Tuple[float, float], intrinsics: Intrinsics):
    """
    Evaluate splat ``i`` at one pixel.

    Args:
        proj: Projected splats of the view
        i: Position of the splat in ``proj`` (sorted order)
        pixel: (u, v) pixel coordinates
        intrinsics: Camera model

    Returns:
        (u, v, G, depth) in disk coordinates, or None when the ray misses the plane
        or hits it behind the camera; G is 0 beyond the 3-sigma cutoff
    """
    ray = _pixel_ray(np.array([float(pixel[0])]), np.array([float(pixel[1])]), intrinsics)
    if abs(float(np.dot(proj.normals[i], ray[0]))) < PARALLEL_EPS:
        return None
    frag = _disk_fragments(proj, np.array([i]), ray)
    if frag['lam'][0] <= 0:
        return None
    kernel = float(frag['kernel'][0]) if frag['q2'][0] <= KERNEL_CUTOFF_SQ else 0.0
    return float(frag['u'][0]), float(frag['v'][0]), kernel, float(frag['lam'][0])


# ---------------------------------------------------------------------------
# Rasterizer
# ---------------------------------------------------------------------------

class Rasterizer:
    """
    Forward and backward splatting for one configuration.

    Args:
        near: Near plane in meters
        far: Far plane in meters
        background: Constant background color
        representation: ``disk`` (ray–plane depth) or ``isotropic`` (center depth baseline)
        tile_size: Tile edge in pixels for the work partition
        threads: Worker threads for tile groups
        deterministic: Force a fixed reduction order in the backward pass
    """

    def __init__(self, near: float = 0.05, far: float = 10.0, background: Sequence[float] = (0.0, 0.0, 0.0),
                 representation: str = 'disk', tile_size: int = 16, threads: int = 1, deterministic: bool = True):
        if near <= 0 or far <= near:
            raise ValueError(f"need 0 < near < far, got near={near}, far={far}")
        self.near = near
        self.far = far
        self.background = np.asarray(background, dtype=np.float64).reshape(3)
        self.representation = representation
        self.tile_size = tile_size
        self.threads = max(1, threads)
        self.deterministic = deterministic

    @classmethod
    def from_config(cls, config) -> 'Rasterizer':
        return cls(config.mapping.near, config.mapping.far, config.mapping.background,
                   config.mapping.representation, config.runtime.tile_size, config.runtime.threads,
                   config.runtime.deterministic)

    # -- fragments -------------------------------------------------------

    def _expand(self, proj: ProjectedSplats, intrinsics: Intrinsics) -> Dict[str, np.ndarray]:
        widths = proj.bboxes[:, 1] - proj.bboxes[:, 0] + 1
        heights = proj.bboxes[:, 3] - proj.bboxes[:, 2] + 1
        counts = widths * heights
        evaluate = _disk_fragments if self.representation == 'disk' else _isotropic_fragments

        pieces: List[Dict[str, np.ndarray]] = []
        start = 0
        cumulative = np.cumsum(counts)
        while start < len(proj):
            base = cumulative[start - 1] if start > 0 else 0
            stop = int(np.searchsorted(cumulative, base + FRAGMENT_BLOCK, side='right'))
            stop = max(stop, start + 1)
            block = np.arange(start, stop)
            block_counts = counts[block]
            m = np.repeat(block, block_counts)
            offsets = np.repeat(np.cumsum(block_counts) - block_counts, block_counts)
            local = np.arange(m.shape[0]) - offsets
            us = proj.bboxes[m, 0] + local % widths[m]
            vs = proj.bboxes[m, 2] + local // widths[m]
            rays = _pixel_ray(us.astype(np.float64), vs.astype(np.float64), intrinsics)
            frag = evaluate(proj, m, rays)
            keep = frag.pop('valid')
            piece = {key: value[keep] for key, value in frag.items()}
            piece.update(m=m[keep], u_px=us[keep], v_px=vs[keep], rays=rays[keep])
            pieces.append(piece)
            start = stop

        if not pieces:
            return {}
        fragments = {key: np.concatenate([p[key] for p in pieces]) for key in pieces[0]}

        ts = self.tile_size
        tiles_per_row = -(-intrinsics.width // ts)
        tile = (fragments['v_px'] // ts) * tiles_per_row + fragments['u_px'] // ts
        key = tile * (ts * ts) + (fragments['v_px'] % ts) * ts + fragments['u_px'] % ts
        order = np.argsort(key, kind='stable')
        fragments = {name: value[order] for name, value in fragments.items()}
        fragments['tile'] = tile[order]
        fragments['key'] = key[order]
        fragments['pixel'] = fragments['v_px'] * intrinsics.width + fragments['u_px']
        return fragments

    def _tile_groups(self, fragments: Dict[str, np.ndarray], intrinsics: Intrinsics) -> List[Tuple[int, int]]:
        n = fragments['key'].shape[0]
        ts = self.tile_size
        n_tiles = (-(-intrinsics.width // ts)) * (-(-intrinsics.height // ts))
        n_groups = max(1, min(n_tiles, self.threads * 4))
        bounds = np.linspace(0, n_tiles, n_groups + 1).astype(np.int64)
        cuts = np.searchsorted(fragments['tile'], bounds)
        cuts[-1] = n
        return [(int(cuts[i]), int(cuts[i + 1])) for i in range(n_groups) if cuts[i + 1] > cuts[i]]

    def _map(self, fn, groups):
        if self.threads == 1 or len(groups) == 1:
            return [fn(g) for g in groups]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, groups))

    @staticmethod
    def _dense_layout(keys: np.ndarray):
        _, starts, counts = np.unique(keys, return_index=True, return_counts=True)
        rows = np.repeat(np.arange(starts.shape[0]), counts)
        ranks = np.arange(keys.shape[0]) - np.repeat(starts, counts)
        return rows, ranks, starts, int(counts.max())

    # -- forward ----------------------------------------------------------

    def _composite(self, fragments, opacity_by_m, group):
        lo, hi = group
        keys = fragments['key'][lo:hi]
        rows, ranks, starts, k = self._dense_layout(keys)
        n_pix = starts.shape[0]
        alpha = opacity_by_m[fragments['m'][lo:hi]] * fragments['kernel'][lo:hi]
        dense = np.zeros((n_pix, k))
        dense[rows, ranks] = alpha
        trans = np.ones((n_pix, k))
        trans[:, 1:] = np.cumprod(1.0 - dense[:, :-1], axis=1)
        use = trans >= TRANSMITTANCE_MIN
        dense = dense * use
        trans[:, 1:] = np.cumprod(1.0 - dense[:, :-1], axis=1)
        t_final = trans[:, -1] * (1.0 - dense[:, -1])
        weights = (dense * trans)[rows, ranks]
        return {'rows': rows, 'ranks': ranks, 'pixels': fragments['pixel'][lo:hi][starts],
                'alpha_dense': dense, 'trans': trans, 'use': use, 't_final': t_final,
                'weights': weights, 'frag_alpha': dense[rows, ranks]}

    def render(self, snapshot: MapSnapshot, pose: Pose, intrinsics: Intrinsics,
               keep_cache: bool = True) -> RenderOutput:
        """
        Composite the snapshot into color, depth, normal and alpha images.

        Args:
            snapshot: Map snapshot
            pose: Camera-to-world pose
            intrinsics: Camera model
            keep_cache: Retain fragment data for ``backward``

        Returns:
            RenderOutput stamped with the snapshot generation
        """
        h, w = intrinsics.height, intrinsics.width
        color = np.empty((h * w, 3))
        color[:] = self.background
        depth = np.zeros(h * w)
        normal_acc = np.zeros((h * w, 3))
        t_final_img = np.ones(h * w)

        proj = project_disks(snapshot, pose, intrinsics, self.near, self.far, self.representation)
        fragments = self._expand(proj, intrinsics) if len(proj) else {}
        n_frag = fragments['key'].shape[0] if fragments else 0
        if n_frag == 0:
            out = RenderOutput(color.reshape(h, w, 3), depth.reshape(h, w), normal_acc.reshape(h, w, 3),
                               np.zeros((h, w)), snapshot.generation, 0)
            out._cache = {'proj': proj, 'fragments': {}, 'groups': [], 'pose': pose,
                          'normal_acc': normal_acc} if keep_cache else None
            return out

        groups = self._tile_groups(fragments, intrinsics)
        log_kv(logger, 'render', disks=len(snapshot), visible=len(proj), fragments=n_frag, groups=len(groups))
        feature_normals = proj.normals[fragments['m']] * fragments['sign'][:, None]
        fragments['feature_normal'] = feature_normals
        composited = self._map(lambda g: self._composite(fragments, proj.opacities, g), groups)

        for (lo, hi), comp in zip(groups, composited):
            rows, pixels, wts = comp['rows'], comp['pixels'], comp['weights']
            n_pix = pixels.shape[0]
            m = fragments['m'][lo:hi]
            acc_color = np.stack([np.bincount(rows, wts * proj.colors[m, c], n_pix) for c in range(3)], axis=-1)
            color[pixels] = acc_color + comp['t_final'][:, None] * self.background
            depth[pixels] = np.bincount(rows, wts * fragments['depth'][lo:hi], n_pix)
            normal_acc[pixels] = np.stack([np.bincount(rows, wts * feature_normals[lo:hi, c], n_pix)
                                           for c in range(3)], axis=-1)
            t_final_img[pixels] = comp['t_final']

        norm = np.linalg.norm(normal_acc, axis=1)
        normal = np.where((norm >= NORMAL_NORM_MIN)[:, None], normal_acc / np.maximum(norm, NORMAL_NORM_MIN)[:, None],
                          0.0)
        out = RenderOutput(color.reshape(h, w, 3), depth.reshape(h, w), normal.reshape(h, w, 3),
                           (1.0 - t_final_img).reshape(h, w), snapshot.generation, n_frag)
        if keep_cache:
            out._cache = {'proj': proj, 'fragments': fragments, 'groups': groups, 'composited': composited,
                          'pose': pose, 'normal_acc': normal_acc, 'intrinsics': intrinsics}
        return out

    # -- backward ---------------------------------------------------------

    def _backward_group(self, fragments, proj, composited, group, g_color, g_depth, g_nacc, g_alpha):
        lo, hi = group
        rows, ranks, pixels = composited['rows'], composited['ranks'], composited['pixels']
        dense_alpha, trans, use = composited['alpha_dense'], composited['trans'], composited['use']
        n_pix, k = dense_alpha.shape
        m = fragments['m'][lo:hi]

        gc, gd, gn, ga = g_color[pixels], g_depth[pixels], g_nacc[pixels], g_alpha[pixels]
        feat_dot = (np.sum(proj.colors[m] * gc[rows], axis=1) + fragments['depth'][lo:hi] * gd[rows]
                    + np.sum(fragments['feature_normal'][lo:hi] * gn[rows], axis=1))
        fg = np.zeros((n_pix, k))
        fg[rows, ranks] = feat_dot

        # suffix terms, back to front
        suffix = np.empty((n_pix, k))
        suffix[:, -1] = gc @ self.background - ga
        for j in range(k - 2, -1, -1):
            suffix[:, j] = fg[:, j + 1] * dense_alpha[:, j + 1] + (1.0 - dense_alpha[:, j + 1]) * suffix[:, j + 1]
        d_alpha = (trans * (fg - suffix) * use)[rows, ranks]

        weights = composited['weights']
        return {
            'd_alpha': d_alpha,
            'd_color': weights[:, None] * gc[rows],
            'd_depth': weights * gd[rows],
            'd_feature_normal': weights[:, None] * gn[rows],
        }

    def backward(self, snapshot: MapSnapshot, forward: RenderOutput, upstream: UpstreamGradients) -> RenderGradients:
        """
        Exact partials of a scalar loss with respect to every disk parameter.

        Args:
            snapshot: The snapshot the forward pass rendered
            forward: RenderOutput produced with ``keep_cache=True``
            upstream: dL/d(render channels)

        Returns:
            RenderGradients indexed like the snapshot's disks
        """
        if forward._cache is None:
            raise SceneMismatchError("forward pass was rendered without a backward cache")
        if forward.generation != snapshot.generation:
            raise SceneMismatchError(f"forward pass generation {forward.generation} != snapshot "
                                     f"generation {snapshot.generation}")
        grads = RenderGradients.zeros(len(snapshot), snapshot.generation)
        cache = forward._cache
        fragments = cache['fragments']
        if not fragments:
            return grads
        proj: ProjectedSplats = cache['proj']
        h, w = forward.depth.shape
        n_px = h * w

        g_color = np.zeros((n_px, 3)) if upstream.color is None else upstream.color.reshape(n_px, 3)
        g_depth = np.zeros(n_px) if upstream.depth is None else upstream.depth.reshape(n_px)
        g_alpha = np.zeros(n_px) if upstream.alpha is None else upstream.alpha.reshape(n_px)
        # gradient through the normalization of the accumulated normal
        g_nacc = np.zeros((n_px, 3))
        if upstream.normal is not None:
            acc = cache['normal_acc']
            norm = np.linalg.norm(acc, axis=1)
            ok = norm >= NORMAL_NORM_MIN
            unit = np.where(ok[:, None], acc / np.maximum(norm, NORMAL_NORM_MIN)[:, None], 0.0)
            g_n = upstream.normal.reshape(n_px, 3)
            g_nacc[ok] = (g_n[ok] - unit[ok] * np.sum(unit[ok] * g_n[ok], axis=1, keepdims=True)) / norm[ok, None]

        groups = cache['groups']
        parts = self._map(lambda gi: self._backward_group(fragments, proj, cache['composited'][gi], groups[gi],
                                                          g_color, g_depth, g_nacc, g_alpha),
                          list(range(len(groups))))
        per_frag = {key: np.concatenate([p[key] for p in parts]) for key in parts[0]}
        per_splat = self._fragment_to_splat(fragments, proj, per_frag)

        if self.deterministic or self.threads == 1:
            totals = self._reduce(fragments['m'], per_splat, len(proj))
        else:
            totals = self._reduce_concurrent(fragments['m'], per_splat, len(proj), groups)

        view_r = cache['pose'].inverse().rotation
        idx = proj.indices
        grads.colors[idx] = totals['color']
        grads.opacities[idx] = totals['opacity']
        grads.scales[idx] = totals['scales']
        grads.centers[idx] = totals['p'] @ view_r
        g_t1 = totals['t1'] @ view_r
        g_t2 = totals['t2'] @ view_r
        g_n = totals['n'] @ view_r
        frames = snapshot.frames[idx]
        grads.frames[idx] = (np.cross(frames[:, :, 0], g_t1) + np.cross(frames[:, :, 1], g_t2)
                             + np.cross(frames[:, :, 2], g_n))
        return grads

    def _fragment_to_splat(self, fragments, proj, per_frag) -> Dict[str, np.ndarray]:
        m = fragments['m']
        kernel = fragments['kernel']
        opacity = proj.opacities[m]
        d_alpha = per_frag['d_alpha']
        d_opacity = d_alpha * kernel
        d_q2 = -0.5 * kernel * d_alpha * opacity
        sign = fragments['sign']
        d_n = sign[:, None] * per_frag['d_feature_normal']
        zeros3 = np.zeros((m.shape[0], 3))

        if self.representation == 'disk':
            s = proj.scales[m]
            t1 = proj.tangents[m, 0]
            t2 = proj.tangents[m, 1]
            n = proj.normals[m]
            p = proj.centers[m]
            rays = fragments['rays']
            u, v, w, a, b = fragments['u'], fragments['v'], fragments['w'], fragments['a'], fragments['b']
            d_u = 2.0 * u * d_q2
            d_v = 2.0 * v * d_q2
            g_w = (d_u / s[:, 0])[:, None] * t1 + (d_v / s[:, 1])[:, None] * t2
            d_lam = per_frag['d_depth'] + np.sum(g_w * rays, axis=1)
            d_p = -g_w + (d_lam / b)[:, None] * n
            d_n = d_n + (d_lam / b)[:, None] * p - (d_lam * a / (b * b))[:, None] * rays
            d_t1 = (d_u / s[:, 0])[:, None] * w
            d_t2 = (d_v / s[:, 1])[:, None] * w
            d_s = np.stack([-d_u * u / s[:, 0], -d_v * v / s[:, 1]], axis=1)
        else:
            s1 = proj.scales[m, 0]
            d_p = (2.0 * d_q2 / (s1 * s1))[:, None] * fragments['perp']
            d_p[:, 2] += per_frag['d_depth']
            d_t1, d_t2 = zeros3, zeros3
            d_s = np.stack([-2.0 * d_q2 * fragments['q2'] / s1, np.zeros_like(s1)], axis=1)

        return {'color': per_frag['d_color'], 'opacity': d_opacity, 'scales': d_s,
                'p': d_p, 't1': d_t1, 't2': d_t2, 'n': d_n}

    @staticmethod
    def _reduce(m: np.ndarray, per_splat: Dict[str, np.ndarray], n_splats: int) -> Dict[str, np.ndarray]:
        totals = {}
        for key, values in per_splat.items():
            if values.ndim == 1:
                totals[key] = np.bincount(m, values, n_splats)
            else:
                totals[key] = np.stack([np.bincount(m, values[:, c], n_splats) for c in range(values.shape[1])],
                                       axis=-1)
        return totals

    def _reduce_concurrent(self, m, per_splat, n_splats, groups) -> Dict[str, np.ndarray]:
        totals = None
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            futures = [pool.submit(self._reduce, m[lo:hi], {k: v[lo:hi] for k, v in per_splat.items()}, n_splats)
                       for lo, hi in groups]
            # partial sums arrive in completion order
            for future in as_completed(futures):
                part = future.result()
                totals = part if totals is None else {k: totals[k] + part[k] for k in totals}
        return totals


def render(snapshot: MapSnapshot, pose: Pose, intrinsics: Intrinsics,
           background: Sequence[float] = (0.0, 0.0, 0.0), **kwargs) -> RenderOutput:
    """Render with a default Rasterizer; keyword arguments go to its constructor."""
    return Rasterizer(background=background, **kwargs).render(snapshot, pose, intrinsics)


def render_backward(snapshot: MapSnapshot, forward: RenderOutput, upstream: UpstreamGradients,
                    rasterizer: Optional[Rasterizer] = None) -> RenderGradients:
    """Backward pass matching ``render``; ``rasterizer`` must match the forward configuration."""
    rasterizer = rasterizer or Rasterizer()
    return rasterizer.backward(snapshot, forward, upstream)
