"""
Triangle meshes: PLY IO, area-weighted sampling and precision / recall / F1
against a reference surface.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from plyfile import PlyData, PlyElement
from sklearn.neighbors import KDTree

logger = logging.getLogger(__name__)

# Triangles with less area than this are dropped as degenerate
DEGENERATE_AREA = 1e-14

# Point-triangle pairs evaluated per batch
DISTANCE_BATCH = 500_000


@dataclass
class TriangleMesh:
    vertices: np.ndarray                 # (V, 3) meters
    triangles: np.ndarray                # (T, 3) vertex indices
    colors: Optional[np.ndarray] = None  # (V, 3) in [0, 1]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)

    @classmethod
    def empty(cls) -> 'TriangleMesh':
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @classmethod
    def from_box(cls, box_min, box_max) -> 'TriangleMesh':
        """Closed axis-aligned box, two triangles per face."""
        lo = np.asarray(box_min, dtype=np.float64)
        hi = np.asarray(box_max, dtype=np.float64)
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        # corner index = 4·ix + 2·iy + iz
        faces = [
            (0, 1, 3, 2), (4, 6, 7, 5),  # x = lo, x = hi
            (0, 4, 5, 1), (2, 3, 7, 6),  # y = lo, y = hi
            (0, 2, 6, 4), (1, 5, 7, 3),  # z = lo, z = hi
        ]
        triangles = []
        for a, b, c, d in faces:
            triangles.extend([(a, b, c), (a, c, d)])
        return cls(corners, np.array(triangles))

    def __len__(self) -> int:
        return int(self.triangles.shape[0])

    @property
    def corners(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        tri = self.vertices[self.triangles]
        return tri[:, 0], tri[:, 1], tri[:, 2]

    def triangle_areas(self) -> np.ndarray:
        a, b, c = self.corners
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    @property
    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def without_degenerate(self) -> 'TriangleMesh':
        keep = self.triangle_areas() > DEGENERATE_AREA
        return TriangleMesh(self.vertices, self.triangles[keep], self.colors)

    def transformed(self, pose) -> 'TriangleMesh':
        return TriangleMesh(pose.transform(self.vertices), self.triangles, self.colors)

    def sample_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """
        Uniform samples over the surface.

        Args:
            n: Number of points
            rng: Random generator (seeded by the caller)

        Returns:
            (n, 3) points, triangles chosen with probability proportional to area
        """
        if len(self) == 0:
            raise ValueError("cannot sample an empty mesh")
        areas = self.triangle_areas()
        chosen = rng.choice(len(areas), size=n, p=areas / areas.sum())
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        a, b, c = (corner[chosen] for corner in self.corners)
        return (1.0 - r1)[:, None] * a + (r1 * (1.0 - r2))[:, None] * b + (r1 * r2)[:, None] * c

    def save_ply(self, path: Union[str, Path]) -> Path:
        """Binary PLY with float64 vertices, optional 8-bit colors and int32 faces."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        vertex_dtype = [('x', 'f8'), ('y', 'f8'), ('z', 'f8')]
        if self.colors is not None:
            vertex_dtype += [('red', 'u1'), ('green', 'u1'), ('blue', 'u1')]
        vertices = np.empty(len(self.vertices), dtype=vertex_dtype)
        vertices['x'], vertices['y'], vertices['z'] = self.vertices.T
        if self.colors is not None:
            rgb = np.round(np.clip(self.colors, 0.0, 1.0) * 255).astype(np.uint8)
            vertices['red'], vertices['green'], vertices['blue'] = rgb.T
        faces = np.empty(len(self.triangles), dtype=[('vertex_indices', 'i4', (3,))])
        faces['vertex_indices'] = self.triangles
        PlyData([PlyElement.describe(vertices, 'vertex'), PlyElement.describe(faces, 'face')],
                text=False).write(str(path))
        return path

    @classmethod
    def load_ply(cls, path: Union[str, Path]) -> 'TriangleMesh':
        ply = PlyData.read(str(path))
        vertex = ply['vertex']
        vertices = np.stack([vertex['x'], vertex['y'], vertex['z']], axis=-1).astype(np.float64)
        names = vertex.data.dtype.names
        colors = None
        if {'red', 'green', 'blue'} <= set(names):
            colors = np.stack([vertex['red'], vertex['green'], vertex['blue']], axis=-1) / 255.0
        if 'face' in ply and ply['face'].count:
            triangles = np.vstack(ply['face']['vertex_indices']).astype(np.int64)
        else:
            triangles = np.zeros((0, 3), dtype=np.int64)
        return cls(vertices, triangles, colors)


def point_triangle_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """
    Exact Euclidean distance from each point to the paired triangle (a, b, c).

    Closest-point search over the seven Voronoi regions of the triangle; all
    arguments are (N, 3) and broadcast row-wise.
    """
    ab, ac, ap = b - a, c - a, points - a
    d1 = np.einsum('ij,ij->i', ab, ap)
    d2 = np.einsum('ij,ij->i', ac, ap)
    bp = points - b
    d3 = np.einsum('ij,ij->i', ab, bp)
    d4 = np.einsum('ij,ij->i', ac, bp)
    cp = points - c
    d5 = np.einsum('ij,ij->i', ab, cp)
    d6 = np.einsum('ij,ij->i', ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    def safe(x):
        return np.where(np.abs(x) > 1e-300, x, 1.0)

    # interior
    denom = safe(va + vb + vc)
    closest = a + ab * (vb / denom)[:, None] + ac * (vc / denom)[:, None]
    # edge bc
    region = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    w = (d4 - d3) / safe((d4 - d3) + (d5 - d6))
    closest = np.where(region[:, None], b + (c - b) * w[:, None], closest)
    # edge ac
    region = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    w = d2 / safe(d2 - d6)
    closest = np.where(region[:, None], a + ac * w[:, None], closest)
    # vertex c
    region = (d6 >= 0) & (d5 <= d6)
    closest = np.where(region[:, None], c, closest)
    # edge ab
    region = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    v = d1 / safe(d1 - d3)
    closest = np.where(region[:, None], a + ab * v[:, None], closest)
    # vertex b
    region = (d3 >= 0) & (d4 <= d3)
    closest = np.where(region[:, None], b, closest)
    # vertex a
    region = (d1 <= 0) & (d2 <= 0)
    closest = np.where(region[:, None], a, closest)
    return np.linalg.norm(points - closest, axis=1)


def distances_to_mesh(points: np.ndarray, mesh: TriangleMesh, max_distance: float) -> np.ndarray:
    """
    Point-to-surface distances, exact up to ``max_distance``.

    Candidate triangles come from a KD-tree over triangle centroids; points with
    no triangle within ``max_distance`` get ``inf``.
    """
    a, b, c = mesh.corners
    centroids = (a + b + c) / 3.0
    radius = np.max(np.linalg.norm(np.stack([a, b, c], axis=1) - centroids[:, None], axis=-1))
    tree = KDTree(centroids)
    candidates = tree.query_radius(points, r=max_distance + radius)

    counts = np.array([len(cands) for cands in candidates])
    result = np.full(len(points), np.inf)
    if counts.sum() == 0:
        return result
    point_idx = np.repeat(np.arange(len(points)), counts)
    tri_idx = np.concatenate(candidates).astype(np.int64)
    for start in range(0, len(point_idx), DISTANCE_BATCH):
        p = point_idx[start:start + DISTANCE_BATCH]
        t = tri_idx[start:start + DISTANCE_BATCH]
        d = point_triangle_distance(points[p], a[t], b[t], c[t])
        np.minimum.at(result, p, d)
    return result


def mesh_prf(predicted: TriangleMesh, reference: TriangleMesh, threshold: float = 0.01,
             samples: int = 100_000, seed: int = 0) -> Tuple[float, float, float]:
    """
    Precision, recall and F1 (percent) of a predicted surface against a reference.

    Args:
        predicted: Reconstructed mesh
        reference: Ground-truth mesh
        threshold: Distance threshold in meters
        samples: Points sampled per mesh
        seed: Sampler seed

    Returns:
        (precision %, recall %, f1 %)
    """
    if len(predicted) == 0 or len(reference) == 0:
        raise ValueError("mesh_prf needs two nonempty meshes")
    rng = np.random.default_rng(seed)
    predicted_points = predicted.sample_points(samples, rng)
    reference_points = reference.sample_points(samples, rng)
    precision = 100.0 * float(np.mean(distances_to_mesh(predicted_points, reference, threshold) <= threshold))
    recall = 100.0 * float(np.mean(distances_to_mesh(reference_points, predicted, threshold) <= threshold))
    f1 = 0.0 if precision + recall == 0 else 2.0 * precision * recall / (precision + recall)
    logger.debug(f"mesh prf: precision={precision:.2f} recall={recall:.2f} f1={f1:.2f}")
    return precision, recall, f1
