"""
Synthetic ground-truth scenes: a camera orbiting inside a checkerboard-walled room.

Depth is ray-cast exactly against the room box, the trajectory is known and the
room itself serves as the reference mesh, so every metric has an exact target.
"""

import logging
from pathlib import Path
from typing import List, Literal, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..errors import DatasetError
from ..evaluation.mesh import TriangleMesh
from ..geometry import Frame, Intrinsics, Pose, look_at
from ..io_utils import write_color, write_depth
from ..logging_utils import log_with_emoji
from ..trajectory import Trajectory
from .base import FrameSequence
from .tum import write_camera_file

logger = logging.getLogger(__name__)

# Base albedo per face: -x, +x, -y, +y, floor, ceiling
FACE_COLORS = np.array([
    [0.85, 0.35, 0.30],
    [0.30, 0.70, 0.40],
    [0.30, 0.45, 0.85],
    [0.85, 0.75, 0.30],
    [0.65, 0.65, 0.65],
    [0.75, 0.55, 0.80],
])

CHECKER_DARK = 0.55
CHECKER_CONTRAST = 0.45

PARALLEL_RAY = 1e-15


class SyntheticScene(BaseModel):
    """Room box, wall texture, orbit trajectory and camera of a generated sequence."""
    model_config = ConfigDict(extra='forbid', frozen=True)

    room_min: Tuple[float, float, float] = (-1.2, -1.0, 0.0)
    room_max: Tuple[float, float, float] = (1.2, 1.0, 2.0)
    texture: Literal['checker', 'flat'] = 'checker'
    checker_size: float = Field(0.2, gt=0.0)

    orbit_center: Tuple[float, float] = (0.0, 0.0)
    orbit_height: float = 1.0
    orbit_radius: float = Field(0.15, ge=0.0)
    angular_step_deg: float = 1.5
    look_target: Tuple[float, float, float] = (1.2, 1.0, 0.2)

    width: int = Field(320, ge=8)
    height: int = Field(240, ge=8)
    fx: float = Field(400.0, gt=0.0)
    fy: float = Field(400.0, gt=0.0)
    cx: float = 160.0
    cy: float = 120.0
    depth_scale: float = Field(5000.0, gt=0.0)

    frame_count: int = Field(50, ge=1)
    start_time: float = 1.0
    frame_rate: float = Field(30.0, gt=0.0)

    @model_validator(mode='after')
    def _check_camera_inside(self):
        lo = np.asarray(self.room_min)
        hi = np.asarray(self.room_max)
        if np.any(hi <= lo):
            raise ValueError(f"room_max {self.room_max} must exceed room_min {self.room_min} on every axis")
        cx, cy = self.orbit_center
        r = self.orbit_radius
        if not (lo[0] < cx - r and cx + r < hi[0] and lo[1] < cy - r and cy + r < hi[1]
                and lo[2] < self.orbit_height < hi[2]):
            raise ValueError("camera orbit leaves the room")
        return self

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.depth_scale)

    def resized(self, width: int) -> 'SyntheticScene':
        """Same field of view at a different resolution."""
        factor = width / self.width
        return self.model_copy(update={
            'width': width, 'height': int(round(self.height * factor)),
            'fx': self.fx * factor, 'fy': self.fy * factor, 'cx': self.cx * factor, 'cy': self.cy * factor,
        })

    def pose(self, index: int) -> Pose:
        theta = np.deg2rad(self.angular_step_deg * index)
        eye = np.array([self.orbit_center[0] + self.orbit_radius * np.cos(theta),
                        self.orbit_center[1] + self.orbit_radius * np.sin(theta),
                        self.orbit_height])
        return look_at(eye, np.asarray(self.look_target, dtype=np.float64))

    def timestamp(self, index: int) -> float:
        return self.start_time + index / self.frame_rate

    def reference_mesh(self) -> TriangleMesh:
        return TriangleMesh.from_box(self.room_min, self.room_max)

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'SyntheticScene':
        path = Path(path)
        if not path.is_file():
            raise DatasetError(f"scene file not found: {path}")
        try:
            return cls.model_validate_json(path.read_text(encoding='utf-8'))
        except ValidationError as e:
            raise DatasetError(f"invalid scene file {path}: {e}") from e

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2) + "\n", encoding='utf-8')
        return path


def _wall_color(scene: SyntheticScene, points: np.ndarray, faces: np.ndarray) -> np.ndarray:
    base = FACE_COLORS[faces]
    if scene.texture == 'flat':
        return base
    axis = faces // 2
    # in-plane coordinates of each hit: the two axes other than the face axis
    first = np.where(axis == 0, points[:, 1], points[:, 0])
    second = np.where(axis == 2, points[:, 1], points[:, 2])
    cells = np.floor(first / scene.checker_size) + np.floor(second / scene.checker_size)
    checker = np.mod(cells, 2.0)
    return base * (CHECKER_DARK + CHECKER_CONTRAST * checker)[:, None]


def render_view(scene: SyntheticScene, pose: Pose, intrinsics: Intrinsics = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Ray-cast the room from a camera inside it.

    Args:
        scene: Room and texture
        pose: Camera-to-world pose (must be inside the room)
        intrinsics: Camera model; defaults to the scene camera

    Returns:
        (H×W×3 color in [0, 1], H×W depth in meters)
    """
    intrinsics = intrinsics or scene.intrinsics
    rays = intrinsics.pixel_rays().reshape(-1, 3)
    directions = rays @ pose.rotation.T
    eye = pose.translation
    lo = np.asarray(scene.room_min, dtype=np.float64)
    hi = np.asarray(scene.room_max, dtype=np.float64)

    exit_t = np.full(directions.shape, np.inf)
    positive = directions > PARALLEL_RAY
    negative = directions < -PARALLEL_RAY
    safe = np.where(positive | negative, directions, 1.0)
    exit_t = np.where(positive, (hi - eye) / safe, exit_t)
    exit_t = np.where(negative, (lo - eye) / safe, exit_t)
    axis = np.argmin(exit_t, axis=1)
    rows = np.arange(len(rays))
    # rays have unit camera-frame z, so the ray parameter is the depth
    depth = exit_t[rows, axis]
    faces = 2 * axis + positive[rows, axis].astype(np.int64)
    points = eye + directions * depth[:, None]
    color = _wall_color(scene, points, faces)
    return color.reshape(intrinsics.height, intrinsics.width, 3), depth.reshape(intrinsics.height, intrinsics.width)


class SyntheticSequence(FrameSequence):
    """Frames of a SyntheticScene, generated on demand."""

    def __init__(self, scene: SyntheticScene):
        self.scene = scene
        self.name = 'synthetic'
        self.intrinsics = scene.intrinsics
        self.poses: List[Pose] = [scene.pose(i) for i in range(scene.frame_count)]
        self.ground_truth = Trajectory([scene.timestamp(i) for i in range(scene.frame_count)], list(self.poses))
        self.reference_mesh = scene.reference_mesh()

    def __len__(self) -> int:
        return self.scene.frame_count

    def frame_timestamp(self, index: int) -> float:
        return self.scene.timestamp(index)

    def frame(self, index: int) -> Frame:
        if not 0 <= index < len(self):
            raise IndexError(f"frame {index} out of range for {len(self)} frames")
        color, depth = render_view(self.scene, self.poses[index], self.intrinsics)
        return Frame(color, depth, self.intrinsics, index, self.scene.timestamp(index))


def generate_synthetic(scene: SyntheticScene = None) -> SyntheticSequence:
    """
    Frame stream, ground-truth trajectory and analytic reference mesh of a scene.

    Args:
        scene: Scene description; defaults to the standard room

    Returns:
        SyntheticSequence exposing ``ground_truth`` and ``reference_mesh``
    """
    return SyntheticSequence(scene or SyntheticScene())


def write_tum_layout(sequence: FrameSequence, out_dir: Union[str, Path]) -> Path:
    """
    Materialize a sequence as a TUM-layout directory readable by ``TumSequence``.

    Args:
        sequence: Frames to write (ground truth and reference mesh written when present)
        out_dir: Destination directory

    Returns:
        The destination directory
    """
    out_dir = Path(out_dir)
    rgb_lines = ["# timestamp filename"]
    depth_lines = ["# timestamp filename"]
    for frame in sequence:
        stamp = f"{frame.timestamp:.6f}"
        write_color(out_dir / 'rgb' / f"{stamp}.png", frame.color)
        write_depth(out_dir / 'depth' / f"{stamp}.png", frame.depth, sequence.intrinsics.depth_scale)
        rgb_lines.append(f"{stamp} rgb/{stamp}.png")
        depth_lines.append(f"{stamp} depth/{stamp}.png")
    (out_dir / 'rgb.txt').write_text("\n".join(rgb_lines) + "\n", encoding='utf-8')
    (out_dir / 'depth.txt').write_text("\n".join(depth_lines) + "\n", encoding='utf-8')
    write_camera_file(out_dir / 'camera.txt', sequence.intrinsics)
    if sequence.ground_truth is not None:
        sequence.ground_truth.save(out_dir / 'groundtruth.txt')
    if sequence.reference_mesh is not None:
        sequence.reference_mesh.save_ply(out_dir / 'reference_mesh.ply')
    if isinstance(sequence, SyntheticSequence):
        sequence.scene.save(out_dir / 'scene.json')
    log_with_emoji("💾", f"Wrote {len(sequence)} frames", str(out_dir))
    return out_dir
