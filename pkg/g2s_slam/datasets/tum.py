"""
Reader for sequences in the TUM RGB-D directory layout::

    root/
      rgb/       8-bit color PNGs
      depth/     16-bit depth PNGs (5000 units per meter)
      rgb.txt    "timestamp path" per line
      depth.txt  "timestamp path" per line
      groundtruth.txt   optional, "timestamp tx ty tz qx qy qz qw"
      camera.txt        optional, "fx fy cx cy width height [depth_scale]"
      reference_mesh.ply  optional surface for mesh metrics
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

from ..errors import DatasetError
from ..evaluation.mesh import TriangleMesh
from ..geometry import Frame, Intrinsics
from ..io_utils import read_color, read_depth
from ..logging_utils import log_with_emoji
from ..trajectory import Trajectory, associate_timestamps, read_table
from .base import FrameSequence

logger = logging.getLogger(__name__)

# Freiburg default camera
DEFAULT_INTRINSICS = Intrinsics(525.0, 525.0, 319.5, 239.5, 640, 480, 5000.0)

ASSOCIATION_TOLERANCE = 0.02


@dataclass(frozen=True)
class DatasetDescriptor:
    kind: str = 'tum'
    root: Optional[Path] = None
    association_tolerance: float = ASSOCIATION_TOLERANCE
    intrinsics: Optional[Intrinsics] = None

    def __post_init__(self):
        if self.kind not in ('tum', 'synthetic'):
            raise DatasetError(f"unknown dataset kind '{self.kind}'")
        if self.association_tolerance <= 0:
            raise DatasetError(f"association tolerance must be positive, got {self.association_tolerance}")
        if self.kind == 'tum' and (self.root is None or not Path(self.root).is_dir()):
            raise DatasetError(f"dataset root {self.root} does not exist")


def read_camera_file(path: Union[str, Path]) -> Intrinsics:
    rows = read_table(path, 6)
    if not rows:
        raise DatasetError(f"empty camera file {path}")
    line_number, fields = rows[0]
    try:
        fx, fy, cx, cy = (float(v) for v in fields[:4])
        width, height = int(fields[4]), int(fields[5])
        depth_scale = float(fields[6]) if len(fields) > 6 else 5000.0
        return Intrinsics(fx, fy, cx, cy, width, height, depth_scale)
    except ValueError as e:
        raise DatasetError(f"bad camera parameters in {path}: {e}", line_number=line_number) from e


def write_camera_file(path: Union[str, Path], intrinsics: Intrinsics) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("# fx fy cx cy width height depth_scale\n"
                    f"{intrinsics.fx!r} {intrinsics.fy!r} {intrinsics.cx!r} {intrinsics.cy!r} "
                    f"{intrinsics.width} {intrinsics.height} {intrinsics.depth_scale!r}\n", encoding='utf-8')
    return path


def _read_index(path: Path) -> List[Tuple[float, str]]:
    entries = []
    for line_number, fields in read_table(path, 2):
        try:
            entries.append((float(fields[0]), fields[1]))
        except ValueError as e:
            raise DatasetError(f"bad timestamp in {path.name}: {fields[0]}", line_number=line_number) from e
    return entries


class TumSequence(FrameSequence):
    """
    Associated rgb/depth pairs of one TUM-layout directory.

    Pairs are matched one-to-one by nearest timestamp within the descriptor's
    tolerance; entries without a partner are skipped.
    """

    def __init__(self, descriptor: DatasetDescriptor):
        self.descriptor = descriptor
        self.root = Path(descriptor.root)
        self.name = self.root.name
        rgb_entries = _read_index(self.root / 'rgb.txt')
        depth_entries = _read_index(self.root / 'depth.txt')

        pairs = associate_timestamps([t for t, _ in rgb_entries], [t for t, _ in depth_entries],
                                     descriptor.association_tolerance)
        self.entries = [(rgb_entries[i][0], rgb_entries[i][1], depth_entries[j][1]) for i, j in pairs]
        skipped = len(rgb_entries) + len(depth_entries) - 2 * len(pairs)
        log_with_emoji("📂", f"Opened {self.name}",
                       f"{len(self.entries)} rgb/depth pairs, {skipped} unmatched entries skipped")

        camera_file = self.root / 'camera.txt'
        if descriptor.intrinsics is not None:
            self.intrinsics = descriptor.intrinsics
        elif camera_file.is_file():
            self.intrinsics = read_camera_file(camera_file)
        else:
            self.intrinsics = DEFAULT_INTRINSICS

        gt_file = self.root / 'groundtruth.txt'
        self.ground_truth = Trajectory.load(gt_file) if gt_file.is_file() else None
        mesh_file = self.root / 'reference_mesh.ply'
        self.reference_mesh = TriangleMesh.load_ply(mesh_file) if mesh_file.is_file() else None

    def __len__(self) -> int:
        return len(self.entries)

    def frame_timestamp(self, index: int) -> float:
        return self.entries[index][0]

    def frame(self, index: int) -> Frame:
        timestamp, rgb_path, depth_path = self.entries[index]
        try:
            color = read_color(self.root / rgb_path)
            depth = read_depth(self.root / depth_path, self.intrinsics.depth_scale)
        except DatasetError as e:
            raise DatasetError(str(e), frame_index=index) from e
        expected = (self.intrinsics.height, self.intrinsics.width)
        if depth.shape != expected or color.shape[:2] != expected:
            raise DatasetError(f"image size {depth.shape} does not match the camera {expected}", frame_index=index)
        return Frame(color, depth, self.intrinsics, index, timestamp)


def read_tum_sequence(descriptor: DatasetDescriptor) -> Tuple[TumSequence, Optional[Trajectory]]:
    """
    Open a TUM-layout directory.

    Args:
        descriptor: Root, association tolerance and optional intrinsics override

    Returns:
        (frame sequence, ground-truth trajectory or None)
    """
    sequence = TumSequence(descriptor)
    return sequence, sequence.ground_truth
