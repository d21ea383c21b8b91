"""
Frame sources: TUM-layout directories and generated synthetic rooms.
"""

from pathlib import Path
from typing import Optional, Union

from ..errors import DatasetError
from ..geometry import Intrinsics
from .base import FrameSequence
from .synthetic import (SyntheticScene, SyntheticSequence, generate_synthetic, render_view,
                        write_tum_layout)
from .tum import (DEFAULT_INTRINSICS, DatasetDescriptor, TumSequence, read_camera_file, read_tum_sequence,
                  write_camera_file)

SYNTHETIC_KEYWORD = 'synthetic'


def open_dataset(spec: Union[str, Path], association_tolerance: float = 0.02,
                 intrinsics: Optional[Intrinsics] = None) -> FrameSequence:
    """
    Open a frame source from a CLI-style argument.

    Args:
        spec: A TUM-layout directory, a synthetic scene ``.json`` file, or the
            word ``synthetic`` for the default room
        association_tolerance: rgb/depth timestamp tolerance for TUM directories
        intrinsics: Camera override for TUM directories

    Returns:
        The frame sequence
    """
    if str(spec) == SYNTHETIC_KEYWORD:
        return generate_synthetic(SyntheticScene())
    path = Path(spec)
    if path.is_dir():
        return TumSequence(DatasetDescriptor('tum', path, association_tolerance, intrinsics))
    if path.suffix == '.json' and path.is_file():
        return generate_synthetic(SyntheticScene.load(path))
    raise DatasetError(f"dataset '{spec}' is neither a directory, a scene file nor '{SYNTHETIC_KEYWORD}'")


__all__ = [
    'FrameSequence', 'SyntheticScene', 'SyntheticSequence', 'generate_synthetic', 'render_view',
    'write_tum_layout', 'DEFAULT_INTRINSICS', 'DatasetDescriptor', 'TumSequence', 'read_camera_file',
    'read_tum_sequence', 'write_camera_file', 'open_dataset',
]
