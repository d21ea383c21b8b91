"""
RGB-D SLAM with surface-aligned 2D Gaussian disks: plane-prior GICP tracking,
a differentiable splat renderer and geometry-aware map optimization.
"""

from .config import SlamConfig, load_config
from .errors import G2SError
from .gaussian_map import GaussianDisk, GaussianMap
from .geometry import Frame, Intrinsics, Pose
from .pipeline import PipelineResult, process_frame, run, run_ablation
from .trajectory import Trajectory

__version__ = '0.1.0'

__all__ = [
    'SlamConfig', 'load_config', 'G2SError', 'GaussianDisk', 'GaussianMap', 'Frame', 'Intrinsics', 'Pose',
    'PipelineResult', 'process_frame', 'run', 'run_ablation', 'Trajectory',
]
