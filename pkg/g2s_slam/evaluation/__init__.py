from .mesh import TriangleMesh, distances_to_mesh, mesh_prf, point_triangle_distance
from .metrics import (align_trajectories, ate_rmse, depth_error_map, depth_l1, depth_mask, evaluate_keyframes,
                      psnr, rigid_alignment, ssim)
from .tsdf import (TsdfVolume, bounds_from_frames, extract_mesh, integrate_frames, render_tsdf_over_trajectory,
                   tsdf_integrate)

__all__ = [
    'TriangleMesh', 'distances_to_mesh', 'mesh_prf', 'point_triangle_distance',
    'align_trajectories', 'ate_rmse', 'depth_error_map', 'depth_l1', 'depth_mask', 'evaluate_keyframes',
    'psnr', 'rigid_alignment', 'ssim',
    'TsdfVolume', 'bounds_from_frames', 'extract_mesh', 'integrate_frames', 'render_tsdf_over_trajectory',
    'tsdf_integrate',
]
