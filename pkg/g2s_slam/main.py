"""
Command-line entry point.

    g2s-slam synth --out data/room
    g2s-slam run --dataset data/room --out runs/room
    g2s-slam mesh --run-dir runs/room
    g2s-slam eval --run-dir runs/room --gt data/room
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .config import SlamConfig, load_config
from .datasets import (DEFAULT_INTRINSICS, FrameSequence, SyntheticScene, generate_synthetic, open_dataset,
                       read_camera_file, write_camera_file, write_tum_layout)
from .errors import ConfigError, DatasetError, G2SError, TrackingLostError
from .evaluation import (TriangleMesh, TsdfVolume, align_trajectories, ate_rmse, bounds_from_frames,
                         depth_error_map, depth_mask, evaluate_keyframes, extract_mesh, integrate_frames,
                         mesh_prf, render_tsdf_over_trajectory)
from .gaussian_map import GaussianMap
from .geometry import Pose
from .io_utils import read_depth, read_json, write_color, write_depth, write_json, write_normal
from .logging_utils import configure_logger_with_line_numbers, log_with_emoji
from .optimizer import write_loss_trace
from .pipeline import SUMMARY_KEYS, PipelineResult, run, run_ablation
from .renderer import Rasterizer
from .trajectory import Trajectory, associate_timestamps, read_table

logger = logging.getLogger(__name__)

# Run directory layout
TRAJECTORY_FILE = 'trajectory.txt'
METRICS_FILE = 'metrics.json'
MAP_FILE = 'map.ply'
LOSS_TRACE_FILE = 'loss_trace.csv'
CONFIG_FILE = 'config.txt'
CAMERA_FILE = 'camera.txt'
KEYFRAMES_FILE = 'keyframes.txt'
KEYFRAME_SCORES_FILE = 'keyframes.csv'
MESH_FILE = 'mesh.ply'
ABLATION_FILE = 'ablation.csv'

MESH_MARGIN = 0.1


class CliArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Run directory IO
# ---------------------------------------------------------------------------

def write_metrics(path: Path, summary: Dict[str, Optional[float]]) -> Path:
    return write_json(path, {key: summary.get(key) for key in SUMMARY_KEYS})


def write_run_dir(out_dir: Path, result: PipelineResult, config: SlamConfig, dataset: FrameSequence) -> Path:
    """Persist everything ``mesh`` and ``eval`` need to work from the run directory alone."""
    out_dir.mkdir(parents=True, exist_ok=True)
    result.trajectory.save(out_dir / TRAJECTORY_FILE)
    result.gmap.save_ply(out_dir / MAP_FILE)
    write_loss_trace(result.loss_trace, out_dir / LOSS_TRACE_FILE)
    (out_dir / CONFIG_FILE).write_text(config.to_text(), encoding='utf-8')
    write_camera_file(out_dir / CAMERA_FILE, dataset.intrinsics)
    lines = ["# index timestamp"]
    lines += [f"{index} {frame.timestamp:.6f}" for index, frame in sorted(result.keyframes.items())]
    (out_dir / KEYFRAMES_FILE).write_text("\n".join(lines) + "\n", encoding='utf-8')
    if result.keyframe_table is not None:
        result.keyframe_table.to_csv(out_dir / KEYFRAME_SCORES_FILE, index=False, float_format='%.6f')
    write_metrics(out_dir / METRICS_FILE, result.summary)
    return out_dir


def read_keyframe_indices(run_dir: Path) -> List[int]:
    path = run_dir / KEYFRAMES_FILE
    if not path.is_file():
        return []
    return [int(fields[0]) for _, fields in read_table(path, 2)]


def _run_config(run_dir: Path, override: Optional[str]) -> SlamConfig:
    if override:
        return load_config(override)
    stored = run_dir / CONFIG_FILE
    return load_config(stored if stored.is_file() else None)


def _require_run_dir(run_dir: Path):
    for name in (TRAJECTORY_FILE, MAP_FILE):
        if not (run_dir / name).is_file():
            raise DatasetError(f"{run_dir} is not a run directory (missing {name})")


def build_mesh(gmap: GaussianMap, trajectory: Trajectory, intrinsics, config: SlamConfig, voxel: float,
               truncation: float, sensor: Optional[FrameSequence] = None) -> TriangleMesh:
    """
    TSDF mesh of a run, fused from rendered views (default) or from sensor frames.

    Sensor frames are paired with trajectory poses by timestamp.
    """
    rasterizer = Rasterizer.from_config(config)
    threads = config.runtime.threads
    if sensor is None:
        lo = gmap.centers.min(axis=0) - MESH_MARGIN
        hi = gmap.centers.max(axis=0) + MESH_MARGIN
        volume = TsdfVolume.create(lo, hi, voxel, truncation)
        render_tsdf_over_trajectory(gmap, trajectory, intrinsics, volume, rasterizer, threads=threads)
    else:
        stamps = [sensor.frame_timestamp(i) for i in range(len(sensor))]
        pairs = associate_timestamps(stamps, trajectory.timestamps, config.eval.association_tolerance)
        frames = [sensor.frame(i) for i, _ in pairs]
        poses = [trajectory.poses[j] for _, j in pairs]
        lo, hi = bounds_from_frames([f.depth for f in frames], poses, sensor.intrinsics, MESH_MARGIN)
        volume = TsdfVolume.create(lo, hi, voxel, truncation)
        integrate_frames(volume, frames, poses, threads)
    return extract_mesh(volume)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_run(args) -> int:
    config = load_config(args.config)
    dataset = open_dataset(args.dataset, config.eval.association_tolerance)
    out_dir = Path(args.out)
    try:
        result = run(dataset, config, args.max_frames, optimize=not args.no_optimize)
    except TrackingLostError as e:
        partial = getattr(e, 'partial', None)
        if partial is not None:
            partial.trajectory.save(out_dir / TRAJECTORY_FILE)
            print(f"💾 Partial trajectory ({len(partial.trajectory)} poses) saved to {out_dir / TRAJECTORY_FILE}")
        raise
    write_run_dir(out_dir, result, config, dataset)
    print(f"✅ Run written to {out_dir}")
    for key, value in result.summary.items():
        if value is not None:
            print(f"   {key}: {value:.4f}")
    return 0


def _parse_pose(values: List[float]) -> Pose:
    tx, ty, tz, qx, qy, qz, qw = values
    quat = np.array([qx, qy, qz, qw])
    if np.linalg.norm(quat) < 1e-12:
        raise ConfigError("pose quaternion must be nonzero")
    return Pose.from_quaternion(quat, [tx, ty, tz])


def cmd_render(args) -> int:
    config = load_config(args.config)
    if not Path(args.map).is_file():
        raise DatasetError(f"map file not found: {args.map}")
    gmap = GaussianMap.load_ply(args.map)
    intrinsics = read_camera_file(args.camera) if args.camera else DEFAULT_INTRINSICS
    pose = _parse_pose(args.pose)
    output = Rasterizer.from_config(config).render(gmap.snapshot(), pose, intrinsics, keep_cache=False)
    out_dir = Path(args.out)
    write_color(out_dir / 'color.png', output.color)
    write_depth(out_dir / 'depth.png', output.depth, intrinsics.depth_scale)
    write_normal(out_dir / 'normal.png', output.normal)
    if args.gt_depth:
        gt_depth = read_depth(args.gt_depth, intrinsics.depth_scale)
        if gt_depth.shape != output.depth.shape:
            raise DatasetError(f"ground-truth depth {gt_depth.shape} does not match the camera {output.depth.shape}")
        errors = depth_error_map(output.depth, gt_depth, depth_mask(output.alpha, gt_depth))
        write_depth(out_dir / 'depth_error.png', errors, intrinsics.depth_scale)
    print(f"🖼️ Rendered {len(gmap)} disks to {out_dir}")
    return 0


def cmd_mesh(args) -> int:
    run_dir = Path(args.run_dir)
    _require_run_dir(run_dir)
    config = _run_config(run_dir, args.config)
    truncation = args.truncation if args.truncation is not None else 4.0 * args.voxel
    gmap = GaussianMap.load_ply(run_dir / MAP_FILE)
    trajectory = Trajectory.load(run_dir / TRAJECTORY_FILE)
    intrinsics = read_camera_file(run_dir / CAMERA_FILE)
    sensor = None
    if args.from_sensor:
        if not args.dataset:
            raise ConfigError("--from-sensor needs --dataset")
        sensor = open_dataset(args.dataset, config.eval.association_tolerance)
    mesh = build_mesh(gmap, trajectory, intrinsics, config, args.voxel, truncation, sensor)
    out = Path(args.out) if args.out else run_dir / MESH_FILE
    mesh.save_ply(out)
    print(f"🧊 Mesh with {len(mesh)} triangles written to {out}")
    return 0


def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    _require_run_dir(run_dir)
    config = _run_config(run_dir, args.config)
    dataset = open_dataset(args.gt, config.eval.association_tolerance)
    trajectory = Trajectory.load(run_dir / TRAJECTORY_FILE)
    gmap = GaussianMap.load_ply(run_dir / MAP_FILE)

    previous = read_json(run_dir / METRICS_FILE) if (run_dir / METRICS_FILE).is_file() else {}
    summary: Dict[str, Optional[float]] = {key: None for key in SUMMARY_KEYS}
    summary['fps'] = previous.get('fps')
    summary['disk_count'] = len(gmap)

    alignment = None
    if dataset.ground_truth is not None and len(trajectory) >= 2:
        tolerance = config.eval.association_tolerance
        summary['ate_rmse_cm'] = 100.0 * ate_rmse(trajectory, dataset.ground_truth, tolerance)
        alignment = align_trajectories(trajectory, dataset.ground_truth, tolerance)

    keyframes = [k for k in read_keyframe_indices(run_dir) if k < len(dataset)]
    if keyframes and len(gmap):
        frames = {k: dataset.frame(k) for k in keyframes}
        table, means = evaluate_keyframes(gmap, trajectory, frames, keyframes, Rasterizer.from_config(config),
                                          config.eval.association_tolerance)
        table.to_csv(run_dir / KEYFRAME_SCORES_FILE, index=False, float_format='%.6f')
        for key in ('depth_l1_cm', 'psnr_db', 'ssim'):
            summary[key] = None if np.isnan(means[key]) else means[key]

    if dataset.reference_mesh is not None and alignment is not None:
        mesh_path = Path(args.mesh) if args.mesh else run_dir / MESH_FILE
        if mesh_path.is_file():
            mesh = TriangleMesh.load_ply(mesh_path)
        else:
            mesh = build_mesh(gmap, trajectory, read_camera_file(run_dir / CAMERA_FILE), config,
                              config.eval.voxel_size, config.eval.truncation)
            mesh.save_ply(mesh_path)
        if len(mesh):
            precision, recall, f1 = mesh_prf(mesh.transformed(alignment), dataset.reference_mesh,
                                             config.eval.prf_threshold, config.eval.mesh_samples, config.eval.seed)
            summary.update(precision_pct=precision, recall_pct=recall, f1_pct=f1)
        else:
            log_with_emoji("⚠️", "Mesh is empty; precision/recall left unset")

    write_metrics(run_dir / METRICS_FILE, summary)
    print(f"📊 Metrics written to {run_dir / METRICS_FILE}")
    for key, value in summary.items():
        if value is not None:
            print(f"   {key}: {value:.4f}")
    return 0


def cmd_synth(args) -> int:
    scene = SyntheticScene.load(args.spec) if args.spec else SyntheticScene()
    updates = {}
    if args.frames is not None:
        updates['frame_count'] = args.frames
    if updates:
        scene = SyntheticScene.model_validate({**scene.model_dump(), **updates})
    if args.width is not None:
        scene = scene.resized(args.width)
    out_dir = write_tum_layout(generate_synthetic(scene), args.out)
    print(f"🏠 Synthetic sequence ({scene.frame_count} frames, {scene.width}x{scene.height}) written to {out_dir}")
    return 0


def cmd_ablate(args) -> int:
    config = load_config(args.config)
    dataset = open_dataset(args.dataset, config.eval.association_tolerance)
    table = run_ablation(dataset, config, max_frames=args.max_frames)
    out = Path(args.out) / ABLATION_FILE
    out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out, index=False, float_format='%.6f')
    print(f"🧪 Ablation table written to {out}")
    print(table.to_string(index=False))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = CliArgumentParser(prog='g2s-slam', description="Surface-aligned Gaussian splatting RGB-D SLAM")
    parser.add_argument('-v', '--verbose', action='store_true', help="Debug logging (per-iteration records)")
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('run', help="Run SLAM on a dataset")
    p.add_argument('--dataset', required=True, help="TUM directory, scene .json, or 'synthetic'")
    p.add_argument('--config', help="Config file (section.key = value)")
    p.add_argument('--out', required=True, help="Run directory")
    p.add_argument('--max-frames', type=int, default=None)
    p.add_argument('--no-optimize', action='store_true', help="Tracking and seeding only")
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser('render', help="Render one view of a saved map")
    p.add_argument('--map', required=True)
    p.add_argument('--pose', required=True, nargs=7, type=float, metavar=('TX', 'TY', 'TZ', 'QX', 'QY', 'QZ', 'QW'))
    p.add_argument('--camera', help="camera.txt with fx fy cx cy width height [depth_scale]")
    p.add_argument('--config')
    p.add_argument('--gt-depth', help="Sensor depth PNG; writes depth_error.png")
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_render)

    p = sub.add_parser('mesh', help="TSDF-fuse a run into a mesh")
    p.add_argument('--run-dir', required=True)
    p.add_argument('--voxel', type=float, default=0.01)
    p.add_argument('--truncation', type=float, default=None, help="Defaults to 4 voxels")
    p.add_argument('--from-sensor', action='store_true', help="Fuse sensor frames instead of rendered views")
    p.add_argument('--dataset', help="Dataset for --from-sensor")
    p.add_argument('--config')
    p.add_argument('--out')
    p.set_defaults(handler=cmd_mesh)

    p = sub.add_parser('eval', help="Recompute metrics.json of a run")
    p.add_argument('--run-dir', required=True)
    p.add_argument('--gt', required=True, help="Ground-truth dataset")
    p.add_argument('--mesh', help="Mesh to score; defaults to <run-dir>/mesh.ply, built when missing")
    p.add_argument('--config')
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('synth', help="Write a synthetic dataset in TUM layout")
    p.add_argument('--spec', help="Scene .json; defaults to the standard room")
    p.add_argument('--out', required=True)
    p.add_argument('--frames', type=int, default=None)
    p.add_argument('--width', type=int, default=None, help="Resample the camera to this width")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser('ablate', help="Run the module ablation ladder")
    p.add_argument('--dataset', required=True)
    p.add_argument('--config')
    p.add_argument('--out', required=True)
    p.add_argument('--max-frames', type=int, default=None)
    p.set_defaults(handler=cmd_ablate)
    return parser


def cli(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one command and return the process exit status."""
    args = build_parser().parse_args(argv)
    configure_logger_with_line_numbers('g2s_slam', logging.DEBUG if args.verbose else logging.INFO)
    logger.debug(f"command {args.command}: {vars(args)}")
    try:
        return args.handler(args)
    except ConfigError as e:
        print(f"g2s-slam {args.command}: {e}", file=sys.stderr)
        return 1
    except G2SError as e:
        print(f"g2s-slam {args.command}: {e}", file=sys.stderr)
        return 2


if __name__ == '__main__':
    sys.exit(cli())
