"""
Tests for the g2s-slam command line: exit codes, run directories and the synth → run → eval chain.
"""

import numpy as np
import pandas as pd
import pytest

from conftest import single_disk
from g2s_slam.datasets import write_camera_file
from g2s_slam.gaussian_map import GaussianMap
from g2s_slam.geometry import Intrinsics
from g2s_slam.io_utils import read_color, read_depth, read_json, write_depth
from g2s_slam.main import SUMMARY_KEYS, cli
from g2s_slam.trajectory import Trajectory

FAST_CONFIG = """\
mapping.iters_per_keyframe = 1
mapping.final_iters = 2
keyframes.mapping_interval = 2
eval.voxel_size = 0.05
eval.truncation = 0.2
eval.mesh_samples = 2000
"""

IDENTITY_POSE = ['0', '0', '0', '0', '0', '0', '1']


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    monkeypatch.delenv('G2S_THREADS', raising=False)
    monkeypatch.delenv('G2S_DETERMINISTIC', raising=False)


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / 'fast.cfg'
    path.write_text(FAST_CONFIG)
    return path


@pytest.fixture
def room(tmp_path):
    out = tmp_path / 'room'
    assert cli(['synth', '--out', str(out), '--frames', '3', '--width', '32']) == 0
    return out


@pytest.fixture
def saved_map(tmp_path):
    path = tmp_path / 'map' / 'map.ply'
    single_disk(GaussianMap()).save_ply(path)
    camera = write_camera_file(tmp_path / 'map' / 'camera.txt', Intrinsics(100.0, 100.0, 50.0, 50.0, 100, 100))
    return path, camera


class TestUsage:
    def test_missing_subcommand(self):
        with pytest.raises(SystemExit) as info:
            cli([])
        assert info.value.code == 1

    def test_missing_required_flag(self):
        with pytest.raises(SystemExit) as info:
            cli(['run', '--out', 'somewhere'])
        assert info.value.code == 1

    def test_missing_config_file(self, tmp_path, capsys):
        assert cli(['run', '--dataset', 'synthetic', '--config', str(tmp_path / 'nope.cfg'),
                    '--out', str(tmp_path / 'run')]) == 1
        assert "config file not found" in capsys.readouterr().err

    def test_unknown_dataset_is_a_runtime_error(self, tmp_path, capsys):
        assert cli(['run', '--dataset', str(tmp_path / 'nothing'), '--out', str(tmp_path / 'run')]) == 2
        assert "g2s-slam run:" in capsys.readouterr().err

    def test_mesh_needs_a_run_directory(self, tmp_path):
        assert cli(['mesh', '--run-dir', str(tmp_path)]) == 2


class TestSynth:
    def test_layout(self, room):
        for name in ('rgb.txt', 'depth.txt', 'camera.txt', 'groundtruth.txt', 'reference_mesh.ply', 'scene.json'):
            assert (room / name).is_file()
        assert len(list((room / 'rgb').glob('*.png'))) == 3
        assert len(Trajectory.load(room / 'groundtruth.txt')) == 3

    def test_output_is_reproducible(self, tmp_path, room):
        again = tmp_path / 'again'
        assert cli(['synth', '--out', str(again), '--frames', '3', '--width', '32']) == 0
        for name in ('groundtruth.txt', 'rgb.txt', 'camera.txt', 'scene.json'):
            assert (room / name).read_bytes() == (again / name).read_bytes()
        for png in (room / 'depth').glob('*.png'):
            assert png.read_bytes() == (again / 'depth' / png.name).read_bytes()


class TestRender:
    def test_renders_color_depth_and_normals(self, tmp_path, saved_map):
        map_path, camera = saved_map
        out = tmp_path / 'view'
        assert cli(['render', '--map', str(map_path), '--camera', str(camera), '--pose', *IDENTITY_POSE,
                    '--out', str(out)]) == 0
        color = read_color(out / 'color.png')
        depth = read_depth(out / 'depth.png')
        np.testing.assert_allclose(color[50, 50], [1.0, 0.0, 0.0])
        assert depth[50, 50] == pytest.approx(2.0, abs=1e-3)
        assert depth[0, 0] == 0.0
        assert (out / 'normal.png').is_file()

    def test_depth_error_image(self, tmp_path, saved_map):
        map_path, camera = saved_map
        gt = write_depth(tmp_path / 'gt.png', np.full((100, 100), 2.1))
        out = tmp_path / 'view'
        assert cli(['render', '--map', str(map_path), '--camera', str(camera), '--pose', *IDENTITY_POSE,
                    '--gt-depth', str(gt), '--out', str(out)]) == 0
        errors = read_depth(out / 'depth_error.png')
        assert errors[50, 50] == pytest.approx(0.1, abs=1e-3)
        assert errors[0, 0] == 0.0

    def test_zero_quaternion_is_a_usage_error(self, tmp_path, saved_map):
        map_path, camera = saved_map
        assert cli(['render', '--map', str(map_path), '--camera', str(camera),
                    '--pose', '0', '0', '0', '0', '0', '0', '0', '--out', str(tmp_path / 'view')]) == 1

    def test_missing_map(self, tmp_path):
        assert cli(['render', '--map', str(tmp_path / 'none.ply'), '--pose', *IDENTITY_POSE,
                    '--out', str(tmp_path / 'view')]) == 2


class TestRunAndEval:
    def test_run_directory(self, tmp_path, room, config_file):
        run_dir = tmp_path / 'run'
        assert cli(['run', '--dataset', str(room), '--config', str(config_file), '--out', str(run_dir)]) == 0
        for name in ('trajectory.txt', 'metrics.json', 'map.ply', 'loss_trace.csv', 'config.txt', 'camera.txt',
                     'keyframes.txt', 'keyframes.csv'):
            assert (run_dir / name).is_file()
        assert len(Trajectory.load(run_dir / 'trajectory.txt')) == 3
        metrics = read_json(run_dir / 'metrics.json')
        assert list(metrics) == list(SUMMARY_KEYS)
        assert metrics['ate_rmse_cm'] is not None
        trace = pd.read_csv(run_dir / 'loss_trace.csv')
        assert list(trace.columns) == ['iteration', 'total', 'photometric', 'depth', 'gan', 'disk_count']

        assert cli(['eval', '--run-dir', str(run_dir), '--gt', str(room)]) == 0
        evaluated = read_json(run_dir / 'metrics.json')
        assert evaluated['ate_rmse_cm'] == pytest.approx(metrics['ate_rmse_cm'], abs=1e-3)
        assert evaluated['psnr_db'] is not None
        assert (run_dir / 'mesh.ply').is_file()

    def test_deterministic_runs_are_byte_identical(self, tmp_path, room, config_file, monkeypatch):
        monkeypatch.setenv('G2S_DETERMINISTIC', '1')
        outputs = []
        for name in ('first', 'second'):
            run_dir = tmp_path / name
            assert cli(['run', '--dataset', str(room), '--config', str(config_file), '--out', str(run_dir)]) == 0
            outputs.append(run_dir)
        for name in ('trajectory.txt', 'metrics.json'):
            assert (outputs[0] / name).read_bytes() == (outputs[1] / name).read_bytes()
        assert read_json(outputs[0] / 'metrics.json')['fps'] is None

    def test_tracking_only_run(self, tmp_path, room):
        run_dir = tmp_path / 'run'
        assert cli(['run', '--dataset', str(room), '--no-optimize', '--max-frames', '2', '--out', str(run_dir)]) == 0
        assert len(Trajectory.load(run_dir / 'trajectory.txt')) == 2
        assert pd.read_csv(run_dir / 'loss_trace.csv').empty

    def test_ablation_table(self, tmp_path, room, config_file):
        assert cli(['ablate', '--dataset', str(room), '--config', str(config_file), '--max-frames', '1',
                    '--out', str(tmp_path / 'ablation')]) == 0
        table = pd.read_csv(tmp_path / 'ablation' / 'ablation.csv')
        assert table['variant'].tolist() == ['baseline', '+2d_disk', '+geometry_aware_optimization', 'full']


@pytest.mark.slow
def test_synth_run_mesh_eval_chain(tmp_path):
    room = tmp_path / 'room'
    run_dir = tmp_path / 'run'
    config = tmp_path / 'slam.cfg'
    config.write_text("mapping.final_iters = 50\neval.voxel_size = 0.04\neval.truncation = 0.16\n"
                      "eval.mesh_samples = 20000\n")
    assert cli(['synth', '--out', str(room), '--frames', '30', '--width', '80']) == 0
    assert cli(['run', '--dataset', str(room), '--config', str(config), '--out', str(run_dir)]) == 0
    assert cli(['mesh', '--run-dir', str(run_dir), '--voxel', '0.04', '--from-sensor', '--dataset', str(room)]) == 0
    assert cli(['eval', '--run-dir', str(run_dir), '--gt', str(room)]) == 0
    metrics = read_json(run_dir / 'metrics.json')
    assert metrics['ate_rmse_cm'] < 5.0
    assert metrics['precision_pct'] is not None
    assert metrics['f1_pct'] > 0.0
