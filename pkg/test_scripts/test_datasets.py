"""
Tests for the synthetic room generator, the TUM directory reader and dataset dispatch.
"""

import numpy as np
import pytest

from g2s_slam.datasets import (DEFAULT_INTRINSICS, DatasetDescriptor, SyntheticScene, SyntheticSequence, TumSequence,
                               generate_synthetic, open_dataset, read_camera_file, read_tum_sequence, render_view,
                               write_camera_file, write_tum_layout)
from g2s_slam.datasets.synthetic import FACE_COLORS
from g2s_slam.errors import DatasetError
from g2s_slam.evaluation import ate_rmse
from g2s_slam.geometry import Intrinsics, look_at, normals_from_depth

CUBE = dict(room_min=(-2.0, -2.0, -2.0), room_max=(2.0, 2.0, 2.0), orbit_center=(0.0, 0.0), orbit_radius=0.0,
            orbit_height=0.0, width=33, height=25, fx=20.0, fy=20.0, cx=16.0, cy=12.0)


def write_index(path, stamps, folder):
    path.write_text("# timestamp filename\n" + "".join(f"{t:.6f} {folder}/{t:.6f}.png\n" for t in stamps))


class TestSyntheticRoom:
    def test_center_pixel_sees_the_wall_two_meters_away(self):
        scene = SyntheticScene(**CUBE, look_target=(2.0, 0.0, 0.0))
        _, depth = render_view(scene, scene.pose(0))
        assert depth[12, 16] == 2.0

    def test_every_ray_ends_on_the_box(self):
        scene = SyntheticScene().resized(64)
        for index in (0, 3):
            pose = scene.pose(index)
            _, depth = render_view(scene, pose)
            points = pose.transform(scene.intrinsics.pixel_rays().reshape(-1, 3) * depth.reshape(-1, 1))
            lo, hi = np.asarray(scene.room_min), np.asarray(scene.room_max)
            assert np.all(points >= lo - 1e-9) and np.all(points <= hi + 1e-9)
            gap = np.min(np.minimum(np.abs(points - lo), np.abs(points - hi)), axis=1)
            assert np.max(gap) < 1e-9

    def test_wall_normals(self):
        scene = SyntheticScene(**CUBE, look_target=(2.0, 0.2, 0.0))
        pose = scene.pose(0)
        _, depth = render_view(scene, pose)
        normal_map = normals_from_depth(depth, scene.intrinsics)
        expected = pose.rotation.T @ np.array([-1.0, 0.0, 0.0])
        assert normal_map.valid.sum() == (25 - 2) * (33 - 2)
        np.testing.assert_allclose(normal_map.normals[normal_map.valid], np.tile(expected, (23 * 31, 1)), atol=1e-6)

    def test_flat_texture_uses_face_colors(self):
        scene = SyntheticScene(texture='flat').resized(32)
        color, _ = render_view(scene, scene.pose(0))
        distances = np.min(np.linalg.norm(color.reshape(-1, 1, 3) - FACE_COLORS[None], axis=-1), axis=1)
        assert np.max(distances) < 1e-12

    def test_rendering_is_deterministic(self, tiny_scene):
        first = generate_synthetic(tiny_scene).frame(2)
        second = generate_synthetic(tiny_scene).frame(2)
        np.testing.assert_array_equal(first.color, second.color)
        np.testing.assert_array_equal(first.depth, second.depth)

    def test_sequence_metadata(self, tiny_scene):
        sequence = generate_synthetic(tiny_scene)
        assert len(sequence) == 6
        assert len(list(sequence)) == 6
        assert sequence.frame(5).timestamp == pytest.approx(1.0 + 5 / 30.0)
        assert ate_rmse(sequence.ground_truth, sequence.ground_truth) == pytest.approx(0.0, abs=1e-12)
        assert sequence.reference_mesh.area == pytest.approx(2 * (2.4 * 2.0 + 2.4 * 2.0 + 2.0 * 2.0))
        with pytest.raises(IndexError):
            sequence.frame(6)

    def test_orbit_must_stay_inside(self):
        with pytest.raises(ValueError, match="orbit leaves the room"):
            SyntheticScene(orbit_radius=1.5)
        with pytest.raises(ValueError):
            SyntheticScene(orbit_height=2.5)

    def test_resized_keeps_field_of_view(self):
        scene = SyntheticScene().resized(160)
        assert (scene.width, scene.height) == (160, 120)
        assert scene.fx == pytest.approx(200.0)
        assert scene.cx == pytest.approx(80.0)

    def test_scene_file_round_trip(self, tmp_path, tiny_scene):
        assert SyntheticScene.load(tiny_scene.save(tmp_path / 'scene.json')) == tiny_scene

    def test_bad_scene_files(self, tmp_path):
        with pytest.raises(DatasetError, match="not found"):
            SyntheticScene.load(tmp_path / 'missing.json')
        bad = tmp_path / 'bad.json'
        bad.write_text('{"orbit_radius": 5.0}')
        with pytest.raises(DatasetError, match="invalid scene file"):
            SyntheticScene.load(bad)


class TestTumReader:
    def test_written_layout_reads_back(self, tmp_path, tiny_scene):
        sequence = generate_synthetic(tiny_scene)
        root = write_tum_layout(sequence, tmp_path / 'room')
        for name in ('rgb.txt', 'depth.txt', 'camera.txt', 'groundtruth.txt', 'reference_mesh.ply', 'scene.json'):
            assert (root / name).is_file()

        loaded, ground_truth = read_tum_sequence(DatasetDescriptor('tum', root))
        assert len(loaded) == len(sequence)
        assert loaded.intrinsics == sequence.intrinsics
        original, reread = sequence.frame(3), loaded.frame(3)
        assert reread.timestamp == pytest.approx(original.timestamp, abs=1e-6)
        np.testing.assert_allclose(reread.color, original.color, atol=0.5 / 255 + 1e-12)
        np.testing.assert_allclose(reread.depth, original.depth, atol=0.5 / 5000 + 1e-12)
        np.testing.assert_allclose(ground_truth.positions, sequence.ground_truth.positions, atol=1e-6)
        np.testing.assert_array_equal(loaded.reference_mesh.vertices, sequence.reference_mesh.vertices)

    def test_unmatched_entries_are_skipped(self, tmp_path):
        write_index(tmp_path / 'rgb.txt', [1.0, 2.0, 3.0], 'rgb')
        write_index(tmp_path / 'depth.txt', [1.0, 2.01, 3.5], 'depth')
        sequence = TumSequence(DatasetDescriptor('tum', tmp_path))
        assert len(sequence) == 2
        assert [sequence.frame_timestamp(i) for i in range(2)] == [1.0, 2.0]
        assert sequence.intrinsics == DEFAULT_INTRINSICS
        assert sequence.ground_truth is None
        assert sequence.reference_mesh is None

    def test_missing_depth_index(self, tmp_path):
        write_index(tmp_path / 'rgb.txt', [1.0], 'rgb')
        with pytest.raises(DatasetError, match="missing index file"):
            TumSequence(DatasetDescriptor('tum', tmp_path))

    def test_malformed_index_line(self, tmp_path):
        write_index(tmp_path / 'rgb.txt', [1.0], 'rgb')
        (tmp_path / 'depth.txt').write_text("1.0 depth/1.png\nnot-a-time depth/2.png\n")
        with pytest.raises(DatasetError) as info:
            TumSequence(DatasetDescriptor('tum', tmp_path))
        assert info.value.line_number == 2

    def test_missing_image_names_the_frame(self, tmp_path):
        write_index(tmp_path / 'rgb.txt', [1.0], 'rgb')
        write_index(tmp_path / 'depth.txt', [1.0], 'depth')
        with pytest.raises(DatasetError) as info:
            TumSequence(DatasetDescriptor('tum', tmp_path)).frame(0)
        assert info.value.frame_index == 0

    def test_camera_override_must_match_images(self, tmp_path, tiny_scene):
        root = write_tum_layout(generate_synthetic(tiny_scene), tmp_path / 'room')
        override = Intrinsics(40.0, 40.0, 16.0, 12.0, 32, 24)
        sequence = TumSequence(DatasetDescriptor('tum', root, intrinsics=override))
        assert sequence.intrinsics == override
        with pytest.raises(DatasetError, match="does not match") as info:
            sequence.frame(1)
        assert info.value.frame_index == 1


class TestCameraFile:
    def test_round_trip(self, tmp_path):
        intrinsics = Intrinsics(517.3, 516.5, 318.6, 255.3, 640, 480, 5208.0)
        assert read_camera_file(write_camera_file(tmp_path / 'camera.txt', intrinsics)) == intrinsics

    def test_default_depth_scale(self, tmp_path):
        (tmp_path / 'camera.txt').write_text("100 100 50 40 100 80\n")
        assert read_camera_file(tmp_path / 'camera.txt').depth_scale == 5000.0

    def test_bad_values(self, tmp_path):
        (tmp_path / 'camera.txt').write_text("# fx fy cx cy width height\nfx 100 50 40 100 80\n")
        with pytest.raises(DatasetError) as info:
            read_camera_file(tmp_path / 'camera.txt')
        assert info.value.line_number == 2

    def test_empty_file(self, tmp_path):
        (tmp_path / 'camera.txt').write_text("# nothing here\n")
        with pytest.raises(DatasetError, match="empty camera file"):
            read_camera_file(tmp_path / 'camera.txt')


class TestDispatch:
    def test_descriptor_validation(self, tmp_path):
        with pytest.raises(DatasetError, match="unknown dataset kind"):
            DatasetDescriptor('kinect', tmp_path)
        with pytest.raises(DatasetError, match="tolerance"):
            DatasetDescriptor('tum', tmp_path, association_tolerance=0.0)
        with pytest.raises(DatasetError, match="does not exist"):
            DatasetDescriptor('tum', tmp_path / 'missing')
        assert DatasetDescriptor('synthetic').root is None

    def test_synthetic_keyword(self):
        sequence = open_dataset('synthetic')
        assert isinstance(sequence, SyntheticSequence)
        assert len(sequence) == 50

    def test_scene_file(self, tmp_path, tiny_scene):
        sequence = open_dataset(tiny_scene.save(tmp_path / 'scene.json'))
        assert isinstance(sequence, SyntheticSequence)
        assert sequence.scene == tiny_scene

    def test_directory(self, tmp_path):
        write_index(tmp_path / 'rgb.txt', [1.0], 'rgb')
        write_index(tmp_path / 'depth.txt', [1.0], 'depth')
        assert isinstance(open_dataset(tmp_path), TumSequence)

    def test_unknown_spec(self, tmp_path):
        with pytest.raises(DatasetError):
            open_dataset(tmp_path / 'nothing.txt')
