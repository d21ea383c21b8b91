"""
Tests for ATE, depth L1, PSNR, SSIM and per-keyframe evaluation.
"""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import single_disk
from g2s_slam.errors import AssociationError, EmptyMaskError
from g2s_slam.evaluation import (align_trajectories, ate_rmse, depth_error_map, depth_l1, depth_mask,
                                 evaluate_keyframes, psnr, rigid_alignment, ssim)
from g2s_slam.gaussian_map import GaussianMap
from g2s_slam.geometry import Frame, Pose
from g2s_slam.renderer import Rasterizer
from g2s_slam.trajectory import Trajectory


def orbit(n: int = 30, seed: int = 0) -> Trajectory:
    rng = np.random.default_rng(seed)
    poses = []
    for i in range(n):
        angle = 0.1 * i
        position = [np.cos(angle), np.sin(angle), 0.2 * np.sin(3 * angle)]
        poses.append(Pose(Rotation.from_euler('z', angle + 0.01 * rng.normal()).as_matrix(), position))
    return Trajectory([float(i) / 30.0 for i in range(n)], poses)


def moved(trajectory: Trajectory, transform: Pose, positions=None) -> Trajectory:
    poses = [transform @ pose for pose in trajectory.poses]
    if positions is not None:
        poses = [Pose(pose.rotation, p) for pose, p in zip(poses, positions)]
    return Trajectory(list(trajectory.timestamps), poses)


def ssim_oracle(a: np.ndarray, b: np.ndarray) -> float:
    """Direct windowed SSIM with a reflected border."""
    offsets = np.arange(-5, 6)
    kernel_1d = np.exp(-offsets ** 2 / (2 * 1.5 ** 2))
    kernel_1d /= kernel_1d.sum()
    kernel = np.outer(kernel_1d, kernel_1d)
    h, w = a.shape[:2]

    def blur(x):
        padded = np.pad(x, ((5, 5), (5, 5)) + ((0, 0),) * (x.ndim - 2), mode='reflect')
        out = np.zeros_like(x)
        for dy in range(11):
            for dx in range(11):
                out += kernel[dy, dx] * padded[dy:dy + h, dx:dx + w]
        return out

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    return float(np.mean((2 * mu_a * mu_b + c1) * (2 * cov + c2) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))))


class TestAte:
    def test_identical_trajectories(self):
        trajectory = orbit()
        assert ate_rmse(trajectory, trajectory) == pytest.approx(0.0, abs=1e-12)

    def test_rigid_transform_invariance(self):
        trajectory = orbit()
        transform = Pose(Rotation.from_euler('xyz', [0.3, -1.2, 2.0]).as_matrix(), [5.0, -3.0, 1.0])
        assert ate_rmse(moved(trajectory, transform), trajectory) < 1e-9

    def test_alignment_recovers_the_transform(self):
        trajectory = orbit()
        transform = Pose(Rotation.from_euler('xyz', [0.1, 0.2, -0.3]).as_matrix(), [1.0, 2.0, 3.0])
        alignment = align_trajectories(moved(trajectory, transform), trajectory)
        np.testing.assert_allclose((alignment @ transform).matrix(), np.eye(4), atol=1e-9)

    def test_noise_matches_direct_alignment_oracle(self):
        rng = np.random.default_rng(1)
        trajectory = orbit(100)
        noisy_positions = trajectory.positions + rng.normal(scale=0.01, size=(100, 3))
        estimated = moved(trajectory, Pose.identity(), noisy_positions)

        rotation, _ = Rotation.align_vectors(trajectory.positions - trajectory.positions.mean(axis=0),
                                             noisy_positions - noisy_positions.mean(axis=0))
        aligned = rotation.apply(noisy_positions - noisy_positions.mean(axis=0)) + trajectory.positions.mean(axis=0)
        expected = np.sqrt(np.mean(np.sum((aligned - trajectory.positions) ** 2, axis=1)))
        value = ate_rmse(estimated, trajectory)
        assert value == pytest.approx(expected, abs=1e-9)
        # sigma·sqrt(3), shrunk a little by the fitted alignment
        assert 0.8 * 0.01 * np.sqrt(3) < value < 1.2 * 0.01 * np.sqrt(3)

    def test_association_tolerates_small_offsets(self):
        trajectory = orbit(10)
        shifted = Trajectory([t + 0.01 for t in trajectory.timestamps], list(trajectory.poses))
        assert ate_rmse(shifted, trajectory) == pytest.approx(0.0, abs=1e-12)

    def test_too_few_associations(self):
        trajectory = orbit(5)
        far = Trajectory([t + 100.0 for t in trajectory.timestamps], list(trajectory.poses))
        with pytest.raises(AssociationError):
            ate_rmse(far, trajectory)

    def test_rigid_alignment_is_proper(self):
        rng = np.random.default_rng(2)
        source = rng.normal(size=(20, 3))
        # a reflected target must still produce a rotation
        alignment = rigid_alignment(source, source * [1.0, 1.0, -1.0])
        assert np.linalg.det(alignment.rotation) == pytest.approx(1.0)


class TestDepthL1:
    def test_identical(self):
        depth = np.full((4, 4), 2.0)
        assert depth_l1(depth, depth, np.ones((4, 4), bool)) == 0.0

    def test_two_centimeter_offset(self):
        depth = np.full((4, 4), 2.0)
        assert depth_l1(depth + 0.02, depth, np.ones((4, 4), bool)) == pytest.approx(2.0)

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(3)
        rendered, gt = rng.uniform(1, 3, (8, 8)), rng.uniform(1, 3, (8, 8))
        mask = rng.random((8, 8)) > 0.5
        assert depth_l1(rendered, gt, mask) == pytest.approx(100.0 * np.abs(rendered - gt)[mask].mean())

    def test_empty_mask(self):
        with pytest.raises(EmptyMaskError):
            depth_l1(np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2), bool))

    def test_mask_needs_coverage_and_valid_depth(self):
        alpha = np.array([[0.2, 0.5], [0.9, 1.0]])
        gt = np.array([[1.0, 1.0], [0.0, 2.0]])
        np.testing.assert_array_equal(depth_mask(alpha, gt), [[False, True], [False, True]])

    def test_error_map_is_zero_outside_mask(self):
        mask = np.array([[True, False]])
        np.testing.assert_allclose(depth_error_map(np.array([[2.1, 5.0]]), np.array([[2.0, 1.0]]), mask),
                                   [[0.1, 0.0]])


class TestImageMetrics:
    def test_psnr_closed_form(self):
        a, b = np.zeros((8, 8, 3)), np.full((8, 8, 3), 0.1)
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)
        assert psnr(b, a) == psnr(a, b)

    def test_psnr_cap(self):
        image = np.random.default_rng(4).random((5, 5, 3))
        assert psnr(image, image) == 100.0

    def test_ssim_identity(self):
        image = np.random.default_rng(5).random((20, 24, 3))
        assert ssim(image, image) == pytest.approx(1.0, abs=1e-12)

    def test_ssim_matches_windowed_oracle(self):
        rng = np.random.default_rng(6)
        a = rng.random((20, 24, 3))
        b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0.0, 1.0)
        assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-6)
        assert ssim(a, b) < 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((4, 4)), np.zeros((4, 5)))


class TestEvaluateKeyframes:
    def test_scores_a_perfect_render(self, small_intrinsics):
        gmap = single_disk(GaussianMap(), opacity=0.9)
        rendered = Rasterizer().render(gmap.snapshot(), Pose.identity(), small_intrinsics)
        frames = {0: Frame(rendered.color, rendered.depth, small_intrinsics, 0, 0.0),
                  3: Frame(rendered.color, rendered.depth, small_intrinsics, 3, 5.0)}
        # keyframe 3 has no trajectory pose within the tolerance
        trajectory = Trajectory([0.0, 1.0], [Pose.identity(), Pose.identity()])
        table, means = evaluate_keyframes(gmap, trajectory, frames, [0, 3], Rasterizer())
        assert table['index'].tolist() == [0]
        assert means['psnr_db'] == 100.0
        assert means['ssim'] == pytest.approx(1.0, abs=1e-9)
        assert means['depth_l1_cm'] == 0.0
