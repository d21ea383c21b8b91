"""
Tests for disk projection, splat evaluation, compositing and the analytic backward pass.
"""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import (GRADIENT_INTRINSICS, finite_difference_gradients, map_from_parameters, single_disk,
                      stacked_disk_parameters)
from g2s_slam.errors import SceneMismatchError
from g2s_slam.gaussian_map import GaussianMap
from g2s_slam.geometry import Pose, look_at, tangent_frame_from_normal
from g2s_slam.renderer import (Rasterizer, UpstreamGradients, project_disks, render, render_backward,
                               splat_weight)


def random_scene(seed: int, n: int = 30) -> GaussianMap:
    rng = np.random.default_rng(seed)
    centers = np.column_stack([rng.uniform(-0.8, 0.8, n), rng.uniform(-0.8, 0.8, n), rng.uniform(1.0, 4.0, n)])
    frames = Rotation.random(n, random_state=seed).as_matrix()
    gmap = GaussianMap()
    gmap.add_disks(centers, frames, rng.uniform(0.05, 0.3, size=(n, 2)), rng.random((n, 3)),
                   rng.uniform(0.2, 0.95, n))
    return gmap


def linear_upstream(shape, seed: int = 0) -> UpstreamGradients:
    h, w = shape
    rng = np.random.default_rng(seed)
    return UpstreamGradients(color=rng.normal(size=(h, w, 3)), depth=rng.normal(size=(h, w)),
                             normal=rng.normal(size=(h, w, 3)), alpha=rng.normal(size=(h, w)))


def linear_objective(output, upstream: UpstreamGradients) -> float:
    return float(np.sum(output.color * upstream.color) + np.sum(output.depth * upstream.depth)
                 + np.sum(output.normal * upstream.normal) + np.sum(output.alpha * upstream.alpha))


class TestProjection:
    def test_bounding_box_of_fronto_parallel_disk(self, small_intrinsics, disk_map):
        proj = project_disks(disk_map.snapshot(), Pose.identity(), small_intrinsics)
        assert len(proj) == 1
        np.testing.assert_array_equal(proj.bboxes[0], [35, 65, 35, 65])

    def test_disk_behind_camera_is_culled(self, small_intrinsics):
        gmap = single_disk(GaussianMap(), center=(0.0, 0.0, -1.0))
        assert len(project_disks(gmap.snapshot(), Pose.identity(), small_intrinsics)) == 0

    def test_disk_beyond_far_plane_is_culled(self, small_intrinsics):
        gmap = single_disk(GaussianMap(), center=(0.0, 0.0, 12.0))
        assert len(project_disks(gmap.snapshot(), Pose.identity(), small_intrinsics, far=10.0)) == 0

    def test_sorted_front_to_back(self, small_intrinsics):
        gmap = GaussianMap()
        for z in (3.0, 1.0, 2.0):
            single_disk(gmap, center=(0.0, 0.0, z))
        proj = project_disks(gmap.snapshot(), Pose.identity(), small_intrinsics)
        np.testing.assert_array_equal(proj.indices, [1, 2, 0])
        np.testing.assert_array_equal(proj.sort_depths, [1.0, 2.0, 3.0])

    def test_depth_ties_keep_insertion_order(self, small_intrinsics):
        gmap = GaussianMap()
        single_disk(gmap, center=(0.1, 0.0, 2.0))
        single_disk(gmap, center=(-0.1, 0.0, 2.0))
        proj = project_disks(gmap.snapshot(), Pose.identity(), small_intrinsics)
        np.testing.assert_array_equal(proj.indices, [0, 1])

    def test_unknown_representation(self, small_intrinsics, disk_map):
        with pytest.raises(ValueError):
            project_disks(disk_map.snapshot(), Pose.identity(), small_intrinsics, representation='cube')


class TestSplatWeight:
    def test_center_pixel(self, small_intrinsics, disk_map):
        proj = project_disks(disk_map.snapshot(), Pose.identity(), small_intrinsics)
        u, v, kernel, depth = splat_weight(proj, 0, (50, 50), small_intrinsics)
        assert (u, v) == (0.0, 0.0)
        assert kernel == 1.0
        assert depth == 2.0

    def test_one_sigma_ring(self, small_intrinsics, disk_map):
        proj = project_disks(disk_map.snapshot(), Pose.identity(), small_intrinsics)
        u, v, kernel, depth = splat_weight(proj, 0, (55, 55), small_intrinsics)
        assert u == pytest.approx(1.0) and v == pytest.approx(1.0)
        assert kernel == pytest.approx(np.exp(-1.0))
        assert depth == pytest.approx(2.0)

    def test_beyond_cutoff_has_zero_weight(self, small_intrinsics, disk_map):
        proj = project_disks(disk_map.snapshot(), Pose.identity(), small_intrinsics)
        assert splat_weight(proj, 0, (70, 50), small_intrinsics)[2] == 0.0

    def test_tilted_disk_matches_ray_plane_oracle(self, small_intrinsics):
        frame = Rotation.from_euler('y', 45, degrees=True).as_matrix()
        center = np.array([0.0, 0.0, 2.0])
        gmap = single_disk(GaussianMap(), center=center, frame=frame, scales=(0.3, 0.2))
        proj = project_disks(gmap.snapshot(), Pose.identity(), small_intrinsics)
        u, v, kernel, depth = splat_weight(proj, 0, (60, 47), small_intrinsics)

        ray = np.array([(60 - 50) / 100.0, (47 - 50) / 100.0, 1.0])
        # center + a s1 t1 + b s2 t2 = lam ray
        system = np.column_stack([0.3 * frame[:, 0], 0.2 * frame[:, 1], -ray])
        a, b, lam = np.linalg.solve(system, -center)
        assert u == pytest.approx(a, abs=1e-9)
        assert v == pytest.approx(b, abs=1e-9)
        assert depth == pytest.approx(lam, abs=1e-9)
        assert kernel == pytest.approx(np.exp(-0.5 * (a * a + b * b)), abs=1e-12)

    def test_ray_parallel_to_disk(self, small_intrinsics):
        frame = Rotation.from_euler('y', 90, degrees=True).as_matrix()
        gmap = single_disk(GaussianMap(), frame=frame)
        proj = project_disks(gmap.snapshot(), Pose.identity(), small_intrinsics)
        assert splat_weight(proj, 0, (50, 50), small_intrinsics) is None


class TestForward:
    def test_empty_map_renders_background(self, small_intrinsics):
        out = Rasterizer(background=(0.1, 0.2, 0.3)).render(GaussianMap().snapshot(), Pose.identity(),
                                                            small_intrinsics)
        np.testing.assert_array_equal(out.color, np.broadcast_to([0.1, 0.2, 0.3], (100, 100, 3)))
        np.testing.assert_array_equal(out.depth, 0.0)
        np.testing.assert_array_equal(out.alpha, 0.0)
        np.testing.assert_array_equal(out.normal, 0.0)
        assert out.fragment_count == 0

    def test_single_opaque_disk(self, small_intrinsics, disk_map):
        out = render(disk_map.snapshot(), Pose.identity(), small_intrinsics)
        np.testing.assert_allclose(out.color[50, 50], [1.0, 0.0, 0.0])
        assert out.depth[50, 50] == pytest.approx(2.0)
        assert out.alpha[50, 50] == pytest.approx(1.0)
        # the disk normal points away from the camera and renders flipped
        np.testing.assert_allclose(out.normal[50, 50], [0.0, 0.0, -1.0])
        # outside the 3-sigma support nothing is drawn
        assert out.alpha[50, 80] == 0.0

    def test_two_stacked_disks_blend(self, small_intrinsics):
        gmap = single_disk(GaussianMap(), center=(0.0, 0.0, 1.0), color=(1.0, 0.0, 0.0), opacity=0.5)
        single_disk(gmap, center=(0.0, 0.0, 2.0), color=(0.0, 0.0, 1.0), opacity=1.0)
        out = render(gmap.snapshot(), Pose.identity(), small_intrinsics)
        np.testing.assert_allclose(out.color[50, 50], [0.5, 0.0, 0.5])
        assert out.depth[50, 50] == pytest.approx(1.5)
        assert out.alpha[50, 50] == pytest.approx(1.0)

    def test_insertion_order_does_not_change_the_image(self, small_intrinsics):
        near = dict(center=(0.0, 0.0, 1.0), color=(1.0, 0.0, 0.0), opacity=0.5)
        far = dict(center=(0.0, 0.0, 2.0), color=(0.0, 0.0, 1.0), opacity=1.0)
        first = render(single_disk(single_disk(GaussianMap(), **near), **far).snapshot(), Pose.identity(),
                       small_intrinsics)
        second = render(single_disk(single_disk(GaussianMap(), **far), **near).snapshot(), Pose.identity(),
                        small_intrinsics)
        np.testing.assert_array_equal(first.color, second.color)
        np.testing.assert_array_equal(first.depth, second.depth)

    def test_channels_are_well_formed(self, small_intrinsics):
        snapshot = random_scene(1).snapshot()
        out = render(snapshot, Pose.identity(), small_intrinsics)
        assert out.color.shape == (100, 100, 3)
        assert np.all((out.alpha >= 0.0) & (out.alpha <= 1.0))
        assert np.all(out.depth >= 0.0)
        norms = np.linalg.norm(out.normal, axis=2)
        drawn = norms > 0
        np.testing.assert_allclose(norms[drawn], 1.0)
        assert out.generation == snapshot.generation

    def test_background_fills_transmittance(self, small_intrinsics):
        snapshot = random_scene(2).snapshot()
        black = Rasterizer(background=(0.0, 0.0, 0.0)).render(snapshot, Pose.identity(), small_intrinsics)
        white = Rasterizer(background=(1.0, 1.0, 1.0)).render(snapshot, Pose.identity(), small_intrinsics)
        # color difference equals the final transmittance 1 - alpha
        np.testing.assert_allclose(white.color - black.color, np.repeat((1.0 - black.alpha)[..., None], 3, axis=2),
                                   atol=1e-12)

    def test_tile_size_and_threads_do_not_change_the_image(self, small_intrinsics):
        snapshot = random_scene(3).snapshot()
        reference = Rasterizer(tile_size=16, threads=1).render(snapshot, Pose.identity(), small_intrinsics)
        for tile_size, threads in ((5, 3), (32, 2), (7, 1)):
            out = Rasterizer(tile_size=tile_size, threads=threads).render(snapshot, Pose.identity(),
                                                                          small_intrinsics)
            for channel in ('color', 'depth', 'normal', 'alpha'):
                np.testing.assert_allclose(getattr(out, channel), getattr(reference, channel), rtol=0, atol=1e-12)

    def test_world_pose_moves_the_image(self, small_intrinsics, disk_map):
        # shifting the camera by +0.1 m in x moves the disk 5 px to the left at 2 m
        out = render(disk_map.snapshot(), Pose(np.eye(3), [0.1, 0.0, 0.0]), small_intrinsics)
        assert out.alpha[50, 45] == pytest.approx(1.0)
        assert out.depth[50, 45] == pytest.approx(2.0)


class TestDepthConsistency:
    """Back-projected depth of a tilted disk must stay on the disk plane from every viewpoint."""

    CENTER = np.array([0.0, 0.0, 2.0])
    NORMAL = np.array([np.sin(np.pi / 4), 0.0, -np.cos(np.pi / 4)])

    def views(self):
        second_eye = self.CENTER + 2.0 * np.array([np.sin(np.pi / 6), 0.0, -np.cos(np.pi / 6)])
        up = np.array([0.0, -1.0, 0.0])
        return [look_at(np.zeros(3), self.CENTER, up), look_at(second_eye, self.CENTER, up)]

    def plane_offsets(self, representation: str, intrinsics) -> np.ndarray:
        gmap = single_disk(GaussianMap(), center=self.CENTER, frame=tangent_frame_from_normal(self.NORMAL),
                           scales=(0.2, 0.2))
        rasterizer = Rasterizer(representation=representation)
        rays = intrinsics.pixel_rays()
        offsets = []
        for pose in self.views():
            out = rasterizer.render(gmap.snapshot(), pose, intrinsics)
            drawn = out.alpha > 0
            assert drawn.sum() > 20
            # one splat: depth / alpha is the depth of its surface
            camera_points = rays[drawn] * (out.depth[drawn] / out.alpha[drawn])[:, None]
            world = pose.transform(camera_points)
            offsets.append(np.abs((world - self.CENTER) @ self.NORMAL))
        return np.concatenate(offsets)

    def test_disk_depth_lies_on_the_plane(self, small_intrinsics):
        assert self.plane_offsets('disk', small_intrinsics).max() < 1e-6

    def test_isotropic_depth_leaves_the_plane(self, small_intrinsics):
        assert self.plane_offsets('isotropic', small_intrinsics).max() > 1e-3


class TestBackward:
    def test_zero_upstream_gives_zero_gradients(self, small_intrinsics):
        snapshot = random_scene(4).snapshot()
        rasterizer = Rasterizer()
        out = rasterizer.render(snapshot, Pose.identity(), small_intrinsics)
        grads = rasterizer.backward(snapshot, out, UpstreamGradients())
        for name, values in grads.groups().items():
            np.testing.assert_array_equal(values, 0.0, err_msg=name)

    def test_color_gradient_of_single_disk_is_its_coverage(self, small_intrinsics):
        gmap = single_disk(GaussianMap(), opacity=0.6)
        snapshot = gmap.snapshot()
        out = render(snapshot, Pose.identity(), small_intrinsics)
        upstream = np.zeros((100, 100, 3))
        upstream[..., 0] = 1.0
        grads = render_backward(snapshot, out, UpstreamGradients(color=upstream))
        assert grads.colors[0, 0] == pytest.approx(out.alpha.sum())
        np.testing.assert_allclose(grads.colors[0, 1:], 0.0)

    def test_stale_snapshot_is_rejected(self, small_intrinsics, disk_map):
        snapshot = disk_map.snapshot()
        out = render(snapshot, Pose.identity(), small_intrinsics)
        disk_map.set_parameters(opacities=[0.5])
        with pytest.raises(SceneMismatchError):
            render_backward(disk_map.snapshot(), out, UpstreamGradients(alpha=np.ones((100, 100))))

    def test_forward_without_cache_is_rejected(self, small_intrinsics, disk_map):
        snapshot = disk_map.snapshot()
        rasterizer = Rasterizer()
        out = rasterizer.render(snapshot, Pose.identity(), small_intrinsics, keep_cache=False)
        with pytest.raises(SceneMismatchError):
            rasterizer.backward(snapshot, out, UpstreamGradients(alpha=np.ones((100, 100))))

    def test_threads_do_not_change_deterministic_gradients(self, small_intrinsics):
        snapshot = random_scene(5).snapshot()
        upstream = linear_upstream((100, 100), seed=5)
        results = []
        for threads in (1, 4):
            rasterizer = Rasterizer(threads=threads, deterministic=True)
            out = rasterizer.render(snapshot, Pose.identity(), small_intrinsics)
            results.append(rasterizer.backward(snapshot, out, upstream))
        for name in results[0].groups():
            np.testing.assert_allclose(results[1].groups()[name], results[0].groups()[name], rtol=0, atol=1e-12)

    def test_nondeterministic_reduction_agrees_within_rounding(self, small_intrinsics):
        snapshot = random_scene(6).snapshot()
        upstream = linear_upstream((100, 100), seed=6)
        grads = []
        for deterministic in (True, False):
            rasterizer = Rasterizer(tile_size=8, threads=4, deterministic=deterministic)
            out = rasterizer.render(snapshot, Pose.identity(), small_intrinsics)
            grads.append(rasterizer.backward(snapshot, out, upstream))
        for name in grads[0].groups():
            np.testing.assert_allclose(grads[1].groups()[name], grads[0].groups()[name], rtol=1e-9, atol=1e-9)

    @pytest.mark.parametrize('representation', ['disk', 'isotropic'])
    def test_matches_finite_differences(self, representation):
        params = stacked_disk_parameters()
        rasterizer = Rasterizer(representation=representation)
        upstream = linear_upstream((GRADIENT_INTRINSICS.height, GRADIENT_INTRINSICS.width), seed=7)

        def objective(p):
            out = rasterizer.render(map_from_parameters(p).snapshot(), Pose.identity(), GRADIENT_INTRINSICS,
                                    keep_cache=False)
            return linear_objective(out, upstream)

        snapshot = map_from_parameters(params).snapshot()
        out = rasterizer.render(snapshot, Pose.identity(), GRADIENT_INTRINSICS)
        # every pixel sees every disk
        assert out.fragment_count == 3 * GRADIENT_INTRINSICS.width * GRADIENT_INTRINSICS.height
        analytic = rasterizer.backward(snapshot, out, upstream).groups()
        numeric = finite_difference_gradients(objective, params)
        for name, values in numeric.items():
            np.testing.assert_allclose(analytic[name], values, rtol=1e-4, atol=1e-7, err_msg=name)

    def test_finite_differences_under_a_moved_camera(self):
        params = stacked_disk_parameters()
        # small camera motion keeps the full coverage of the stacked disks
        pose = Pose(Rotation.from_euler('xyz', [0.02, -0.03, 0.05]).as_matrix(), [0.03, -0.02, 0.05])
        rasterizer = Rasterizer()
        upstream = linear_upstream((GRADIENT_INTRINSICS.height, GRADIENT_INTRINSICS.width), seed=8)

        def objective(p):
            out = rasterizer.render(map_from_parameters(p).snapshot(), pose, GRADIENT_INTRINSICS, keep_cache=False)
            return linear_objective(out, upstream)

        snapshot = map_from_parameters(params).snapshot()
        out = rasterizer.render(snapshot, pose, GRADIENT_INTRINSICS)
        analytic = rasterizer.backward(snapshot, out, upstream).groups()
        for name, values in finite_difference_gradients(objective, params).items():
            np.testing.assert_allclose(analytic[name], values, rtol=1e-4, atol=1e-7, err_msg=name)
