"""Re-projection geometry, observation lifting and Bayesian accumulation."""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from segmap3d.fusion import (CameraIntrinsics, ClassPosterior, FeatureMap,
                             Pose, fuse_views, pool_segment_posteriors,
                             project_observations, warp_feature_map)
from segmap3d.geometry import Segmentation, SurfelMap

INTR = CameraIntrinsics(fx=100.0, fy=100.0, cx=32.0, cy=24.0,
                        width=64, height=48)


def constant_depth_map(stride, z=2.0, channels=3, seed=0, pose=None):
    rng = np.random.default_rng(seed)
    h = -(-INTR.height // stride)
    w = -(-INTR.width // stride)
    grid = rng.normal(size=(h, w, channels))
    depth = np.full((INTR.height, INTR.width), z)
    return FeatureMap(grid=grid, stride=stride,
                      depth=depth, pose=pose or Pose.identity())


class TestPose:
    def test_unit_quaternion_enforced(self):
        with pytest.raises(ValueError, match="quaternion"):
            Pose(np.array([0, 0, 0, 1.01]), np.zeros(3))

    def test_matrix_roundtrip(self):
        q = Rotation.from_euler("xyz", [0.3, -0.2, 1.0]).as_quat()
        pose = Pose(q, np.array([1.0, 2, 3]))
        R = pose.matrix()
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)


class TestIntrinsics:
    def test_validation(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=-1, fy=1, cx=1, cy=1, width=4, height=4)
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=1, fy=1, cx=9, cy=1, width=4, height=4)


class TestWarp:
    @pytest.mark.parametrize("stride", [4, 8, 16])
    def test_identity_pose_bit_equal(self, stride):
        src = constant_depth_map(stride)
        warped, mask = warp_feature_map(src, src.pose, INTR)
        assert mask.all()
        np.testing.assert_array_equal(warped.grid, src.grid)

    def test_identity_respects_depth_validity(self):
        src = constant_depth_map(4)
        src.depth[:12, :] = 0.0  # first 3 cell rows invalid
        warped, mask = warp_feature_map(src, src.pose, INTR)
        assert not mask[:3].any()
        assert mask[3:].all()
        np.testing.assert_array_equal(warped.grid[mask], src.grid[mask])
        assert np.all(warped.grid[~mask] == 0)

    @pytest.mark.parametrize("stride", [4, 8])
    def test_pure_translation_shift(self, stride):
        z = 2.0
        tx = 0.32  # fx * tx / (z * stride) is an exact cell count
        src = constant_depth_map(stride, z=z)
        tgt = Pose(np.array([0, 0, 0, 1.0]), np.array([tx, 0, 0]))
        warped, mask = warp_feature_map(src, tgt, INTR)
        shift = INTR.fx * tx / (z * stride)  # cells, along -u in the target
        shift_cells = int(round(shift))
        assert abs(shift - shift_cells) <= 0.5
        h, w, _ = src.grid.shape
        np.testing.assert_array_equal(warped.grid[:, :w - shift_cells],
                                      src.grid[:, shift_cells:])
        assert mask[:, :w - shift_cells].all()
        assert not mask[:, w - shift_cells:].any()

    def test_all_invalid_depth(self):
        src = constant_depth_map(4)
        src.depth[:] = 0.0
        warped, mask = warp_feature_map(src, Pose.identity(), INTR)
        assert not mask.any()
        assert np.all(warped.grid == 0)

    def test_zbuffer_keeps_nearest(self):
        # cell columns 2 (z=1) and 6 (z=2) both land on target column 10
        # when the camera moves by -0.32 m; the closer one must win
        stride = 4
        src = constant_depth_map(stride, z=2.0)
        src.depth[:, 2 * stride:3 * stride] = 1.0
        tgt = Pose(np.array([0, 0, 0, 1.0]), np.array([-0.32, 0, 0.0]))
        warped, mask = warp_feature_map(src, tgt, INTR)
        assert mask[:, 10].all()
        np.testing.assert_array_equal(warped.grid[:, 10], src.grid[:, 2])

    def test_grid_shape_validation(self):
        with pytest.raises(ValueError, match="does not match"):
            FeatureMap(grid=np.zeros((5, 5, 1)), stride=4,
                       depth=np.zeros((48, 64)), pose=Pose.identity())


class TestFuseViews:
    def test_reference_alone(self):
        ref = constant_depth_map(4)
        fused = fuse_views(ref, [], [])
        np.testing.assert_array_equal(fused.grid, ref.grid)

    def test_identical_valid_view(self):
        ref = constant_depth_map(4)
        other = FeatureMap(grid=ref.grid.copy(), stride=4,
                           depth=ref.depth.copy(), pose=ref.pose)
        fused = fuse_views(ref, [other], [np.ones(ref.grid.shape[:2], bool)])
        np.testing.assert_allclose(fused.grid, ref.grid)

    def test_two_term_mean(self):
        ref = constant_depth_map(4)
        ref.grid[:] = 0.0
        other = FeatureMap(grid=np.full_like(ref.grid, 2.0), stride=4,
                           depth=ref.depth, pose=ref.pose)
        fused = fuse_views(ref, [other], [np.ones(ref.grid.shape[:2], bool)])
        np.testing.assert_allclose(fused.grid, 1.0)

    def test_channel_mismatch(self):
        ref = constant_depth_map(4, channels=3)
        other = constant_depth_map(4, channels=2)
        with pytest.raises(ValueError, match="channel"):
            fuse_views(ref, [other], [np.ones(ref.grid.shape[:2], bool)])


def lifting_scene():
    """Camera at origin looking along +z; elements on the z=2 plane."""
    depth = np.full((INTR.height, INTR.width), 2.0)
    pixels = [(8, 8), (32, 24), (50, 40)]
    pts = []
    for u, v in pixels:
        pts.append([(u - INTR.cx) / INTR.fx * 2.0,
                    (v - INTR.cy) / INTR.fy * 2.0, 2.0])
    smap = SurfelMap(positions=np.array(pts),
                     adjacency=np.empty((0, 2), np.int64),
                     normals=np.tile([0, 0, -1.0], (3, 1)))
    rng = np.random.default_rng(2)
    probs = rng.dirichlet(np.ones(4), size=(INTR.height, INTR.width))
    return smap, probs, depth


class TestProjectObservations:
    def test_exact_correspondence(self):
        smap, probs, depth = lifting_scene()
        ids, vecs = project_observations(probs, depth, Pose.identity(), INTR, smap)
        assert ids.tolist() == [0, 1, 2]
        np.testing.assert_allclose(vecs[1], probs[24, 32])

    def test_behind_camera_culled(self):
        smap, probs, depth = lifting_scene()
        smap.positions[:, 2] *= -1
        ids, _ = project_observations(probs, depth, Pose.identity(), INTR, smap)
        assert len(ids) == 0

    def test_occlusion_gate(self):
        smap, probs, depth = lifting_scene()
        # element 1 projects to depth 2.0 but sits at 2 + 2*tolerance
        tol = max(0.05, 0.02 * 2.0)
        smap.positions[1, 2] = 2.0 + 2 * tol
        smap.positions[1, :2] *= (2.0 + 2 * tol) / 2.0
        ids, _ = project_observations(probs, depth, Pose.identity(), INTR, smap)
        assert 1 not in ids

    def test_back_facing_culled(self):
        smap, probs, depth = lifting_scene()
        smap.normals[2] = [0, 0, 1.0]  # facing away from the camera
        ids, _ = project_observations(probs, depth, Pose.identity(), INTR, smap)
        assert 2 not in ids

    def test_row_sum_precondition(self):
        smap, probs, depth = lifting_scene()
        probs[0, 0] *= 2
        with pytest.raises(ValueError, match="sum to 1"):
            project_observations(probs, depth, Pose.identity(), INTR, smap)


class TestBayesianUpdate:
    def test_uniform_prior_passthrough(self):
        post = ClassPosterior.uniform(1, 2)
        post.update(np.array([0]), np.array([[0.8, 0.2]]))
        np.testing.assert_allclose(post.probs[0], [0.8, 0.2])
        assert post.counts[0] == 1

    def test_second_observation(self):
        post = ClassPosterior.uniform(1, 2)
        post.update(np.array([0]), np.array([[0.8, 0.2]]))
        post.update(np.array([0]), np.array([[0.8, 0.2]]))
        np.testing.assert_allclose(post.probs[0], [0.9411765, 0.0588235],
                                   atol=1e-3)

    def test_order_invariance(self):
        rng = np.random.default_rng(0)
        obs = rng.dirichlet(np.ones(5), size=40)
        a = ClassPosterior.uniform(1, 5)
        b = ClassPosterior.uniform(1, 5)
        for o in obs:
            a.update(np.array([0]), o[None])
        for o in obs[rng.permutation(40)]:
            b.update(np.array([0]), o[None])
        np.testing.assert_allclose(a.probs, b.probs, atol=1e-6)

    def test_floor_blocks_lockout(self):
        post = ClassPosterior.uniform(1, 3)
        post.update(np.array([0]), np.array([[1.0, 0.0, 0.0]]))
        post.update(np.array([0]), np.array([[0.0, 1.0, 0.0]]))
        assert np.all(post.probs[0] > 0)
        assert abs(post.probs[0].sum() - 1) < 1e-12

    def test_negative_observation_rejected(self):
        post = ClassPosterior.uniform(1, 2)
        with pytest.raises(ValueError, match="negative"):
            post.update(np.array([0]), np.array([[-0.1, 1.1]]))


class TestPooling:
    def make_seg(self, n, assign):
        smap = SurfelMap(positions=np.random.default_rng(0).normal(size=(n, 3)),
                         adjacency=np.empty((0, 2), np.int64))
        return Segmentation(smap, np.asarray(assign))

    def test_shared_vector(self):
        seg = self.make_seg(4, [0, 0, 0, 0])
        post = ClassPosterior.uniform(4, 3)
        post.probs[:] = [0.5, 0.3, 0.2]
        labels, pooled = pool_segment_posteriors(post, seg)
        np.testing.assert_allclose(pooled[0], [0.5, 0.3, 0.2])

    def test_two_member_mean(self):
        seg = self.make_seg(2, [0, 0])
        post = ClassPosterior.uniform(2, 2)
        post.probs[0] = [1.0, 0.0]
        post.probs[1] = [0.0, 1.0]
        _, pooled = pool_segment_posteriors(post, seg)
        np.testing.assert_allclose(pooled[0], [0.5, 0.5])

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(1)
        assign = rng.integers(0, 4, size=60)
        seg = self.make_seg(60, assign)
        post = ClassPosterior.uniform(60, 6)
        post.probs = rng.dirichlet(np.ones(6), size=60)
        labels, pooled = pool_segment_posteriors(post, seg)
        for i, l in enumerate(labels):
            members = post.probs[assign == l]
            want = members.mean(axis=0)
            want /= want.sum()
            np.testing.assert_allclose(pooled[i], want, atol=1e-6)
