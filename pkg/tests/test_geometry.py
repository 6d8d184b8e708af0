import numpy as np
import pytest

from maploc.errors import EmptyCloud
from maploc.geometry import (
    PointCloud,
    Pose,
    SpatialIndex,
    between,
    build_index,
    compose,
    estimate_normals,
    exp_map,
    inverse,
    log_map,
    orthonormalize,
    se3_left_jacobian,
    se3_left_jacobian_inv,
    so3_exp,
    so3_log,
)

from conftest import random_pose, random_twist


def brute_force_knn(points, query, k):
    """Oracle: exhaustive scan, ties by lowest index."""
    d = np.linalg.norm(points - query, axis=1)
    order = np.lexsort((np.arange(len(points)), d))
    return d[order[:k]], order[:k]


class TestSE3:
    def test_exp_quarter_turn(self):
        pose = exp_map([0.0, 0.0, np.pi / 2, 0.0, 0.0, 0.0])
        np.testing.assert_allclose(pose.transform([[1.0, 0.0, 0.0]]),
                                   [[0.0, 1.0, 0.0]], atol=1e-12)
        np.testing.assert_allclose(pose.translation, 0.0, atol=1e-15)

    def test_log_pure_translation(self):
        pose = Pose(np.eye(3), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(log_map(pose), [0, 0, 0, 1, 2, 3], atol=1e-15)

    def test_log_pi_rotation_about_z(self):
        pose = Pose(so3_exp([0.0, 0.0, np.pi]), np.zeros(3))
        np.testing.assert_allclose(log_map(pose)[:3], [0.0, 0.0, np.pi], atol=1e-9)

    def test_log_pi_rotation_sign_convention(self):
        # axis with a negative leading component flips to positive
        axis = np.array([1.0, -1.0, 0.5])
        axis /= np.linalg.norm(axis)
        rotvec = so3_log(so3_exp(axis * np.pi))
        recovered_axis = rotvec / np.linalg.norm(rotvec)
        lead = recovered_axis[np.nonzero(np.abs(recovered_axis) > 1e-12)[0][0]]
        assert lead > 0
        np.testing.assert_allclose(so3_exp(rotvec), so3_exp(axis * np.pi), atol=1e-9)

    def test_exp_log_round_trip(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            xi = random_twist(rng, rot_scale=3.0, trans_scale=5.0)
            pose = exp_map(xi)
            np.testing.assert_allclose(log_map(pose), xi, atol=1e-9)

    def test_log_exp_round_trip_near_pi(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            angle = np.pi - 10.0 ** rng.uniform(-12, -7)
            pose = Pose(so3_exp(axis * angle), rng.normal(size=3))
            back = exp_map(log_map(pose))
            np.testing.assert_allclose(back.rotation, pose.rotation, atol=1e-6)
            np.testing.assert_allclose(back.translation, pose.translation, atol=1e-6)

    def test_tiny_angle_no_nan(self):
        xi = np.array([1e-12, -2e-13, 3e-13, 0.1, 0.2, 0.3])
        pose = exp_map(xi)
        assert np.all(np.isfinite(pose.rotation))
        np.testing.assert_allclose(log_map(pose), xi, atol=1e-15)

    def test_group_operations(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            a = random_pose(rng)
            b = random_pose(rng)
            c = random_pose(rng)
            ident = compose(a, inverse(a))
            np.testing.assert_allclose(ident.rotation, np.eye(3), atol=1e-12)
            np.testing.assert_allclose(ident.translation, 0.0, atol=1e-12)
            np.testing.assert_allclose(compose(a, between(a, b)).matrix(),
                                       b.matrix(), atol=1e-12)
            np.testing.assert_allclose(compose(compose(a, b), c).matrix(),
                                       compose(a, compose(b, c)).matrix(), atol=1e-12)

    def test_matrix_transform_consistency(self, rng):
        pose = random_pose(rng)
        pts = rng.normal(size=(10, 3))
        hom = np.hstack([pts, np.ones((10, 1))])
        np.testing.assert_allclose(pose.transform(pts),
                                   (pose.matrix() @ hom.T).T[:, :3], atol=1e-12)

    def test_se3_left_jacobian_fd_identity(self):
        # log(exp(eps * delta) * exp(xi)) ~ xi + eps * Jl_inv(xi) @ delta
        rng = np.random.default_rng(5)
        eps = 1e-7
        for _ in range(20):
            xi = random_twist(rng, rot_scale=2.0, trans_scale=2.0)
            pose = exp_map(xi)
            jl_inv = se3_left_jacobian_inv(xi)
            for col in range(6):
                delta = np.zeros(6)
                delta[col] = 1.0
                plus = log_map(compose(exp_map(eps * delta), pose))
                minus = log_map(compose(exp_map(-eps * delta), pose))
                fd = (plus - minus) / (2.0 * eps)
                np.testing.assert_allclose(fd, jl_inv @ delta, atol=1e-6)

    def test_se3_left_jacobian_inverse_consistent(self, rng):
        xi = random_twist(rng, rot_scale=2.0, trans_scale=3.0)
        prod = se3_left_jacobian(xi) @ se3_left_jacobian_inv(xi)
        np.testing.assert_allclose(prod, np.eye(6), atol=1e-12)

    def test_orthonormalize(self, rng):
        pose = random_pose(rng)
        noisy = pose.rotation + rng.normal(scale=1e-4, size=(3, 3))
        fixed = orthonormalize(noisy)
        np.testing.assert_allclose(fixed @ fixed.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(fixed) > 0
        assert np.abs(fixed - pose.rotation).max() < 1e-3


class TestSpatialIndex:
    def test_knn_matches_brute_force_100_clouds(self):
        rng = np.random.default_rng(123)
        for _ in range(100):
            n = int(rng.integers(20, 200))
            points = rng.uniform(-5, 5, (n, 3))
            index = build_index(PointCloud(points))
            queries = rng.uniform(-5, 5, (10, 3))
            k = int(rng.integers(1, min(8, n) + 1))
            dist, idx = index.knn(queries, k)
            for qi, q in enumerate(queries):
                bf_d, bf_i = brute_force_knn(points, q, k)
                np.testing.assert_array_equal(idx[qi], bf_i)
                np.testing.assert_allclose(dist[qi], bf_d, atol=1e-12)

    def test_knn_10k_cloud(self):
        rng = np.random.default_rng(99)
        points = rng.uniform(0, 10, (10000, 3))
        index = build_index(PointCloud(points))
        queries = rng.uniform(0, 10, (100, 3))
        _, idx = index.knn(queries, 5)
        for qi, q in enumerate(queries):
            _, bf_i = brute_force_knn(points, q, 5)
            np.testing.assert_array_equal(idx[qi], bf_i)

    def test_duplicate_points_tie_by_lowest_index(self):
        points = np.array([[1.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0], [0.0, 0, 0]])
        index = build_index(PointCloud(points))
        _, idx = index.knn(np.array([[1.0, 0, 0]]), 2)
        np.testing.assert_array_equal(idx[0], [0, 2])

    def test_single_point_cloud(self):
        index = build_index(PointCloud(np.array([[1.0, 2.0, 3.0]])))
        dist, idx = index.knn(np.array([[1.0, 2.0, 3.0]]), 1)
        assert idx[0, 0] == 0
        assert dist[0, 0] == 0.0

    def test_radius_zero_exact_coincidence(self):
        points = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 0, 0]])
        index = build_index(PointCloud(points))
        np.testing.assert_array_equal(index.radius([0.0, 0, 0], 0.0), [0, 2])
        np.testing.assert_array_equal(index.radius([0.5, 0, 0], 0.0), [])

    def test_empty_cloud_raises(self):
        with pytest.raises(EmptyCloud):
            build_index(PointCloud(np.zeros((0, 3))))

    def test_knn_workers_identical(self, rng):
        points = rng.uniform(0, 1, (500, 3))
        index = build_index(PointCloud(points))
        queries = rng.uniform(0, 1, (50, 3))
        d1, i1 = index.knn(queries, 4, workers=1)
        d8, i8 = index.knn(queries, 4, workers=8)
        np.testing.assert_array_equal(i1, i8)
        np.testing.assert_array_equal(d1, d8)


class TestNormals:
    def test_plane_z0(self, rng):
        pts = np.column_stack([rng.uniform(0, 10, 200),
                               rng.uniform(0, 10, 200),
                               np.zeros(200)])
        cloud = estimate_normals(PointCloud(pts), k=10)
        np.testing.assert_allclose(cloud.normals, np.tile([0.0, 0.0, 1.0], (200, 1)),
                                   atol=1e-9)

    def test_plane_x5(self, rng):
        pts = np.column_stack([np.full(200, 5.0),
                               rng.uniform(0, 10, 200),
                               rng.uniform(0, 10, 200)])
        cloud = estimate_normals(PointCloud(pts), k=10)
        np.testing.assert_allclose(cloud.normals, np.tile([1.0, 0.0, 0.0], (200, 1)),
                                   atol=1e-9)

    def test_collinear_neighborhood_null_normal(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
        cloud = estimate_normals(PointCloud(pts), k=3)
        assert np.all(np.isnan(cloud.normals))

    def test_valid_normals_unit_norm(self, rng):
        # two slightly noisy planes
        a = np.column_stack([rng.uniform(0, 5, 300), rng.uniform(0, 5, 300),
                             rng.normal(scale=1e-4, size=300)])
        b = np.column_stack([5.0 + rng.normal(scale=1e-4, size=300),
                             rng.uniform(0, 5, 300), rng.uniform(0, 5, 300)])
        cloud = estimate_normals(PointCloud(np.vstack([a, b])), k=10)
        valid = ~np.isnan(cloud.normals[:, 0])
        assert valid.sum() > 500
        norms = np.linalg.norm(cloud.normals[valid], axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_sign_convention(self, rng):
        pts = np.column_stack([rng.uniform(0, 10, 100), rng.uniform(0, 10, 100),
                               np.zeros(100)])
        cloud = estimate_normals(PointCloud(pts), k=8)
        lead = np.take_along_axis(cloud.normals,
                                  np.abs(cloud.normals).argmax(axis=1)[:, None],
                                  axis=1)
        assert np.all(lead > 0)

    def test_preconditions(self):
        with pytest.raises(ValueError):
            estimate_normals(PointCloud(np.zeros((5, 3))), k=2)
        with pytest.raises(ValueError):
            estimate_normals(PointCloud(np.random.default_rng(0).normal(size=(4, 3))), k=10)
