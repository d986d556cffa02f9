import math
import os
import tempfile
import unittest

import numpy as np

import udma.projection as PRJ
import udma.taxonomy as TAX
from udma.dataio import PointCloud
from udma.errors import DegeneratePointError, ShapeError


def cloud_of(xyz, intensity=0.5):
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    return PointCloud(np.column_stack([xyz, np.full(len(xyz), intensity)]))


def random_in_fov(rng, n, cfg):
    azimuth = rng.uniform(-math.pi, math.pi, n)
    elevation = rng.uniform(-cfg.fov_down, cfg.fov_up, n) * 0.999
    r = rng.uniform(1.0, 50.0, n)
    return np.column_stack([r * np.cos(elevation) * np.cos(azimuth),
                            r * np.cos(elevation) * np.sin(azimuth),
                            r * np.sin(elevation)])


class ProjectionTest_project_point(unittest.TestCase):

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.cfg = PRJ.ProjectionConfig(width=2048, height=64, fov_up=math.radians(3.0), fov_down=math.radians(25.0))

    def test_forward_axis(self):
        self.assertEqual(PRJ.project_point((1, 0, 0), self.cfg), (1024, 6))

    def test_left_axis(self):
        u, _ = PRJ.project_point((0, 1, 0), self.cfg)
        self.assertEqual(u, 512)

    def test_straight_up_is_out_of_fov(self):
        self.assertIsNone(PRJ.project_point((0, 0, 1), self.cfg))

    def test_origin(self):
        with self.assertRaises(DegeneratePointError):
            PRJ.project_point((0, 0, 0), self.cfg)

    def test_backward_axis_clamped(self):
        u, _ = PRJ.project_point((-1, 0, 0), self.cfg)
        self.assertIn(u, (0, 2047))

    def test_round_trip_within_one_pixel(self):
        rng = np.random.default_rng(0)
        xyz = random_in_fov(rng, 100000, self.cfg)
        u, v, _, in_fov, r = PRJ.project_points(xyz, self.cfg)
        self.assertTrue(in_fov.all())
        azimuth, elevation = PRJ.pixel_center_angles(u, v, self.cfg)
        true_azimuth = np.arctan2(xyz[:, 1], xyz[:, 0])
        true_elevation = np.arcsin(xyz[:, 2] / r)
        azimuth_error = np.abs(np.angle(np.exp(1j * (azimuth - true_azimuth))))
        self.assertLessEqual(azimuth_error.max(), 2 * math.pi / self.cfg.width)
        self.assertLessEqual(np.abs(elevation - true_elevation).max(), self.cfg.fov / self.cfg.height)

    def test_monotone(self):
        angles = np.linspace(-3.0, 3.0, 50)
        xyz = np.column_stack([np.cos(angles), np.sin(angles), np.zeros(50)])
        u, _, _, _, _ = PRJ.project_points(xyz, self.cfg)
        self.assertTrue(np.all(np.diff(u) <= 0))
        elevations = np.linspace(-0.4, 0.05, 40)
        xyz = np.column_stack([np.cos(elevations), np.zeros(40), np.sin(elevations)])
        _, _, v_raw, _, _ = PRJ.project_points(xyz, self.cfg)
        self.assertTrue(np.all(np.diff(v_raw) < 0))

    def test_config_validation(self):
        with self.assertRaises(Exception):
            PRJ.ProjectionConfig(width=0)
        with self.assertRaises(Exception):
            PRJ.ProjectionConfig(fov_up=0.0, fov_down=0.0)


class ProjectionTest_range_image(unittest.TestCase):

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.cfg = PRJ.ProjectionConfig(width=64, height=16)

    def test_nearest_wins(self):
        image = PRJ.build_range_image(cloud_of([[9, 0, 0], [5, 0, 0]]), None, self.cfg)
        self.assertEqual(int(image.valid.sum()), 1)
        self.assertEqual(image.point_index[image.valid][0], 1)
        self.assertEqual(image.range[image.valid][0], 5.0)

    def test_empty_and_single(self):
        empty = PRJ.build_range_image(cloud_of(np.zeros((0, 3))), None, self.cfg)
        self.assertFalse(empty.valid.any())
        single = PRJ.build_range_image(cloud_of([[3, 4, 0]]), None, self.cfg)
        self.assertEqual(int(single.valid.sum()), 1)
        self.assertAlmostEqual(single.range[single.valid][0], 5.0)
        self.assertTrue(np.all(single.component_id == -1))

    def test_collision_oracle(self):
        rng = np.random.default_rng(2)
        xyz = random_in_fov(rng, 5000, self.cfg)
        cloud = cloud_of(xyz)
        image = PRJ.build_range_image(cloud, None, self.cfg)
        u, v, _, in_fov, r = PRJ.project_points(xyz, self.cfg)
        best = np.full(self.cfg.height * self.cfg.width, np.inf)
        for i in np.flatnonzero(in_fov):
            best[v[i] * self.cfg.width + u[i]] = min(best[v[i] * self.cfg.width + u[i]], r[i])
        best = best.reshape(self.cfg.height, self.cfg.width)
        np.testing.assert_array_equal(image.valid, np.isfinite(best))
        np.testing.assert_array_equal(image.range[image.valid], best[image.valid])
        np.testing.assert_allclose(image.range[image.valid], cloud.ranges()[image.point_index[image.valid]],
                                   atol=1e-9)
        network_input = image.network_input(0.5)
        self.assertEqual(network_input.shape, (3, 16, 64))
        np.testing.assert_array_equal(network_input[0], network_input[1])
        np.testing.assert_array_equal(network_input[0], 0.5 * image.range)

    def test_component_length_mismatch(self):
        class ShortMap:
            def __len__(self):
                return 1
        with self.assertRaises(ShapeError):
            PRJ.build_range_image(cloud_of([[1, 0, 0], [2, 0, 0]]), ShortMap(), self.cfg)

    def test_save_and_load(self):
        rng = np.random.default_rng(4)
        image = PRJ.build_range_image(cloud_of(random_in_fov(rng, 300, self.cfg)), None, self.cfg)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'scan.range')
            PRJ.save_range_image(path, image)
            self.assertEqual(os.path.getsize(path), 16 + 8 * 5 * 16 * 64)
            loaded = PRJ.load_range_image(path, self.cfg)
            np.testing.assert_array_equal(loaded.range, image.range)
            np.testing.assert_array_equal(loaded.point_index, image.point_index)
            np.testing.assert_array_equal(loaded.valid, image.valid)


class ProjectionTest_unproject(unittest.TestCase):

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.cfg = PRJ.ProjectionConfig(width=8, height=4)

    def test_collision_losers_share_label(self):
        cloud = cloud_of([[5, 0, 0], [9, 0, 0]])
        image = PRJ.build_range_image(cloud, None, self.cfg)
        pixel_labels = np.full(image.shape, TAX.ROAD)
        pixel_labels[image.valid] = TAX.CAR
        np.testing.assert_array_equal(PRJ.unproject_labels(image, pixel_labels, cloud), [TAX.CAR, TAX.CAR])

    def test_out_of_fov_takes_column_neighbor(self):
        in_view = [10, 0, 0]
        above = [10, 0, 10]
        below = [10, 0, -10]
        other_column = [-10, 0.5, 10]
        cloud = cloud_of([in_view, above, below, other_column, [0, 0, 0]])
        image = PRJ.build_range_image(cloud.subset(np.array([0])), None, self.cfg)
        pixel_labels = np.full(image.shape, TAX.BUILDING)
        pixel_labels[image.valid] = TAX.VEGETATION
        labels = PRJ.unproject_labels(image, pixel_labels, cloud)
        np.testing.assert_array_equal(labels, [TAX.VEGETATION, TAX.VEGETATION, TAX.VEGETATION,
                                               TAX.IGNORE_ID, TAX.IGNORE_ID])

    def test_shape_mismatch(self):
        image = PRJ.empty_range_image(self.cfg)
        with self.assertRaises(ShapeError):
            PRJ.unproject_labels(image, np.zeros((3, 3), dtype=np.int64), cloud_of([[1, 0, 0]]))


if __name__ == '__main__':
    unittest.main()
