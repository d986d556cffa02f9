import os
import tempfile
import unittest

import numpy as np

import udma.dataio as DIO
import udma.taxonomy as TAX
from udma.errors import FormatError, LabelRangeError, ShapeError


class DataioTest_scan_files(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.scan_path = os.path.join(self.tmp.name, 'scan.bin')
        self.label_path = os.path.join(self.tmp.name, 'scan.label')

    def tearDown(self):
        self.tmp.cleanup()

    def test_scan_round_trip_is_float32(self):
        points = np.array([[1.0, 2.0, 3.0, 0.5], [0.1, -0.2, 0.3, 0.25]])
        DIO.write_scan(self.scan_path, DIO.PointCloud(points))
        self.assertEqual(os.path.getsize(self.scan_path), 32)
        cloud = DIO.read_scan(self.scan_path)
        self.assertEqual(cloud.points.dtype, np.float64)
        np.testing.assert_array_equal(cloud.points, points.astype(np.float32).astype(np.float64))

    def test_truncated_scan_names_byte_count(self):
        with open(self.scan_path, 'wb') as scan_file:
            scan_file.write(b'\0' * 20)
        with self.assertRaises(FormatError) as context:
            DIO.read_scan(self.scan_path)
        self.assertIn("20 bytes", str(context.exception))

    def test_empty_scan(self):
        open(self.scan_path, 'wb').close()
        self.assertEqual(len(DIO.read_scan(self.scan_path)), 0)

    def test_labels_through_default_map(self):
        raw = np.array([40, 10 | (7 << 16), 0, 999, 50], dtype='<u4')
        with open(self.label_path, 'wb') as label_file:
            label_file.write(raw.tobytes())
        labels = DIO.read_labels(self.label_path, 5)
        np.testing.assert_array_equal(labels, [TAX.ROAD, TAX.CAR, TAX.IGNORE_ID, TAX.IGNORE_ID, TAX.BUILDING])

    def test_label_count_mismatch(self):
        DIO.write_labels(self.label_path, np.zeros(3, dtype=np.int64))
        with self.assertRaises(FormatError) as context:
            DIO.read_labels(self.label_path, 4)
        self.assertIn("expected 4", str(context.exception))
        self.assertIn("found 3", str(context.exception))

    def test_written_labels_read_back(self):
        train_ids = np.array([0, 1, 2, 3, 4, 5, 6])
        DIO.write_labels(self.label_path, train_ids)
        np.testing.assert_array_equal(DIO.read_labels(self.label_path, 7), train_ids)


class DataioTest_contracts(unittest.TestCase):

    def test_point_cloud_rejects_bad_input(self):
        with self.assertRaises(FormatError):
            DIO.PointCloud(np.array([[0.0, np.nan, 0.0, 0.0]]))
        with self.assertRaises(ShapeError):
            DIO.PointCloud(np.zeros((2, 4)), np.zeros(3))
        with self.assertRaises(LabelRangeError):
            DIO.PointCloud(np.zeros((1, 4)), np.array([7]))

    def test_point_cloud_views(self):
        cloud = DIO.PointCloud(np.array([[3.0, 4.0, 0.0, 0.7]]), np.array([TAX.CAR]))
        np.testing.assert_allclose(cloud.ranges(), [5.0])
        self.assertEqual(cloud.intensity[0], 0.7)
        self.assertEqual(len(cloud.subset(np.array([], dtype=np.int64))), 0)

    def test_source_sample_round_trip(self):
        rng = np.random.default_rng(3)
        sample = DIO.SourceSample(rng.normal(size=(4, 6, 3)), rng.integers(0, 7, size=(4, 6)))
        with tempfile.TemporaryDirectory() as tmp:
            image_path = os.path.join(tmp, 'a.img')
            label_path = os.path.join(tmp, 'a.label')
            DIO.write_source_sample(image_path, label_path, sample)
            loaded = DIO.read_source_sample(image_path, label_path)
            np.testing.assert_allclose(loaded.image, sample.image, rtol=1e-6, atol=1e-6)
            np.testing.assert_array_equal(loaded.labels, sample.labels)
            self.assertEqual(loaded.network_input().shape, (3, 4, 6))

            with open(image_path, 'r+b') as image_file:
                image_file.write(b'XXXX')
            with self.assertRaises(FormatError):
                DIO.read_source_sample(image_path, label_path)

    def test_source_sample_shapes(self):
        with self.assertRaises(ShapeError):
            DIO.SourceSample(np.zeros((4, 6, 2)), np.zeros((4, 6)))
        with self.assertRaises(ShapeError):
            DIO.SourceSample(np.zeros((4, 6, 3)), np.zeros((6, 4)))


if __name__ == '__main__':
    unittest.main()
