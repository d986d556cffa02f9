import os
import tempfile
import unittest

import numpy as np

import udma.autodiff as AD
import udma.model as MDL
import udma.taxonomy as TAX
from udma.errors import EmptyNodeError, FormatError, ShapeError


def tiny_model(seed=0, use_ire=True):
    return MDL.UDMAModel(MDL.ModelConfig(feature_dim=4, base_channels=2, knn_k=2, disc_hidden=8, use_ire=use_ire),
                         seed=seed)


def brute_force_knn(points, k):
    n = len(points)
    neighbors = []
    for i in range(n):
        ranked = sorted((float(np.linalg.norm(points[i] - points[j])), j) for j in range(n) if j != i)
        neighbors.append([j for _, j in ranked[:min(k, n - 1)]])
    return np.array(neighbors, dtype=np.int64).reshape(n, -1)


class ModelTest_pixel_features(unittest.TestCase):

    def test_shape_and_zero_input(self):
        udma_model = tiny_model()
        out = MDL.extract_pixel_features(udma_model.extractor, np.zeros((3, 8, 12)))
        self.assertEqual(out.shape, (4, 8, 12))
        self.assertTrue(np.all(np.isfinite(out.data)))

    def test_indivisible_input(self):
        with self.assertRaises(ShapeError):
            MDL.extract_pixel_features(tiny_model().extractor, np.zeros((3, 6, 8)))


class ModelTest_nodes(unittest.TestCase):

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.rng = np.random.default_rng(7)

    def test_construct_nodes_matches_masked_mean(self):
        f_pixel = AD.Tensor(self.rng.normal(size=(4, 4, 4)))
        linear = MDL.Linear(self.rng, 4, 4)
        linear.bias.data[:] = self.rng.normal(size=4)
        masks = np.zeros((3, 4, 4), dtype=bool)
        masks[0, 0, 0] = True
        masks[1, 1:3, :] = True
        masks[2, 3, ::2] = True
        descriptors = MDL.construct_nodes(f_pixel, masks, linear)
        for i, mask in enumerate(masks):
            pooled = f_pixel.data[:, mask].mean(axis=1)
            np.testing.assert_allclose(descriptors.data[i], pooled @ linear.weight.data + linear.bias.data,
                                       atol=1e-12)

    def test_identical_features_identical_descriptors(self):
        f_pixel = AD.Tensor(np.ones((4, 2, 4)))
        masks = np.zeros((2, 2, 4), dtype=bool)
        masks[0, :, :2] = True
        masks[1, :, 2:] = True
        descriptors = MDL.construct_nodes(f_pixel, masks, MDL.Linear(self.rng, 4, 4))
        np.testing.assert_allclose(descriptors.data[0], descriptors.data[1])

    def test_bad_masks(self):
        f_pixel = AD.Tensor(np.zeros((4, 2, 2)))
        linear = MDL.Linear(self.rng, 4, 4)
        with self.assertRaises(EmptyNodeError):
            MDL.construct_nodes(f_pixel, np.zeros((1, 2, 2), dtype=bool), linear)
        with self.assertRaises(ShapeError):
            MDL.construct_nodes(f_pixel, np.ones((2, 2, 2), dtype=bool), linear)
        with self.assertRaises(ShapeError):
            MDL.construct_nodes(f_pixel, np.ones((1, 3, 2), dtype=bool), linear)

    def test_knn_matches_brute_force(self):
        points = self.rng.normal(size=(6, 4))
        np.testing.assert_array_equal(MDL.knn_edges(points, 3), brute_force_knn(points, 3))
        np.testing.assert_array_equal(MDL.knn_edges(points[:2], 1), [[1], [0]])
        self.assertEqual(MDL.knn_edges(points[:1], 3).shape, (1, 0))

    def test_knn_ties_go_to_lower_index(self):
        points = np.array([[0.0], [1.0], [-1.0], [3.0]])
        np.testing.assert_array_equal(MDL.knn_edges(points, 1)[0], [1])

    def test_edge_conv_direct_evaluation(self):
        descriptors = AD.Tensor(self.rng.normal(size=(6, 4)))
        linear = MDL.Linear(self.rng, 8, 4)
        linear.bias.data[:] = self.rng.normal(size=4)
        enhanced, edges = MDL.edge_conv(descriptors, 3, linear)
        self.assertEqual(len(edges), 18)
        neighbors = brute_force_knn(descriptors.data, 3)
        for i in range(6):
            candidates = []
            for j in neighbors[i]:
                pair = np.concatenate([descriptors.data[i], descriptors.data[j] - descriptors.data[i]])
                candidates.append(np.maximum(pair @ linear.weight.data + linear.bias.data, 0.0))
            np.testing.assert_allclose(enhanced.data[i], np.max(candidates, axis=0), atol=1e-12)

    def test_edge_conv_single_node(self):
        descriptors = AD.Tensor(self.rng.normal(size=(1, 4)))
        linear = MDL.Linear(self.rng, 8, 4)
        enhanced, edges = MDL.edge_conv(descriptors, 4, linear)
        self.assertEqual(edges, [(0, 0)])
        pair = np.concatenate([descriptors.data[0], np.zeros(4)])
        np.testing.assert_allclose(enhanced.data[0], np.maximum(pair @ linear.weight.data, 0.0), atol=1e-12)

    def test_edge_conv_follows_node_order(self):
        points = self.rng.normal(size=(7, 4))
        linear = MDL.Linear(self.rng, 8, 4)
        linear.bias.data[:] = self.rng.normal(size=4)
        enhanced, _ = MDL.edge_conv(AD.Tensor(points), 3, linear)
        for _ in range(3):
            order = self.rng.permutation(len(points))
            permuted, edges = MDL.edge_conv(AD.Tensor(points[order]), 3, linear)
            np.testing.assert_allclose(permuted.data, enhanced.data[order], rtol=0, atol=1e-12)
            self.assertEqual(len(edges), 21)

    def test_edge_conv_two_nodes(self):
        _, edges = MDL.edge_conv(AD.Tensor(self.rng.normal(size=(2, 4))), 1, MDL.Linear(self.rng, 8, 4))
        self.assertEqual(edges, [(0, 1), (1, 0)])


class ModelTest_heads(unittest.TestCase):

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.rng = np.random.default_rng(3)

    def test_expand_without_masks(self):
        f_pixel = AD.Tensor(self.rng.normal(size=(4, 2, 4)))
        features = MDL.expand_and_concat(f_pixel, MDL.NodeSet(np.zeros((0, 2, 4), dtype=bool)))
        self.assertEqual(features.shape, (8, 2, 4))
        np.testing.assert_array_equal(features.data[:4], f_pixel.data)
        np.testing.assert_array_equal(features.data[4:], 0.0)

    def test_expand_scatter_matches_per_pixel(self):
        f_pixel = AD.Tensor(self.rng.normal(size=(4, 4, 4)))
        masks = np.zeros((2, 4, 4), dtype=bool)
        masks[0, :2, :] = True
        masks[1, 3, 1:3] = True
        nodes = MDL.NodeSet(masks, enhanced=AD.Tensor(self.rng.normal(size=(2, 4))))
        features = MDL.expand_and_concat(f_pixel, nodes)
        np.testing.assert_array_equal(features.data[:4], f_pixel.data)
        for row in range(4):
            for col in range(4):
                expected = np.zeros(4)
                for i in range(2):
                    if masks[i, row, col]:
                        expected = nodes.enhanced.data[i]
                np.testing.assert_allclose(features.data[4:, row, col], expected)

    def test_segment(self):
        features = AD.Tensor(self.rng.normal(size=(8, 2, 4)))
        uniform = MDL.segment(features, AD.Tensor(np.zeros((TAX.NUM_CLASSES, 8))), AD.Tensor(np.zeros(TAX.NUM_CLASSES)))
        np.testing.assert_allclose(uniform.data, 1.0 / TAX.NUM_CLASSES)
        weight = AD.Tensor(self.rng.normal(size=(TAX.NUM_CLASSES, 8)))
        bias = self.rng.normal(size=TAX.NUM_CLASSES)
        probabilities = MDL.segment(features, weight, AD.Tensor(bias))
        np.testing.assert_allclose(probabilities.data.sum(axis=0), 1.0, atol=1e-12)
        shifted = MDL.segment(features, weight, AD.Tensor(bias + 5.0))
        np.testing.assert_array_equal(np.argmax(shifted.data, axis=0), np.argmax(probabilities.data, axis=0))

    def test_discriminator(self):
        disc = MDL.Discriminator(self.rng, 8, 16)
        for tensor in disc.parameters().values():
            tensor.data[...] = 0.0
        features = AD.Tensor(self.rng.normal(size=(8, 2, 4)))
        out = MDL.discriminate(features, np.ones((2, 4), dtype=bool), disc)
        self.assertEqual(out.shape, ())
        self.assertAlmostEqual(out.item(), 0.5)
        self.assertIsNone(MDL.discriminate(features, np.zeros((2, 4), dtype=bool), disc))
        trained = MDL.Discriminator(self.rng, 8, 16)
        value = MDL.discriminate(features, np.ones((2, 4), dtype=bool), trained).item()
        self.assertTrue(0.0 < value < 1.0)


class ModelTest_udma_model(unittest.TestCase):

    def test_forward_shapes_and_parameter_split(self):
        udma_model = tiny_model()
        masks = np.zeros((2, 8, 8), dtype=bool)
        masks[0, :4] = True
        masks[1, 4:, :4] = True
        out = udma_model.forward(np.random.default_rng(0).normal(size=(3, 8, 8)), masks)
        self.assertEqual(out.f_pixel.shape, (4, 8, 8))
        self.assertEqual(out.features.shape, (8, 8, 8))
        self.assertEqual(out.probabilities.shape, (TAX.NUM_CLASSES, 8, 8))
        self.assertEqual(len(out.nodes.edges), 2)
        generator = set(udma_model.generator_parameters())
        discriminator = set(udma_model.discriminator_parameters())
        self.assertFalse(generator & discriminator)
        self.assertEqual(generator | discriminator, set(udma_model.named_parameters()))

    def test_without_ire_node_channels_are_zero(self):
        udma_model = tiny_model(use_ire=False)
        masks = np.ones((1, 8, 8), dtype=bool)
        out = udma_model.forward(np.ones((3, 8, 8)), masks)
        np.testing.assert_array_equal(out.features.data[4:], 0.0)

    def test_checkpoint_round_trip(self):
        udma_model = tiny_model(seed=5)
        udma_model.seg_bias.data[:] = np.arange(TAX.NUM_CLASSES)
        network_input = np.random.default_rng(1).normal(size=(3, 8, 8))
        masks = np.ones((1, 8, 8), dtype=bool)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'model.ckpt')
            MDL.save_checkpoint(path, udma_model)
            loaded = MDL.load_checkpoint(path)
            self.assertEqual(loaded.cfg, udma_model.cfg)
            for name, tensor in udma_model.named_parameters().items():
                np.testing.assert_array_equal(loaded.named_parameters()[name].data, tensor.data)
            np.testing.assert_array_equal(loaded.predict(network_input, masks), udma_model.predict(network_input, masks))

            with open(path, 'rb') as checkpoint:
                payload = checkpoint.read()
            with open(path, 'wb') as checkpoint:
                checkpoint.write(payload[:-3])
            with self.assertRaises(FormatError):
                MDL.load_checkpoint(path)


class ModelTest_node_masks(unittest.TestCase):

    def test_source_regions_are_eight_connected(self):
        labels = np.array([[TAX.ROAD, TAX.CAR, TAX.ROAD],
                           [TAX.CAR, TAX.IGNORE_ID, TAX.ROAD],
                           [TAX.IGNORE_ID, TAX.IGNORE_ID, TAX.IGNORE_ID]])
        masks = MDL.source_node_masks(labels)
        self.assertEqual(len(masks), 3)
        self.assertEqual(masks.sum(axis=0).max(), 1)
        car_masks = [m for m in masks if np.all(labels[m] == TAX.CAR)]
        self.assertEqual(len(car_masks), 1)
        self.assertEqual(int(car_masks[0].sum()), 2)

    def test_all_ignore_has_no_nodes(self):
        self.assertEqual(MDL.source_node_masks(np.full((2, 2), TAX.IGNORE_ID)).shape, (0, 2, 2))

    def test_target_masks_follow_visible_components(self):
        component_image = np.array([[0, 0, 3], [-1, 3, 5]])
        valid = np.array([[True, True, True], [False, True, False]])
        masks = MDL.target_node_masks(component_image, valid)
        self.assertEqual(len(masks), 2)
        np.testing.assert_array_equal(masks[1], component_image == 3)


if __name__ == '__main__':
    unittest.main()
