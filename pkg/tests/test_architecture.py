"""
Tests for the architecture string parser
"""

import unittest

from torch import nn

from services.architecture import ArchitectureError, PRESETS, parse_architecture
from services.network import hidden_units, layer_kind


class TestParseArchitecture(unittest.TestCase):
    """Test cases for parse_architecture"""

    def kinds(self, net):
        return [layer_kind(layer) for layer in net.layers]

    def test_toy_preset(self):
        net = parse_architecture("toy", (2,), 2)
        self.assertEqual(self.kinds(net), ["linear", "relu"] * 3 + ["linear"])
        self.assertEqual(hidden_units(net), 300)
        self.assertEqual(net.architecture, "fc 100; fc 100; fc 100; fc 2")

    def test_small_preset_on_mnist(self):
        net = parse_architecture("small", (1, 28, 28), 10)
        self.assertEqual(
            self.kinds(net),
            ["conv2d", "relu", "conv2d", "relu", "flatten", "linear", "relu", "linear"],
        )
        self.assertEqual(net.layer_shapes()[0], (16, 13, 13))
        self.assertEqual(net.layer_shapes()[2], (32, 10, 10))
        self.assertEqual(hidden_units(net), 6004)

    def test_small_preset_on_cifar(self):
        net = parse_architecture("small", (3, 32, 32), 10)
        self.assertEqual(hidden_units(net), 8308)

    def test_every_preset_builds_on_mnist(self):
        for name in PRESETS:
            net = parse_architecture(name, (1, 28, 28) if name != "toy" else (784,), 10)
            self.assertEqual(net.num_classes, 10)

    def test_kernel_width_by_height(self):
        net = parse_architecture("conv 4 3x2+1; fc 2", (1, 5, 5), 2)
        conv = net.layers[0]
        self.assertEqual(tuple(conv.kernel_size), (2, 3))
        self.assertEqual(net.layer_shapes()[0], (4, 4, 3))

    def test_padding(self):
        net = parse_architecture("conv 8 3x3+1 p1; fc 10", (1, 28, 28), 10)
        self.assertEqual(net.layer_shapes()[0], (8, 28, 28))

    def test_classes_placeholder(self):
        net = parse_architecture("fc 16; fc <classes>", (4,), 3)
        self.assertEqual(net.num_classes, 3)

    def test_whitespace_and_case(self):
        net = parse_architecture("  FC 8 ;fc   2 ", (2,), 2)
        self.assertEqual(self.kinds(net), ["linear", "relu", "linear"])

    def test_explicit_flatten(self):
        net = parse_architecture("flatten; fc 2", (1, 3, 3), 2)
        self.assertEqual(self.kinds(net), ["flatten", "linear"])
        self.assertIsInstance(net.layers[1], nn.Linear)
        self.assertEqual(net.layers[1].in_features, 9)

    def test_grammar_errors(self):
        for text in ["", "fc", "fc ten", "conv 16 4x4", "pool 2", "fc 10;", "fc 0"]:
            with self.assertRaises(ArchitectureError, msg=text):
                parse_architecture(text, (2,), 10)

    def test_conv_needs_image_input(self):
        with self.assertRaises(ArchitectureError):
            parse_architecture("conv 4 2x2+1; fc 2", (8,), 2)

    def test_conv_too_large(self):
        with self.assertRaises(ArchitectureError):
            parse_architecture("conv 4 9x9+1; fc 2", (1, 5, 5), 2)

    def test_last_layer_must_be_fc(self):
        with self.assertRaises(ArchitectureError):
            parse_architecture("fc 8; conv 4 2x2+1", (1, 5, 5), None)

    def test_class_count_mismatch(self):
        with self.assertRaises(ArchitectureError):
            parse_architecture("fc 8; fc 3", (2,), 2)

    def test_preset_needs_class_count(self):
        with self.assertRaises(ArchitectureError):
            parse_architecture("toy", (2,))


if __name__ == "__main__":
    unittest.main()
