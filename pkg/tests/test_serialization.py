"""
Tests for checkpoint manifests, blobs and weight export
"""

import json
import os
import shutil
import tempfile
import unittest

import numpy as np
import torch

from models.manifest_models import NormalizationRecord
from services.architecture import parse_architecture
from services.network import init_parameters
from services.serialization import (
    SerializationError,
    export_weights_csv,
    load_checkpoint,
    load_manifest,
    save_checkpoint,
)
from services.tensor import Rng
from services.training import Adam


class TestCheckpoints(unittest.TestCase):
    """Test cases for save_checkpoint / load_checkpoint"""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.path = os.path.join(self.temp_dir, "model.json")
        self.net = init_parameters(parse_architecture("small", (1, 12, 12), 3), Rng(0))

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_round_trip(self):
        """Parameters and logits survive a save / load cycle bit for bit"""
        record = NormalizationRecord(mean=[0.1307], std=[0.3081], applied=True)
        save_checkpoint(self.net, self.path, normalization=record, clip_inputs=False, training={"step": 42})
        loaded = load_checkpoint(self.path)
        for (name, a), (_, b) in zip(self.net.named_parameters(), loaded.network.named_parameters()):
            self.assertTrue(torch.equal(a, b), name)
        x = Rng(1).uniform((4, 1, 12, 12))
        with torch.no_grad():
            self.assertTrue(torch.equal(self.net(x), loaded.network(x)))
        self.assertEqual(loaded.manifest.normalization, record)
        self.assertFalse(loaded.manifest.clip_inputs)
        self.assertEqual(loaded.step, 42)
        self.assertEqual(loaded.network.architecture, self.net.architecture)

    def test_blob_is_little_endian_float64(self):
        manifest = save_checkpoint(self.net, self.path)
        blob = os.path.join(self.temp_dir, manifest.blob_file)
        values = np.fromfile(blob, dtype="<f8")
        total = sum(p.numel() for p in self.net.parameters())
        self.assertEqual(values.size, total)
        first = self.net.layers[0].weight.detach().reshape(-1).numpy()
        np.testing.assert_array_equal(values[:first.size], first)

    def test_optimizer_state_and_rng(self):
        params = self.net.named_parameter_dict()
        optimizer = Adam(params)
        grads = {name: torch.ones_like(p) for name, p in params.items()}
        optimizer.step(grads, 1e-3)
        rng = Rng(5)
        rng.uniform((3,))
        save_checkpoint(self.net, self.path, moments=optimizer.moments(), rng_state=rng.get_state())
        loaded = load_checkpoint(self.path)
        self.assertEqual(set(loaded.moments), set(params))
        for name, (exp_avg, exp_avg_sq, step) in optimizer.moments().items():
            stored = loaded.moments[name]
            self.assertTrue(torch.equal(stored[0], exp_avg))
            self.assertTrue(torch.equal(stored[1], exp_avg_sq))
            self.assertEqual(stored[2], step)
        self.assertEqual(loaded.rng_state, rng.get_state())

    def test_missing_optimizer_state(self):
        params = self.net.named_parameter_dict()
        optimizer = Adam(params)
        optimizer.step({name: torch.ones_like(p) for name, p in params.items()}, 1e-3)
        save_checkpoint(self.net, self.path, moments=optimizer.moments())
        with open(self.path) as f:
            document = json.load(f)
        document["tensors"] = [t for t in document["tensors"] if t["name"] != "adam.layers.0.weight.exp_avg_sq"]
        with open(self.path, "w") as f:
            json.dump(document, f)
        with self.assertRaisesRegex(SerializationError, "missing optimizer state for layers.0.weight"):
            load_checkpoint(self.path)

    def test_tampered_blob(self):
        manifest = save_checkpoint(self.net, self.path)
        blob = os.path.join(self.temp_dir, manifest.blob_file)
        with open(blob, "r+b") as f:
            f.seek(8)
            f.write(b"\x00" * 8)
        with self.assertRaisesRegex(SerializationError, "checksum"):
            load_checkpoint(self.path)

    def test_missing_blob(self):
        manifest = save_checkpoint(self.net, self.path)
        os.remove(os.path.join(self.temp_dir, manifest.blob_file))
        with self.assertRaises(SerializationError):
            load_checkpoint(self.path)

    def test_missing_manifest(self):
        with self.assertRaises(SerializationError):
            load_manifest(os.path.join(self.temp_dir, "absent.json"))

    def test_shape_mismatch(self):
        save_checkpoint(self.net, self.path)
        with open(self.path) as f:
            document = json.load(f)
        document["tensors"][0]["shape"] = [1, 2, 3]
        with open(self.path, "w") as f:
            json.dump(document, f)
        with self.assertRaises(SerializationError):
            load_checkpoint(self.path)

    def test_unsupported_version(self):
        save_checkpoint(self.net, self.path)
        with open(self.path) as f:
            document = json.load(f)
        document["format_version"] = 99
        with open(self.path, "w") as f:
            json.dump(document, f)
        with self.assertRaisesRegex(SerializationError, "format version"):
            load_checkpoint(self.path)


class TestWeightExport(unittest.TestCase):
    """Test cases for the CSV weight dump"""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_one_file_per_tensor(self):
        net = init_parameters(parse_architecture("fc 3; fc 2", (4,), 2), Rng(0))
        paths = export_weights_csv(net, self.temp_dir)
        self.assertEqual(len(paths), 4)
        first = os.path.join(self.temp_dir, "layers.0.weight.csv")
        with open(first) as f:
            self.assertEqual(f.readline().strip(), "# shape=3x4")
        values = np.loadtxt(first, delimiter=",")
        np.testing.assert_array_equal(values, net.layers[0].weight.detach().reshape(-1).numpy())


if __name__ == "__main__":
    unittest.main()
