"""
Unit Tests for Checkpoints and Output Manifests
"""
import json
import os
import tempfile
import unittest
from pathlib import Path

import numpy as np
from numpy.testing import assert_array_equal

from config.config import WattNetConfig
from src.core.errors import ArtifactError, ParseError
from src.core.wattnet import init_params
from src.utils.checkpoint import load_checkpoint, save_checkpoint
from src.utils.manifest import (manifest_path, read_manifest, require_artifact, sha256_file, write_manifest)


def tiny_config() -> WattNetConfig:
    return WattNetConfig(input_width=5, compressed_width=4, n_blocks=2, kernel_size=2, dilation_schedule=[1, 2],
                         d_k=3, head_hidden=8, n_classes=4, window_len=12)


class TestCheckpoint(unittest.TestCase):
    """Test cases for the binary parameter file."""

    def setUp(self):
        """Setup a temp directory and parameters."""
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "model", "checkpoint.bin")
        self.params = init_params(tiny_config(), 9)

    def tearDown(self):
        """Cleanup temp directory."""
        self.tmp.cleanup()

    def test_round_trip_is_exact(self):
        """Test every tensor and the config survive bit for bit."""
        save_checkpoint(self.params, self.path)
        back = load_checkpoint(self.path)
        self.assertEqual(back.config, self.params.config)
        self.assertEqual(back.names, self.params.names)
        for name in self.params.names:
            assert_array_equal(back[name], self.params[name])
            self.assertEqual(back[name].dtype, np.float64)

    def test_same_params_same_bytes(self):
        """Test saving twice writes identical files."""
        other = os.path.join(self.tmp.name, "again.bin")
        save_checkpoint(self.params, self.path)
        save_checkpoint(init_params(tiny_config(), 9), other)
        self.assertEqual(sha256_file(self.path), sha256_file(other))

    def test_missing(self):
        """Test a missing file names the producing command."""
        with self.assertRaises(ArtifactError) as ctx:
            load_checkpoint(self.path)
        self.assertEqual(ctx.exception.producer, "train")
        self.assertIn("run `train` first", str(ctx.exception))

    def test_truncated(self):
        """Test a file cut inside the tensor data."""
        save_checkpoint(self.params, self.path)
        raw = Path(self.path).read_bytes()
        Path(self.path).write_bytes(raw[:-16])
        with self.assertRaises(ParseError):
            load_checkpoint(self.path)

    def test_corrupt_header(self):
        """Test garbage and foreign headers."""
        Path(self.path).parent.mkdir(parents=True, exist_ok=True)
        Path(self.path).write_bytes(b"\x03")
        with self.assertRaises(ParseError):
            load_checkpoint(self.path)
        header = json.dumps({"magic": "something-else", "version": 1}).encode("utf-8")
        Path(self.path).write_bytes(len(header).to_bytes(8, "little") + header)
        with self.assertRaises(ParseError):
            load_checkpoint(self.path)


class TestManifest(unittest.TestCase):
    """Test cases for artifact manifests."""

    def setUp(self):
        """Setup an output and an input file."""
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        (self.root / "data").mkdir()
        self.input = self.root / "data" / "spot.csv"
        self.input.write_text("date,USDCNY\n2015-01-01,6.2\n", encoding="utf-8")
        self.output = self.root / "labels_optimal.csv"
        self.output.write_text("date,label\n", encoding="utf-8")

    def tearDown(self):
        """Cleanup temp directory."""
        self.tmp.cleanup()

    def test_contents(self):
        """Test digests, relative paths and the absence of timestamps."""
        target = write_manifest(str(self.output), "label", [str(self.input)], "abc123", root=str(self.root),
                                extra={"kind": "optimal"})
        self.assertEqual(target, manifest_path(str(self.output)))
        manifest = read_manifest(str(self.output))
        self.assertEqual(manifest["command"], "label")
        self.assertEqual(manifest["output"]["path"], "labels_optimal.csv")
        self.assertEqual(manifest["inputs"][0]["path"], "data/spot.csv")
        self.assertEqual(manifest["inputs"][0]["sha256"], sha256_file(str(self.input)))
        self.assertEqual(manifest["extra"], {"kind": "optimal"})
        self.assertIn("numpy", manifest["versions"])
        self.assertNotIn("timestamp", json.dumps(manifest))

    def test_rerun_identical(self):
        """Test rewriting a manifest for unchanged files is byte-identical."""
        write_manifest(str(self.output), "label", [str(self.input)], "abc123", root=str(self.root))
        first = manifest_path(str(self.output)).read_bytes()
        write_manifest(str(self.output), "label", [str(self.input)], "abc123", root=str(self.root))
        self.assertEqual(manifest_path(str(self.output)).read_bytes(), first)

    def test_require_artifact(self):
        """Test missing files and missing manifests name the producer."""
        with self.assertRaises(ArtifactError) as ctx:
            require_artifact(self.root / "panel.csv", "features")
        self.assertIn("run `features` first", str(ctx.exception))
        with self.assertRaises(ArtifactError) as ctx:
            require_artifact(self.output, "label")
        self.assertIn("run `label` first", str(ctx.exception))
        write_manifest(str(self.output), "label", [], "abc123")
        self.assertEqual(require_artifact(self.output, "label"), self.output)

    def test_schema_version(self):
        """Test manifests from another schema are refused."""
        write_manifest(str(self.output), "label", [], "abc123")
        target = manifest_path(str(self.output))
        data = json.loads(target.read_text(encoding="utf-8"))
        data["schema_version"] = 99
        target.write_text(json.dumps(data), encoding="utf-8")
        with self.assertRaises(ArtifactError):
            read_manifest(str(self.output), "label")


if __name__ == '__main__':
    unittest.main()
