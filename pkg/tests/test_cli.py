import unittest
from unittest.mock import patch
import sys
import os
import io
import tempfile
from pathlib import Path

import pandas as pd

# Add parent directory to path to import the kit modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
import pipeline
from cli import build_parser, main
from config import SEED_ENV_VAR
from numerics import load_vten

SMALL_RUN = """
seed = 0
[model]
hidden = 16
depth = 1
text_dim = 16
max_text_len = 8
max_grid = 4
[flow]
steps = 3
[codec]
spatial_steps = 1
stage_steps = [1, 1, 1]
batch_size = 1
[synth]
count = 3
resolutions = [16]
aspects = ["1:1"]
frames = [17]
[stages.1]
steps = 2
[buckets]
rows = [{resolution = 16, frames = 16, batch_size = 1}]
[validation]
lengths = { image = 1, 2s = 8 }
resolutions = ["144p", "240p"]
clips = 1
"""


def run(argv):
    """Exit code, stdout and stderr of one CLI invocation."""
    out, err = io.StringIO(), io.StringIO()
    with patch("sys.stdout", out), patch("sys.stderr", err), patch.dict(os.environ):
        os.environ.pop(SEED_ENV_VAR, None)
        code = main(argv)
    return code, out.getvalue(), err.getvalue()


class TestParser(unittest.TestCase):
    def test_subcommands(self):
        parser = build_parser()
        args = parser.parse_args(["sample", "--checkpoint", "c", "--codec", "k", "--prompt", "red disk", "--out", "o",
                                  "--condition", "first:1", "--guidance", "2.5"])
        self.assertEqual((args.command, args.condition, args.guidance, args.frames), ("sample", "first:1", 2.5, 17))
        self.assertIsNone(args.steps)
        with patch("sys.stderr", io.StringIO()):
            with self.assertRaises(SystemExit):
                parser.parse_args(["train", "--data", "d"])
            with self.assertRaises(SystemExit):
                parser.parse_args([])


class TestCommands(unittest.TestCase):
    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.root = Path(tmp.name)
        self.config = self.root / "run.toml"
        self.config.write_text(SMALL_RUN)

    def kit(self, *argv):
        return run(["--config", str(self.config), *argv])

    def test_errors_exit_with_code_two(self):
        code, _, err = run(["--config", str(self.root / "missing.toml"), "model-describe"])
        self.assertEqual(code, 2)
        self.assertIn("error:", err)
        code, _, err = self.kit("codec-roundtrip", "--codec", str(self.root / "codec"))
        self.assertEqual(code, 2)
        self.assertIn("--data or --input", err)

    def test_model_describe(self):
        code, out, _ = self.kit("model-describe")
        self.assertEqual(code, 0)
        table = pd.read_csv(io.StringIO(out))
        self.assertEqual(table.iloc[-1]["component"], "total")
        self.assertEqual(table.iloc[-1]["parameters"], table["parameters"].iloc[:-1].sum())

    def test_synth_then_bucket_plan(self):
        data = self.root / "data"
        code, out, _ = self.kit("synth", "--out", str(data))
        self.assertEqual(code, 0)
        self.assertIn("Wrote 3 clips", out)
        self.assertEqual(len(pd.read_csv(data / "manifest.csv")), 3)

        code, out, _ = self.kit("bucket-plan", "--data", str(data), "--dry-run", "--out", str(self.root / "plan"))
        self.assertEqual(code, 0)
        report = pd.read_csv(io.StringIO(out))
        self.assertEqual(report.iloc[-1]["bucket"], "all")
        self.assertEqual(report.iloc[-1]["batches"], 3)
        self.assertFalse((self.root / "plan").exists())

    def test_codec_train_train_and_sample(self):
        data, codec, runs, samples = (self.root / name for name in ("data", "codec", "runs", "samples"))
        self.assertEqual(self.kit("synth", "--out", str(data))[0], 0)
        self.assertEqual(self.kit("codec-train", "--data", str(data), "--out", str(codec))[0], 0)
        self.assertTrue((codec / "codec_loss.csv").exists())

        code, out, _ = self.kit("train", "--data", str(data), "--codec", str(codec), "--out", str(runs))
        self.assertEqual(code, 0)
        self.assertIn("Trained 2 steps", out)
        self.assertEqual(len(pd.read_csv(runs / "loss_log.csv")), 2)

        code, _, _ = self.kit("sample", "--checkpoint", str(runs / "stage1"), "--codec", str(codec),
                              "--prompt", "red square", "--out", str(samples), "--frames", "5", "--steps", "2")
        self.assertEqual(code, 0)
        self.assertEqual(load_vten(samples / "red-square.video.vten").shape, (5, 16, 16, 3))
        self.assertEqual((samples / "red-square.txt").read_text(), "red square\n")

        with patch("pipeline.generate", wraps=pipeline.generate) as generate:
            code, _, _ = self.kit("sample", "--checkpoint", str(runs / "stage1"), "--codec", str(codec),
                                  "--prompt", "blue disk", "--out", str(samples), "--frames", "1")
        self.assertEqual(code, 0)
        self.assertEqual(generate.call_args.kwargs["steps"], 3)

        code, out, _ = self.kit("validate", "--checkpoint", str(runs / "stage1"), "--codec", str(codec),
                                "--out", str(runs / "validation.csv"))
        self.assertEqual(code, 0)
        cells = pd.read_csv(runs / "validation.csv")
        self.assertEqual(len(cells), 4)
        self.assertEqual(set(cells["length"]), {"image", "2s"})


if __name__ == '__main__':
    unittest.main()
