import unittest
import sys
import os
import base64
import math
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

# Add parent directory to path to import app
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
from app import find_runs, get_download_link, grid_table, load_loss_log, loss_curves, stage_summary


def sample_log():
    return pd.DataFrame({
        "stage": [1, 1, 2, 2, 2],
        "step": [0, 1, 0, 1, 2],
        "global_step": [0, 1, 2, 3, 4],
        "loss": [4.0, 2.0, 3.0, 1.0, 2.0],
        "masked_samples": [0, 0, 1, 2, 1],
        "video_samples": [2, 2, 2, 2, 2],
    })


class TestRunDiscovery(unittest.TestCase):
    def test_find_runs(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            (root / "a").mkdir()
            (root / "a" / "loss_log.csv").write_text("stage,global_step,loss\n")
            (root / "b" / "eval").mkdir(parents=True)
            (root / "b" / "eval" / "validation_grid.csv").write_text("length\n")
            (root / "c").mkdir()
            (root / "c" / "other.csv").write_text("x\n")
            runs = find_runs(root)
            self.assertEqual(sorted(runs), ["a", os.path.join("b", "eval")])
            self.assertEqual(runs["a"], root / "a")
        self.assertEqual(find_runs("/nonexistent/runs"), {})

    def test_load_loss_log(self):
        with tempfile.TemporaryDirectory() as tmp:
            good = Path(tmp) / "loss_log.csv"
            sample_log().to_csv(good, index=False)
            self.assertEqual(len(load_loss_log(good)), 5)
            bad = Path(tmp) / "bad.csv"
            bad.write_text("step,loss\n0,1.0\n")
            with self.assertRaises(ValueError):
                load_loss_log(bad)


class TestCharts(unittest.TestCase):
    def test_loss_curves(self):
        log = sample_log().iloc[::-1]
        curves = loss_curves(log, window=2)
        self.assertEqual(list(curves.index), [0, 1, 2, 3, 4])
        np.testing.assert_allclose(curves["loss"], [4.0, 2.0, 3.0, 1.0, 2.0])
        np.testing.assert_allclose(curves["smoothed"], [4.0, 3.0, 2.5, 2.0, 1.5])

    def test_stage_summary(self):
        summary = stage_summary(sample_log())
        self.assertEqual(list(summary["stage"]), [1, 2])
        self.assertEqual(list(summary["steps"]), [2, 3])
        self.assertEqual(list(summary["first_loss"]), [4.0, 3.0])
        self.assertEqual(list(summary["last_loss"]), [2.0, 2.0])
        np.testing.assert_allclose(summary["masked_fraction"], [0.0, 4 / 6])

    def test_stage_summary_without_video_samples(self):
        summary = stage_summary(sample_log().drop(columns=["video_samples"]))
        self.assertTrue(summary["masked_fraction"].isna().all())

    def test_grid_table_follows_the_ladder(self):
        cells = pd.DataFrame([
            {"length": length, "resolution": res, "loss": float(i)}
            for i, (length, res) in enumerate(
                [("8s", "480p"), ("image", "144p"), ("2s", "240p"), ("image", "480p"), ("2s", "144p"), ("8s", "144p")]
            )
        ])
        table = grid_table(cells)
        self.assertEqual(list(table.index), ["image", "2s", "8s"])
        self.assertEqual(list(table.columns), ["144p", "240p", "480p"])
        self.assertEqual(table.loc["8s", "480p"], 0.0)
        self.assertTrue(math.isnan(table.loc["image", "240p"]))

    def test_download_link(self):
        link = get_download_link("a,b\n1,2\n", "grid.csv")
        self.assertIn('download="grid.csv"', link)
        encoded = link.split("base64,")[1].split('"')[0]
        self.assertEqual(base64.b64decode(encoded).decode(), "a,b\n1,2\n")


if __name__ == '__main__':
    unittest.main()
