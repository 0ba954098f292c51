import unittest
from unittest.mock import patch
import sys
import os
import tempfile

import numpy as np

# Add parent directory to path to import utils
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
from utils import resolve_seed, format_number, smooth, ensure_dir, slugify


class TestUtils(unittest.TestCase):
    def test_resolve_seed_prefers_environment(self):
        with patch.dict(os.environ, {"OPEN_SORA_KIT_SEED": "42"}):
            self.assertEqual(resolve_seed(7), 42)

    def test_resolve_seed_ignores_bad_environment(self):
        with patch.dict(os.environ, {"OPEN_SORA_KIT_SEED": "abc"}):
            self.assertEqual(resolve_seed(7), 7)
        with patch.dict(os.environ, {"OPEN_SORA_KIT_SEED": "-3"}):
            self.assertEqual(resolve_seed(7), 7)
        with patch.dict(os.environ, {"OPEN_SORA_KIT_SEED": ""}):
            self.assertEqual(resolve_seed(7), 7)

    def test_format_number(self):
        self.assertEqual(format_number(5.5), "5.5")
        self.assertEqual(format_number(10.0), "10")
        self.assertEqual(format_number(10), "10")
        self.assertEqual(format_number(0.1), "0.1")
        self.assertEqual(float(format_number(1 / 3)), 1 / 3)

    def test_smooth(self):
        out = smooth([1.0, 3.0, 5.0, 7.0], 2)
        np.testing.assert_allclose(out, [1.0, 2.0, 4.0, 6.0])
        np.testing.assert_allclose(smooth([2.0, 4.0], 50), [2.0, 3.0])
        np.testing.assert_allclose(smooth([2.0, 4.0], 0), [2.0, 4.0])

    def test_ensure_dir(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = ensure_dir(os.path.join(tmp, "a", "b"))
            self.assertTrue(path.is_dir())
            self.assertEqual(ensure_dir(path), path)

    def test_slugify(self):
        self.assertEqual(slugify("Hello World"), "hello-world")
        self.assertEqual(slugify("  Spaces  at  edges  "), "spaces-at-edges")
        self.assertEqual(slugify("Special Ch@r$!"), "special-chr")
        self.assertEqual(slugify("Multiple---Hyphens"), "multiple-hyphens")

if __name__ == '__main__':
    unittest.main()
