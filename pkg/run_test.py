import json
import os
import shutil
import tempfile
import unittest
from contextlib import redirect_stdout
from io import StringIO

from errors import EXIT_CONFIG, EXIT_OK, EXIT_VERIFICATION
from experiment_logger import read_results
from run import build_parser, main

SMALL = {
    "method": "map_only",
    "data": {"n_train": 60, "n_test": 30, "d_in": 4, "n_classes": 3},
    "model": {"hidden": 4, "rank": 2},
    "train": {"epochs": 1},
    "seeds": [0],
}


class TestRun(unittest.TestCase):

    def setUp(self):
        self.tmp_dir = tempfile.mkdtemp(prefix="sba-run-")
        self.config_path = os.path.join(self.tmp_dir, "config.json")
        with open(self.config_path, "w") as f:
            json.dump(SMALL, f)

    def tearDown(self):
        shutil.rmtree(self.tmp_dir, ignore_errors=True)

    def _run(self, *argv):
        return main(list(argv) + ["--out", self.tmp_dir])

    def test_01_parser(self):
        args = build_parser().parse_args(["ablate", "samples", "--grid", "1", "2", "--workers", "3", "--format", "csv"])
        self.assertEqual((args.command, args.axis, args.grid, args.workers, args.format),
                         ("ablate", "samples", ["1", "2"], 3, "csv"))
        with self.assertRaises(SystemExit):
            build_parser().parse_args(["ablate", "temperature"])

    def test_02_no_command_prints_help(self):
        with redirect_stdout(StringIO()) as out:
            self.assertEqual(main([]), EXIT_CONFIG)
        self.assertIn("train", out.getvalue())

    def test_03_train_then_eval(self):
        self.assertEqual(self._run("train", "--config", self.config_path), EXIT_OK)
        self.assertEqual(self._run("eval", "--config", self.config_path, "--format", "csv"), EXIT_OK)
        records = read_results(os.path.join(self.tmp_dir, "results-eval.jsonl"))
        self.assertEqual([r["kind"] for r in records], ["seed", "aggregate"])
        self.assertTrue(os.path.exists(os.path.join(self.tmp_dir, "results-eval.csv")))

    def test_04_seed_override(self):
        self.assertEqual(self._run("train", "--config", self.config_path, "--seed", "5"), EXIT_OK)
        self.assertTrue(os.path.exists(os.path.join(self.tmp_dir, "checkpoint-map_only-seed5.npz")))

    def test_05_config_errors_exit_with_config_code(self):
        bad = os.path.join(self.tmp_dir, "bad.json")
        with open(bad, "w") as f:
            json.dump({"data": {"n_train": 0}}, f)
        self.assertEqual(self._run("train", "--config", bad), EXIT_CONFIG)
        self.assertEqual(self._run("eval", "--config", self.config_path), EXIT_CONFIG)

    def test_06_verify_geometry_exit_codes(self):
        self.assertEqual(self._run("verify-geometry", "--trials", "20", "--seed", "1"), EXIT_OK)
        self.assertEqual(self._run("verify-geometry", "--trials", "50", "--seed", "2", "--corrupt-delta"),
                         EXIT_VERIFICATION)
        self.assertEqual(self._run("verify-geometry", "--trials", "0"), EXIT_CONFIG)

    def test_07_ablate_grid_values_are_typed(self):
        self.assertEqual(self._run("ablate", "kappa0", "--config", self.config_path, "--grid", "0.5"), EXIT_OK)
        (summary,) = [r for r in read_results(os.path.join(self.tmp_dir, "results-ablate-kappa0.jsonl"))
                      if r["kind"] == "aggregate"]
        self.assertEqual(summary["point"], {"axis": "kappa0", "value": 0.5})


if __name__ == '__main__':
    unittest.main()
