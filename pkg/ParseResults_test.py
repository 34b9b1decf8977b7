import csv
import os
import shutil
import tempfile
import unittest

from experiment_logger import ExperimentLogger
from ParseResults import aggregate_rows, flatten, result_rows, results_to_csv


class TestParseResults(unittest.TestCase):

    def setUp(self):
        self.tmp_dir = tempfile.mkdtemp(prefix="sba-parse-")

    def tearDown(self):
        shutil.rmtree(self.tmp_dir, ignore_errors=True)

    def test_01_flatten(self):
        payload = {"seed": 1, "config": {"samples": 10}, "metrics": {"test_id": {"ece": 0.1, "auroc": None}},
                   "seeds": [0, 1], "method": "sba"}
        self.assertEqual(flatten(payload), {"seed": 1, "metrics.test_id.ece": 0.1, "metrics.test_id.auroc": None,
                                            "method": "sba"})

    def test_02_columns_lead_with_keys(self):
        columns, rows = result_rows([{"kind": "seed", "seed": 0, "z": 1.0}, {"kind": "aggregate", "a": 2.0}])
        self.assertEqual(columns, ["kind", "seed", "a", "z"])
        self.assertEqual(len(rows), 2)
        self.assertEqual(result_rows([]), ([], []))

    def test_03_jsonl_to_csv(self):
        logger = ExperimentLogger("eval", 2, self.tmp_dir)
        logger.record(0, {"kind": "seed", "seed": 0, "metrics": {"test_id": {"ece": 0.25}}})
        logger.record(1, {"kind": "seed", "seed": 1, "metrics": {"test_id": {"ece": 0.5}}})
        path = logger.write_results([{"kind": "aggregate", "metrics": {"test_id.ece": {"mean": 0.375, "n": 2}}}])
        csv_path = results_to_csv(path)
        self.assertEqual(csv_path, os.path.join(self.tmp_dir, "results-eval.csv"))
        with open(csv_path, newline="") as f:
            rows = list(csv.DictReader(f))
        self.assertEqual([r["kind"] for r in rows], ["seed", "seed", "aggregate"])
        self.assertEqual(rows[1]["metrics.test_id.ece"], "0.5")
        self.assertEqual(rows[0]["metrics.test_id.ece.mean"], "")
        aggregates = aggregate_rows(csv_path)
        self.assertEqual(len(aggregates), 1)
        self.assertEqual(float(aggregates[0]["metrics.test_id.ece.mean"]), 0.375)


if __name__ == '__main__':
    unittest.main()
