import csv
import math
import os
import shutil
import tempfile
import unittest

import numpy as np
from sklearn.metrics import roc_auc_score

from ReliabilityMetrics import (
    COVERAGE_GRID,
    PredictionRecord,
    accuracy_at_coverage,
    accuracy_coverage,
    brier,
    decompose_batch,
    decompose_uncertainty,
    ece,
    epistemic_fraction,
    nll,
    ood_auroc,
    records_from_arrays,
    reliability_bins_csv,
    selective_auroc,
    split_metrics,
    uncertainty_scores,
)


def pair_auroc(positive_scores, negative_scores):
    total = 0.0
    for p in positive_scores:
        for n in negative_scores:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(positive_scores) * len(negative_scores))


def direct_entropy(p):
    return -sum(x * math.log(x) for x in p if x > 0)


def random_simplex(rng, shape):
    raw = rng.gamma(0.5, size=shape)
    return raw / raw.sum(axis=-1, keepdims=True)


class TestReliabilityMetrics(unittest.TestCase):
    SEED = 11

    def setUp(self):
        self.rng = np.random.default_rng(self.SEED)
        self.tmp_dir = tempfile.mkdtemp(prefix="sba-metrics-")

    def tearDown(self):
        shutil.rmtree(self.tmp_dir, ignore_errors=True)

    def test_01_record_validation(self):
        PredictionRecord([0.25, 0.75], 1)
        with self.assertRaises(ValueError):
            PredictionRecord([0.5, 0.6], 0)
        with self.assertRaises(ValueError):
            PredictionRecord([1.2, -0.2], 0)
        with self.assertRaises(ValueError):
            PredictionRecord([0.5, 0.5], 2)
        with self.assertRaises(ValueError):
            PredictionRecord([0.5, 0.5], 0, per_sample_probs=np.ones((3, 3)) / 3)
        with self.assertRaises(ValueError):
            records_from_arrays(np.full((3, 2), 0.5), [0, 1])

    def test_02_ece_hand_cases(self):
        perfect = [PredictionRecord([1.0, 0.0], 0), PredictionRecord([0.0, 1.0], 1)]
        self.assertEqual(ece(perfect).ece, 0.0)
        report = ece([PredictionRecord([0.9, 0.1], 0), PredictionRecord([0.6, 0.4], 1)])
        self.assertAlmostEqual(report.ece, 0.35, places=12)
        self.assertEqual(len(report.bins), 15)
        self.assertEqual(sum(b[4] for b in report.bins), 2)
        self.assertEqual(report.bins[0], (0.0, 1.0 / 15, None, None, 0))
        self.assertEqual(report.bins[-1][1], 1.0)
        with self.assertRaises(ValueError):
            ece([])

    def test_03_bin_edges(self):
        # A confidence on an interior edge belongs to the upper bin; 1.0 lands in the last bin.
        report = ece([PredictionRecord([0.5, 0.5], 0), PredictionRecord([1.0, 0.0], 0)], n_bins=2)
        self.assertEqual([b[4] for b in report.bins], [0, 2])
        self.assertAlmostEqual(report.ece, 0.25, places=12)

    def test_04_ece_is_permutation_invariant_and_bounded(self):
        probs = random_simplex(self.rng, (200, 4))
        labels = self.rng.integers(0, 4, 200)
        records = records_from_arrays(probs, labels)
        order = self.rng.permutation(200)
        shuffled = [records[i] for i in order]
        self.assertAlmostEqual(ece(records).ece, ece(shuffled).ece, places=12)
        report = ece(records)
        self.assertTrue(0.0 <= report.ece <= 1.0)
        self.assertEqual(sum(b[4] for b in report.bins), 200)

    def test_05_brier(self):
        self.assertEqual(brier([PredictionRecord([0.0, 1.0, 0.0], 1)]), 0.0)
        self.assertAlmostEqual(brier([PredictionRecord([0.5, 0.5], 1)]), 0.5, places=14)
        records = [PredictionRecord([0.7, 0.2, 0.1], 0), PredictionRecord([0.2, 0.5, 0.3], 2),
                   PredictionRecord([1 / 3, 1 / 3, 1 / 3], 1)]
        expected = ((0.3 ** 2 + 0.2 ** 2 + 0.1 ** 2) + (0.2 ** 2 + 0.5 ** 2 + 0.7 ** 2)
                    + ((1 / 3) ** 2 + (2 / 3) ** 2 + (1 / 3) ** 2)) / 3
        self.assertAlmostEqual(brier(records), expected, places=12)

    def test_06_nll(self):
        self.assertEqual(nll([PredictionRecord([1.0, 0.0], 0)]), 0.0)
        e = math.exp(-1.0)
        self.assertAlmostEqual(nll([PredictionRecord([e, 1 - e], 0)]), 1.0, places=12)
        records = [PredictionRecord([0.5, 0.5], 0), PredictionRecord([0.25, 0.75], 1),
                   PredictionRecord([0.1, 0.9], 0), PredictionRecord([0.8, 0.2], 0)]
        expected = -(math.log(0.5) + math.log(0.75) + math.log(0.1) + math.log(0.8)) / 4
        self.assertAlmostEqual(nll(records), expected, places=12)
        self.assertAlmostEqual(nll([PredictionRecord([1.0, 0.0], 1)]), -math.log(1e-12), places=9)

    def test_07_selective_auroc(self):
        self.assertEqual(selective_auroc([0.1, 0.9], [True, False]), 1.0)
        self.assertEqual(selective_auroc([0.4, 0.4, 0.4], [True, False, True]), 0.5)
        uncertainty = np.array([0.2, 0.5, 0.5, 0.9, 0.1, 0.7])
        correct = np.array([True, False, True, False, True, True])
        expected = pair_auroc(uncertainty[~correct], uncertainty[correct])
        self.assertAlmostEqual(selective_auroc(uncertainty, correct), expected, places=14)
        self.assertAlmostEqual(selective_auroc(uncertainty, correct), roc_auc_score(~correct, uncertainty), places=14)
        with self.assertRaises(ValueError):
            selective_auroc([0.1, 0.2], [True, True])
        with self.assertRaises(ValueError):
            selective_auroc([0.1, 0.2], [False, False])

    def test_08_ood_auroc(self):
        self.assertEqual(ood_auroc([0.1, 0.2, 0.3], [0.5, 0.9]), 1.0)
        self.assertEqual(ood_auroc([0.5, 0.9], [0.1, 0.2, 0.3]), 0.0)
        entropy_id = np.array([0.3, 0.8, 0.1, 0.5, 0.5])
        entropy_ood = np.array([0.5, 0.9, 0.2, 1.1, 0.7])
        self.assertAlmostEqual(ood_auroc(entropy_id, entropy_ood), pair_auroc(entropy_ood, entropy_id), places=14)
        with self.assertRaises(ValueError):
            ood_auroc([], [0.1])
        draws = self.rng.standard_normal(4000)
        self.assertAlmostEqual(ood_auroc(draws[:2000], draws[2000:]), 0.5, delta=0.04)

    def test_09_auroc_invariant_under_monotone_maps(self):
        scores = self.rng.standard_normal(60)
        correct = self.rng.random(60) < 0.6
        base = selective_auroc(scores, correct)
        self.assertAlmostEqual(selective_auroc(np.exp(scores), correct), base, places=14)
        self.assertAlmostEqual(selective_auroc(3.0 * scores - 7.0, correct), base, places=14)
        id_scores, ood_scores = scores[:30], scores[30:] + 0.5
        base = ood_auroc(id_scores, ood_scores)
        self.assertAlmostEqual(ood_auroc(np.exp(id_scores), np.exp(ood_scores)), base, places=14)
        self.assertAlmostEqual(ood_auroc(2.0 * id_scores + 1.0, 2.0 * ood_scores + 1.0), base, places=14)

    def test_10_accuracy_coverage(self):
        uncertainty = np.array([0.5, 0.1, 0.9, 0.3, 0.7, 0.2, 0.8, 0.4, 0.6, 0.0])
        correct = np.array([1, 1, 0, 1, 0, 1, 0, 1, 1, 1], dtype=bool)
        curve = accuracy_coverage(uncertainty, correct)
        self.assertEqual(len(curve), len(COVERAGE_GRID))
        self.assertEqual(accuracy_at_coverage(curve, 1.0), 0.7)
        # The 8 most certain drop 0.9 and 0.8, both wrong, leaving one error (0.7) among 8.
        self.assertAlmostEqual(accuracy_at_coverage(curve, 0.8), 7 / 8, places=14)
        self.assertEqual(accuracy_at_coverage(curve, 0.7), 1.0)
        self.assertEqual(accuracy_at_coverage(curve, 0.0), 1.0)
        with self.assertRaises(ValueError):
            accuracy_at_coverage(curve, 0.333)
        self.assertEqual(accuracy_coverage([], []), [])

    def test_11_accuracy_coverage_ties_keep_input_order(self):
        curve = accuracy_coverage([0.5, 0.5, 0.5, 0.5], [False, True, True, True], grid=(0.25, 0.5))
        self.assertEqual(curve, [(0.25, 0.0), (0.5, 0.5)])

    def test_12_decomposition_cases(self):
        p = np.array([0.2, 0.3, 0.5])
        same = decompose_uncertainty(np.tile(p, (4, 1)))
        self.assertAlmostEqual(same.epistemic, 0.0, places=12)
        self.assertAlmostEqual(same.total, direct_entropy(p), places=12)
        split = decompose_uncertainty(np.array([[1.0, 0.0], [0.0, 1.0]]))
        self.assertAlmostEqual(split.total, math.log(2.0), places=14)
        self.assertEqual(split.aleatoric, 0.0)
        self.assertAlmostEqual(split.epistemic, math.log(2.0), places=14)
        table = random_simplex(self.rng, (4, 3))
        result = decompose_uncertainty(table)
        total = direct_entropy(table.mean(axis=0))
        aleatoric = sum(direct_entropy(row) for row in table) / 4
        self.assertAlmostEqual(result.total, total, places=12)
        self.assertAlmostEqual(result.aleatoric, aleatoric, places=12)
        self.assertAlmostEqual(result.epistemic, total - aleatoric, places=12)

    def test_13_decomposition_identity_on_random_tables(self):
        for _ in range(1000):
            S, C = self.rng.integers(1, 8), self.rng.integers(2, 6)
            result = decompose_uncertainty(random_simplex(self.rng, (S, C)))
            self.assertLessEqual(abs(result.total - result.aleatoric - result.epistemic), 1e-10)
            self.assertGreaterEqual(result.epistemic, -1e-12)
            self.assertGreaterEqual(result.aleatoric, -1e-12)

    def test_14_scores_and_fraction(self):
        table = random_simplex(self.rng, (5, 30, 3))
        probs = table.mean(axis=0)
        total, aleatoric, epistemic = decompose_batch(table)
        np.testing.assert_allclose(uncertainty_scores(probs, table, "mutual_information"), epistemic)
        np.testing.assert_allclose(uncertainty_scores(probs), total)
        np.testing.assert_allclose(uncertainty_scores(probs, score="max_prob"), 1.0 - probs.max(axis=1))
        self.assertAlmostEqual(epistemic_fraction(total, epistemic), epistemic.mean() / total.mean(), places=14)
        self.assertEqual(epistemic_fraction(np.zeros(3), np.zeros(3)), 0.0)
        with self.assertRaises(ValueError):
            uncertainty_scores(probs, score="mutual_information")
        with self.assertRaises(ValueError):
            uncertainty_scores(probs, score="energy")

    def test_15_reliability_csv(self):
        records = records_from_arrays(random_simplex(self.rng, (50, 3)), self.rng.integers(0, 3, 50))
        report = ece(records)
        path = os.path.join(self.tmp_dir, "reliability.csv")
        reliability_bins_csv(report, path)
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        self.assertEqual(rows[0], ["bin_low", "bin_high", "mean_conf", "mean_acc", "count"])
        self.assertEqual(len(rows), 16)
        self.assertEqual(sum(int(r[4]) for r in rows[1:]), 50)
        self.assertEqual(report.to_dict()["bins"][0]["bin_low"], 0.0)

    def test_16_split_metrics(self):
        table = random_simplex(self.rng, (4, 40, 3))
        probs = table.mean(axis=0)
        labels = np.argmax(probs, axis=1)
        labels[:10] = (labels[:10] + 1) % 3
        metrics, report, curve = split_metrics(probs, labels, table)
        self.assertAlmostEqual(metrics["accuracy"], 0.75, places=14)
        self.assertEqual(metrics["ece"], report.ece)
        self.assertEqual(metrics["acc_at_80"], accuracy_at_coverage(curve, 0.8))
        self.assertAlmostEqual(metrics["total_uncertainty"], metrics["aleatoric"] + metrics["epistemic"], places=12)
        metrics, _, _ = split_metrics(probs, np.argmax(probs, axis=1))
        self.assertIsNone(metrics["selective_auroc"])
        self.assertNotIn("epistemic", metrics)


if __name__ == '__main__':
    unittest.main()
