import math
import os
import unittest

import numpy as np
from pydantic import ValidationError

from errors import InsufficientSamplesError
from GeometryLab import (
    ExpansionProbe,
    KLGapConfig,
    delta_term,
    expansion_residual,
    kl_gap_estimate,
    kl_gap_grid,
    knn_entropy_terms,
    polar_batch,
    qr_batch,
    random_probe,
    random_symmetric,
    residual_slope,
    symmetric_basis,
    verify_geometry,
)
from MatrixLangevin import MatrixLangevin
from StiefelManifold import (
    TangentVector,
    haar_sample,
    polar_project,
    qr_retract,
    random_tangent,
    tangency_residual,
)

SLOW = os.environ.get("SBA_SLOW_TESTS") == "1"


class TestGeometryLab(unittest.TestCase):
    SEED = 17

    def setUp(self):
        self.rng = np.random.default_rng(self.SEED)

    def test_01_delta_vanishes_without_either_perturbation(self):
        U = haar_sample(8, 3, self.rng)
        xi = random_tangent(U, self.rng)
        np.testing.assert_array_equal(delta_term(U, xi, np.zeros((3, 3))).data, np.zeros((8, 3)))
        zero = TangentVector(U, np.zeros((8, 3)))
        np.testing.assert_array_equal(delta_term(U, zero, random_symmetric(3, self.rng)).data, np.zeros((8, 3)))
        with self.assertRaises(ValueError):
            delta_term(U, xi, np.zeros((2, 2)))

    def test_02_delta_is_tangent(self):
        for _ in range(200):
            d = int(self.rng.integers(4, 17))
            k = int(self.rng.integers(1, min(4, d) + 1))
            U = haar_sample(d, k, self.rng)
            delta = delta_term(U, random_tangent(U, self.rng), random_symmetric(k, self.rng))
            self.assertLessEqual(tangency_residual(U.data, delta.data), 1e-12)

    def test_03_expansion_is_cubic(self):
        for d, k in [(8, 3), (5, 1), (12, 4)]:
            probe = random_probe(d, k, self.rng)
            residuals = expansion_residual(probe)
            self.assertGreaterEqual(residual_slope(probe.scales, residuals), 2.7)
            self.assertTrue(np.all(np.diff(residuals) < 0))

    def test_04_expansion_without_normal_part(self):
        U = haar_sample(7, 2, self.rng)
        probe = ExpansionProbe(U, random_tangent(U, self.rng), np.zeros((2, 2)))
        self.assertGreaterEqual(residual_slope(probe.scales, expansion_residual(probe)), 2.7)

    def test_05_dropping_delta_degrades_to_second_order(self):
        U = haar_sample(8, 3, self.rng)
        A = self.rng.standard_normal((3, 3))
        xi = TangentVector(U, U.data @ (A - A.T) / np.linalg.norm(A - A.T))
        probe = ExpansionProbe(U, xi, random_symmetric(3, self.rng))
        slope = residual_slope(probe.scales, expansion_residual(probe, include_delta=False))
        self.assertGreater(slope, 1.9)
        self.assertLess(slope, 2.3)
        corrupted = residual_slope(probe.scales, expansion_residual(probe, corrupt_delta=True))
        self.assertLess(corrupted, 2.5)
        self.assertGreaterEqual(residual_slope(probe.scales, expansion_residual(probe)), 2.7)

    def test_06_probe_validation(self):
        U = haar_sample(5, 2, self.rng)
        xi = random_tangent(U, self.rng)
        with self.assertRaises(ValueError):
            ExpansionProbe(U, xi, np.array([[0.0, 1.0], [0.0, 0.0]]))
        with self.assertRaises(ValueError):
            ExpansionProbe(U, xi, np.eye(2), scales=(0.1, 0.0))
        other = haar_sample(6, 2, self.rng)
        with self.assertRaises(ValueError):
            ExpansionProbe(U, random_tangent(other, self.rng), np.eye(2))

    def test_07_verify_geometry_passes(self):
        report = verify_geometry(trials=100, seed=2)
        self.assertTrue(report["passed"])
        self.assertGreaterEqual(report["min_slope"], 2.7)
        self.assertLessEqual(report["max_tangency_residual"], 1e-12)
        self.assertEqual(report, verify_geometry(trials=100, seed=2))
        with self.assertRaises(ValueError):
            verify_geometry(trials=0)

    def test_08_verify_geometry_negative_control(self):
        with self.assertLogs(level="WARNING"):
            report = verify_geometry(trials=50, seed=2, corrupt_delta=True)
        self.assertFalse(report["passed"])
        self.assertGreater(report["slope_failures"], 0)
        self.assertLess(report["min_slope"], 2.7)

    def test_09_symmetric_basis_and_batches(self):
        basis = symmetric_basis(3)
        self.assertEqual(basis.shape, (6, 3, 3))
        flat = basis.reshape(6, -1)
        np.testing.assert_allclose(flat @ flat.T, np.eye(6), atol=1e-15)
        np.testing.assert_array_equal(basis, np.swapaxes(basis, 1, 2))
        U = haar_sample(6, 2, self.rng)
        xis = [random_tangent(U, self.rng).scaled(0.3) for _ in range(4)]
        W = np.array([U.data + xi.data for xi in xis])
        for i, xi in enumerate(xis):
            np.testing.assert_allclose(polar_batch(W)[i], polar_project(W[i]).data, atol=1e-13)
            np.testing.assert_allclose(qr_batch(W)[i], qr_retract(U, xi).data, atol=1e-13)

    def test_10_knn_entropy_of_a_gaussian(self):
        sigma = 0.3
        points = sigma * self.rng.standard_normal((4096, 3))
        entropy, terms = knn_entropy_terms(points)
        exact = 1.5 * math.log(2 * math.pi * math.e * sigma ** 2)
        self.assertAlmostEqual(entropy, exact, delta=0.15)
        self.assertEqual(terms.shape, (4096,))
        shifted, _ = knn_entropy_terms(2.0 * points + 5.0)
        self.assertAlmostEqual(shifted - entropy, 3 * math.log(2.0), places=9)

    def test_11_kl_gap_zero_without_normal_variance(self):
        target = MatrixLangevin(50.0 * haar_sample(4, 1, self.rng).data)
        result = kl_gap_estimate(target, 1e-4, 0.0, 8192, np.random.default_rng(1), knn_points=8192)
        self.assertEqual(result.gap, 0.0)
        self.assertLessEqual(abs(result.gap), 2 * result.stderr)
        self.assertEqual(result.trace_sigma_n, 0.0)
        self.assertAlmostEqual(result.trace_sigma_t, 3e-4, places=14)
        self.assertEqual(result.n_knn, 8192)
        self.assertAlmostEqual(result.kl_tang, result.kl_tang_exact, delta=0.15)
        qr = kl_gap_estimate(target, 1e-4, 0.0, 8192, np.random.default_rng(1), knn_points=8192, retraction="qr")
        self.assertLessEqual(abs(qr.gap), max(2 * qr.stderr, 1e-3))

        # Wider tangent spread: the chart compresses radius r to r / sqrt(1 + r^2), which lowers the
        # chart entropy by about 2.5 E log(1 + r^2) ~ 0.14 here; the common kNN bias cancels.
        wide = kl_gap_estimate(target, 1 / 50, 0.0, 8192, np.random.default_rng(1), knn_points=8192)
        excess = (wide.kl_tang - wide.kl_tang_exact) - (result.kl_tang - result.kl_tang_exact)
        self.assertGreater(excess, 0.05)
        self.assertLess(excess, 0.25)

    def test_12_kl_gap_grows_with_normal_variance(self):
        config = KLGapConfig(d=4, k=1, kappa=50.0, n_mc=20_000, knn_points=4096, seed=3)
        results = kl_gap_grid(config)
        gaps = [r.gap for r in results]
        self.assertEqual([r.normal_scale for r in results], [0.0, 1.0, 2.0, 4.0])
        self.assertEqual(gaps[0], 0.0)
        self.assertTrue(all(b >= a for a, b in zip(gaps, gaps[1:])), gaps)
        self.assertGreater(results[-1].gap, 3 * results[-1].stderr)
        self.assertTrue(all(r.stderr >= 0 for r in results))
        again = kl_gap_grid(config)
        self.assertEqual([r.to_dict() for r in again], [r.to_dict() for r in results])

    def test_13_estimator_floor_and_inputs(self):
        target = MatrixLangevin(10.0 * haar_sample(5, 2, self.rng).data)
        with self.assertRaises(InsufficientSamplesError):
            kl_gap_estimate(target, 0.1, 0.1, 50, self.rng)
        with self.assertRaises(ValueError):
            kl_gap_estimate(target, np.eye(3), 0.1, 500, self.rng)
        with self.assertRaises(ValueError):
            kl_gap_estimate(target, 0.1, -0.1, 500, self.rng)
        with self.assertRaises(ValueError):
            kl_gap_estimate(target, 0.1, 0.1, 500, self.rng, retraction="cayley")
        full = kl_gap_estimate(target, 0.1 * np.eye(7), np.diag([0.05, 0.0, 0.1]), 500, np.random.default_rng(4))
        self.assertAlmostEqual(full.trace_sigma_t, 0.7, places=12)
        self.assertAlmostEqual(full.trace_sigma_n, 0.15, places=12)
        iso = kl_gap_estimate(target, 0.1, 0.05, 500, np.random.default_rng(4))
        self.assertAlmostEqual(iso.normal_scale, 0.5, places=12)

    def test_14_config_validation(self):
        self.assertEqual(KLGapConfig().normal_scales, (0.0, 1.0, 2.0, 4.0))
        for bad in [{"k": 5, "d": 4}, {"normal_scales": ()}, {"normal_scales": (0.0, -1.0)}, {"retraction": "exp"}]:
            with self.assertRaises(ValidationError):
                KLGapConfig(**bad)

    @unittest.skipUnless(SLOW, "set SBA_SLOW_TESTS=1 to run")
    def test_15_default_grid_gap_sign(self):
        results = kl_gap_grid(KLGapConfig())
        self.assertLessEqual(abs(results[0].gap), 2 * results[0].stderr)
        for r in results[1:]:
            self.assertGreater(r.gap, 3 * r.stderr)
        gaps = [r.gap for r in results]
        self.assertTrue(all(b >= a for a, b in zip(gaps, gaps[1:])), gaps)

    @unittest.skipUnless(SLOW, "set SBA_SLOW_TESTS=1 to run")
    def test_16_full_geometry_suite(self):
        report = verify_geometry(trials=1000, seed=0)
        self.assertTrue(report["passed"], report)


if __name__ == '__main__':
    unittest.main()
