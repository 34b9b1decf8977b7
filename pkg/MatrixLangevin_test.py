import math
import os
import unittest

import numpy as np
from pydantic import ValidationError

from errors import RankDeficiencyError
from MatrixLangevin import (
    MatrixLangevin,
    PriorConfig,
    log_hyp0f1_scalar,
    log_stiefel_volume,
    make_prior,
    ml_log_density,
    ml_log_density_unnorm,
    ml_log_normalizer_mc,
    ml_log_normalizer_saddlepoint,
    ml_mode,
    ml_riemannian_grad_log_density,
)
from StiefelManifold import StiefelPoint, haar_sample, haar_sample_batch, qr_retract, random_tangent

SLOW = os.environ.get("SBA_SLOW_TESTS") == "1"


def within_tolerance(approx, estimate, stderr, rel_tol):
    return abs(approx - estimate) <= max(rel_tol * abs(estimate), 3.0 * stderr)


class TestMatrixLangevin(unittest.TestCase):
    SEED = 7

    def setUp(self):
        self.rng = np.random.default_rng(self.SEED)

    def test_01_prior_config_validation(self):
        config = PriorConfig()
        self.assertEqual(config.kappa0, 1.0)
        self.assertEqual(config.tau, 0.1)
        with self.assertRaises(ValidationError):
            PriorConfig(kappa0=-0.5)
        with self.assertRaises(ValidationError):
            PriorConfig(tau=0.0)

    def test_02_unnormalized_density(self):
        U0 = haar_sample(6, 2, self.rng)
        U = haar_sample(6, 2, self.rng)
        self.assertEqual(ml_log_density_unnorm(MatrixLangevin(np.zeros((6, 2))), U), 0.0)
        dist = MatrixLangevin(2.5 * U0.data)
        self.assertAlmostEqual(ml_log_density_unnorm(dist, ml_mode(dist)), 2.5 * 2, places=12)
        F = self.rng.standard_normal((6, 2))
        expected = sum(F[i, j] * U.data[i, j] for i in range(6) for j in range(2))
        self.assertAlmostEqual(ml_log_density_unnorm(MatrixLangevin(F), U), expected, places=12)
        with self.assertRaises(ValueError):
            ml_log_density_unnorm(dist, haar_sample(5, 2, self.rng))

    def test_03_mode(self):
        U0 = haar_sample(7, 3, self.rng)
        np.testing.assert_allclose(ml_mode(MatrixLangevin(U0.data)).data, U0.data, atol=1e-12)
        np.testing.assert_allclose(ml_mode(MatrixLangevin(3.0 * U0.data)).data, U0.data, atol=1e-12)
        with self.assertRaises(RankDeficiencyError):
            ml_mode(MatrixLangevin(np.zeros((7, 3))))

    def test_04_mode_beats_haar_samples(self):
        F = self.rng.standard_normal((5, 2))
        dist = MatrixLangevin(F)
        best = ml_log_density_unnorm(dist, ml_mode(dist))
        samples = haar_sample_batch(5, 2, 10_000, self.rng)
        values = np.einsum("ij,nij->n", F, samples)
        self.assertLessEqual(np.max(values), best + 1e-12)

    def test_05_make_prior(self):
        U_init = haar_sample(8, 3, self.rng)
        uniform = make_prior(U_init, PriorConfig(kappa0=0.0))
        np.testing.assert_array_equal(uniform.F, np.zeros((8, 3)))
        self.assertEqual(uniform.cached_log_normalizer, 0.0)
        default = make_prior(U_init, PriorConfig())
        np.testing.assert_allclose(default.F, U_init.data)
        peaked = make_prior(U_init, PriorConfig(kappa0=2.0))
        np.testing.assert_allclose(ml_mode(peaked).data, U_init.data, atol=1e-12)
        self.assertGreaterEqual(peaked.cached_log_normalizer, 0.0)

    def test_06_riemannian_gradient(self):
        U0 = haar_sample(6, 2, self.rng)
        U = haar_sample(6, 2, self.rng)
        zero = ml_riemannian_grad_log_density(MatrixLangevin(np.zeros((6, 2))), U)
        np.testing.assert_array_equal(zero.data, 0.0)
        dist = MatrixLangevin(1.5 * U0.data)
        self.assertLessEqual(ml_riemannian_grad_log_density(dist, ml_mode(dist)).norm(), 1e-8)
        grad = ml_riemannian_grad_log_density(dist, U)
        h = 1e-5
        for _ in range(5):
            xi = random_tangent(U, self.rng)
            plus = ml_log_density_unnorm(dist, qr_retract(U, xi.scaled(h)))
            minus = ml_log_density_unnorm(dist, qr_retract(U, xi.scaled(-h)))
            fd = (plus - minus) / (2 * h)
            analytic = float(np.sum(grad.data * xi.data))
            self.assertLessEqual(abs(fd - analytic), 1e-5 * max(1.0, abs(analytic)))

    def test_07_monte_carlo_normalizer(self):
        self.assertEqual(ml_log_normalizer_mc(np.zeros((6, 2)), 100, self.rng), (0.0, 0.0))
        F = 1.0 * haar_sample(10, 2, self.rng).data
        _, se_small = ml_log_normalizer_mc(F, 20_000, np.random.default_rng(1))
        _, se_large = ml_log_normalizer_mc(F, 40_000, np.random.default_rng(2))
        self.assertAlmostEqual(se_small / se_large, math.sqrt(2.0), delta=0.15)
        with self.assertRaises(ValueError):
            ml_log_normalizer_mc(F, 0, self.rng)

    def test_08_normalizer_depends_on_singular_values_only(self):
        F = self.rng.standard_normal((6, 2))
        Q_right, _ = np.linalg.qr(self.rng.standard_normal((2, 2)))
        Q_left, _ = np.linalg.qr(self.rng.standard_normal((6, 6)))
        base = ml_log_normalizer_saddlepoint(F)
        self.assertAlmostEqual(ml_log_normalizer_saddlepoint(F @ Q_right), base, places=12)
        self.assertAlmostEqual(ml_log_normalizer_saddlepoint(Q_left @ F), base, places=12)
        est_a, se_a = ml_log_normalizer_mc(F, 50_000, np.random.default_rng(3))
        est_b, se_b = ml_log_normalizer_mc(Q_left @ F @ Q_right, 50_000, np.random.default_rng(4))
        self.assertLessEqual(abs(est_a - est_b), 4.0 * math.hypot(se_a, se_b))

    def test_09_saddlepoint_zero_and_sphere_case(self):
        self.assertEqual(ml_log_normalizer_saddlepoint(np.zeros((64, 4))), 0.0)
        self.assertEqual(ml_log_normalizer_saddlepoint(np.zeros((64, 4)), method="bessel"), 0.0)
        with self.assertRaises(ValueError):
            ml_log_normalizer_saddlepoint(np.ones((4, 2)), method="series")
        for kappa in [0.1, 0.5, 1.0, 2.0, 5.0]:
            errors = []
            for d in [32, 64, 128]:
                F = np.zeros((d, 1))
                F[0, 0] = kappa
                exact = log_hyp0f1_scalar(d / 2.0, kappa ** 2 / 4.0)
                approx = ml_log_normalizer_saddlepoint(F)
                errors.append(abs(approx - exact) / exact)
                self.assertLess(errors[-1], 1e-3)
            self.assertLessEqual(errors[1], errors[0] + 1e-12)
            self.assertLessEqual(errors[2], errors[1] + 1e-12)

    def test_10_methods_agree(self):
        for d, k in [(64, 4), (64, 8), (128, 4)]:
            U0 = haar_sample(d, k, self.rng)
            for kappa in [0.5, 2.0, 5.0]:
                wishart = ml_log_normalizer_saddlepoint(kappa * U0.data)
                bessel = ml_log_normalizer_saddlepoint(kappa * U0.data, method="bessel")
                self.assertLess(abs(wishart - bessel) / bessel, 1e-3)

    def test_11_saddlepoint_against_monte_carlo_d64(self):
        U0 = haar_sample(64, 4, self.rng)
        for kappa in [1.0, 5.0]:
            F = kappa * U0.data
            estimate, stderr = ml_log_normalizer_mc(F, 200_000, np.random.default_rng(int(kappa * 10)))
            approx = ml_log_normalizer_saddlepoint(F)
            self.assertTrue(within_tolerance(approx, estimate, stderr, 0.02),
                            f"kappa={kappa}: approx {approx:.5f} vs mc {estimate:.5f} +- {stderr:.1e}")

    @unittest.skipUnless(SLOW, "set SBA_SLOW_TESTS=1 for the full normalizer grid")
    def test_12_saddlepoint_full_grid(self):
        tolerances = {64: 0.02, 128: 0.005}
        for d in [64, 128]:
            for k in [4, 8]:
                U0 = haar_sample(d, k, self.rng)
                for kappa in [0.1, 0.5, 1.0, 2.0, 5.0]:
                    F = kappa * U0.data
                    estimate, stderr = ml_log_normalizer_mc(F, 1_000_000, np.random.default_rng(d + k))
                    approx = ml_log_normalizer_saddlepoint(F)
                    self.assertTrue(within_tolerance(approx, estimate, stderr, tolerances[d]))

    def test_13_stiefel_volume(self):
        self.assertAlmostEqual(log_stiefel_volume(3, 1), math.log(4 * math.pi), places=12)
        self.assertAlmostEqual(log_stiefel_volume(2, 2), math.log(4 * math.sqrt(2) * math.pi), places=12)

    def test_14_normalised_density(self):
        uniform = MatrixLangevin(np.zeros((3, 1)))
        U = haar_sample(3, 1, self.rng)
        self.assertAlmostEqual(ml_log_density(uniform, U), -math.log(4 * math.pi), places=12)
        dist = MatrixLangevin(2.0 * haar_sample(5, 2, self.rng).data)
        stack = haar_sample_batch(5, 2, 4, self.rng)
        values = ml_log_density(dist, stack)
        self.assertEqual(values.shape, (4,))
        for frame, value in zip(stack, values):
            self.assertAlmostEqual(ml_log_density(dist, StiefelPoint(frame)), value, places=12)
        with self.assertRaises(ValueError):
            ml_log_density(dist, stack[:, :4])


if __name__ == '__main__':
    unittest.main()
