"""Matrix Langevin distribution ML(F) on St(k, d) with density proportional to etr(F^T U).

The normaliser 0F1(d/2; F^T F / 4) is the Haar expectation of etr(F^T U) and
depends on F only through its singular values.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import gammaln, hyp0f1, ive, logsumexp, multigammaln

from errors import RankDeficiencyError
from StandardError import log_mean_exp_stderr
from StiefelManifold import StiefelPoint, polar_project, tangent_project

MC_CHUNK = 20_000
SADDLEPOINT_METHODS = ("wishart", "bessel")


class PriorConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kappa0: float = Field(1.0, ge=0.0)
    tau: float = Field(0.1, gt=0.0)


@dataclass(frozen=True, eq=False)
class MatrixLangevin:
    F: np.ndarray
    cached_mode: Optional[StiefelPoint] = field(default=None, init=False)
    cached_log_normalizer: float = field(default=0.0, init=False)

    def __post_init__(self):
        F = np.array(self.F, dtype=np.float64, copy=True)
        if F.ndim != 2 or F.shape[1] > F.shape[0]:
            raise ValueError(f"F must be a tall d x k matrix, got shape {F.shape}")
        F.setflags(write=False)
        object.__setattr__(self, "F", F)
        try:
            mode = polar_project(F)
        except RankDeficiencyError:
            mode = None
        object.__setattr__(self, "cached_mode", mode)
        object.__setattr__(self, "cached_log_normalizer", ml_log_normalizer_saddlepoint(F))

    @property
    def shape(self):
        return self.F.shape


def _check_shape(dist, U):
    if U.shape != dist.shape:
        raise ValueError(f"Shape mismatch: F is {dist.shape}, point is {U.shape}")


def ml_log_density_unnorm(dist, U):
    _check_shape(dist, U)
    return float(np.sum(dist.F * U.data))


def ml_mode(dist):
    if dist.cached_mode is None:
        raise RankDeficiencyError("F is rank deficient; the Matrix Langevin mode is not unique")
    return dist.cached_mode


def ml_riemannian_grad_log_density(dist, U):
    _check_shape(dist, U)
    return tangent_project(U, dist.F)


def make_prior(U_init, config):
    """Prior ML(kappa0 * U_init); kappa0 = 0 is the Haar-uniform law."""
    return MatrixLangevin(config.kappa0 * U_init.data)


def _haar_leading_diagonals(d, k, n, rng):
    """Diagonal of the leading k x k block of n Haar frames.

    Uses Q = G L^{-T} with G^T G = L L^T, which is the sign-corrected QR factor.
    """
    G = rng.standard_normal((n, d, k))
    L = np.linalg.cholesky(np.einsum("nij,nil->njl", G, G))
    X = np.linalg.solve(L, np.swapaxes(G[:, :k, :], 1, 2))
    return np.diagonal(X, axis1=1, axis2=2)


def ml_log_normalizer_mc(F, n, rng, chunk_size=MC_CHUNK):
    """Monte Carlo log 0F1(d/2; F^T F/4) from n Haar samples.

    Returns (estimate, standard error). Haar invariance reduces tr(F^T U) to
    sum_i s_i U_ii with s the singular values of F.
    """
    F = np.asarray(F, dtype=np.float64)
    if n < 1:
        raise ValueError(f"Sample count must be positive, got {n}")
    d, k = F.shape
    singular = np.linalg.svd(F, compute_uv=False)
    if not np.any(singular):
        return 0.0, 0.0
    log_weights = np.empty(n)
    done = 0
    while done < n:
        m = min(chunk_size, n - done)
        log_weights[done:done + m] = _haar_leading_diagonals(d, k, m, rng) @ singular
        done += m
    estimate = float(logsumexp(log_weights) - math.log(n))
    return estimate, log_mean_exp_stderr(log_weights)


def log_hyp0f1_scalar(a, x):
    """log 0F1(a; x) for scalar x >= 0, falling back to the Bessel form on overflow."""
    if x == 0.0:
        return 0.0
    value = hyp0f1(a, x)
    if np.isfinite(value) and value > 0.0:
        return float(math.log(value))
    nu = a - 1.0
    s = 2.0 * math.sqrt(x)
    return float(gammaln(a) - nu * math.log(s / 2.0) + math.log(ive(nu, s)) + s)


def _wishart_saddlepoint(singular, d):
    """Saddle point of the density of Z^T Z at I for the tilted Gaussian matrix Z.

    Normalised by its value at F = 0; the per-direction saddle point is
    theta_i = (d/2 + sqrt(d^2/4 + s_i^2)) / 2.
    """
    half_d = 0.5 * d
    root = np.sqrt(half_d ** 2 + singular ** 2)
    theta0 = half_d
    shift = singular ** 2 / (2.0 * (root + half_d))
    theta = theta0 + shift
    value = np.sum(shift - half_d * np.log1p(shift / theta0) + singular ** 2 / (4.0 * theta))
    # Hessian of the cumulant generating function in the k(k+1)/2 symmetric coordinates
    x = singular ** 2
    diag = d / (2.0 * theta ** 2) + x / (2.0 * theta ** 3)
    diag0 = d / (2.0 * theta0 ** 2)
    log_det_ratio = np.sum(np.log(diag / diag0))
    k = singular.size
    off0 = d / (4.0 * theta0 ** 2)
    for i in range(k):
        for j in range(i + 1, k):
            off = (d / (4.0 * theta[i] * theta[j])
                   + x[i] / (8.0 * theta[i] ** 2 * theta[j])
                   + x[j] / (8.0 * theta[i] * theta[j] ** 2))
            log_det_ratio += math.log(off / off0)
    return float(value - 0.5 * log_det_ratio)


def _bessel_product(singular, d):
    """Exact sphere factors per singular value plus the leading pairwise orthogonality term."""
    a = 0.5 * d
    x = singular ** 2 / 4.0
    value = sum(log_hyp0f1_scalar(a, float(xi)) for xi in x)
    if singular.size > 1:
        pair_sum = 0.5 * (np.sum(x) ** 2 - np.sum(x ** 2))
        value += pair_sum / (2.0 * a ** 2 * (a + 1.0) * (a - 0.5))
    return float(value)


def ml_log_normalizer_saddlepoint(F, method="wishart"):
    """Deterministic approximation of log 0F1(d/2; F^T F/4); exactly 0 at F = 0."""
    if method not in SADDLEPOINT_METHODS:
        raise ValueError(f"Unknown saddle-point method '{method}', expected one of {SADDLEPOINT_METHODS}")
    F = np.asarray(F, dtype=np.float64)
    singular = np.linalg.svd(F, compute_uv=False)
    if not np.any(singular):
        return 0.0
    d = F.shape[0]
    if method == "wishart":
        return _wishart_saddlepoint(singular, d)
    return _bessel_product(singular, d)


def log_stiefel_volume(d, k):
    """Log volume of St(k, d) under the metric inherited from R^{d x k}."""
    return float(k * math.log(2.0) + 0.5 * d * k * math.log(math.pi)
                 - multigammaln(0.5 * d, k) + 0.25 * k * (k - 1) * math.log(2.0))


def ml_log_density(dist, U):
    """Normalised log density w.r.t. the embedded Riemannian volume.

    U is a StiefelPoint or an (n, d, k) stack of frames; a stack gives one value per frame.
    """
    d, k = dist.shape
    offset = dist.cached_log_normalizer + log_stiefel_volume(d, k)
    if isinstance(U, StiefelPoint):
        return ml_log_density_unnorm(dist, U) - offset
    samples = np.asarray(U, dtype=np.float64)
    if samples.ndim != 3 or samples.shape[1:] != (d, k):
        raise ValueError(f"Expected an (n, {d}, {k}) stack of frames, got shape {samples.shape}")
    return np.einsum("ij,nij->n", dist.F, samples) - offset


def log_normalizer_report(F, n, rng, method="wishart"):
    approx = ml_log_normalizer_saddlepoint(F, method=method)
    estimate, stderr = ml_log_normalizer_mc(F, n, rng)
    rel_error = abs(approx - estimate) / abs(estimate) if estimate != 0.0 else abs(approx)
    logging.debug(f"[normalizer] d={F.shape[0]} k={F.shape[1]} approx={approx:.6f} mc={estimate:.6f}+-{stderr:.2e}")
    return {"saddlepoint": approx, "monte_carlo": estimate, "stderr": stderr, "rel_error": rel_error}
