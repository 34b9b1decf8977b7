"""Numerical checks of the polar-projection expansion and the tangent-vs-projected KL gap.

For W = U + xi_T + U S the polar factor is
    U + xi_T - 1/2 U xi_T^T xi_T + Delta(xi_T, S) + O(|xi|^3),
    Delta = -xi_T S + 1/2 U (U^T xi_T S - S U^T xi_T),
and Delta is tangent at U. The KL experiment compares a tangent Gaussian
pushed through a retraction (q_tang) with the same Gaussian plus a normal
perturbation U S, projected by polar decomposition (q_proj), against a
concentrated Matrix Langevin target.
"""
import logging
import math
from dataclasses import asdict, dataclass
from typing import Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln

from errors import InsufficientSamplesError, NumericalError, RankDeficiencyError
from MatrixLangevin import MatrixLangevin, ml_log_density, ml_mode
from StandardError import paired_difference_stderr, standard_error
from StiefelManifold import (
    RANK_TOL,
    SYMMETRY_TOL,
    StiefelPoint,
    TangentVector,
    haar_sample,
    manifold_dim,
    polar_project,
    random_tangent,
    tangency_residual,
    tangent_basis,
)

DEFAULT_SCALES = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3)
TANGENCY_TOL = 1e-12
MIN_SLOPE = 2.7
MIN_KNN_POINTS = 100
RETRACTIONS = ("polar", "qr")


class KLGapConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    d: int = Field(16, gt=0)
    k: int = Field(3, gt=0)
    kappa: float = Field(50.0, gt=0.0)
    # Tangent variance as a multiple of 1/kappa, the Laplace variance of the target.
    tangent_scale: float = Field(1.0, gt=0.0)
    normal_scales: Tuple[float, ...] = (0.0, 1.0, 2.0, 4.0)
    n_mc: int = Field(100_000, gt=0)
    knn_points: int = Field(8192, gt=0)
    retraction: Literal["polar", "qr"] = "polar"
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if self.k > self.d:
            raise ValueError(f"k={self.k} exceeds d={self.d}")
        if not self.normal_scales or min(self.normal_scales) < 0.0:
            raise ValueError("normal_scales must be a non-empty list of non-negative multiples")
        return self


@dataclass(frozen=True, eq=False)
class ExpansionProbe:
    base: StiefelPoint
    xi_t: TangentVector
    s_mat: np.ndarray
    scales: tuple = DEFAULT_SCALES

    def __post_init__(self):
        S = np.asarray(self.s_mat, dtype=np.float64)
        k = self.base.k
        if self.xi_t.data.shape != self.base.shape:
            raise ValueError(f"xi_t has shape {self.xi_t.data.shape}, base is {self.base.shape}")
        if S.shape != (k, k) or np.max(np.abs(S - S.T)) > SYMMETRY_TOL:
            raise ValueError(f"s_mat must be a symmetric {k}x{k} matrix")
        if not self.scales or min(self.scales) <= 0:
            raise ValueError("Expansion scales must be positive")
        object.__setattr__(self, "s_mat", S)
        object.__setattr__(self, "scales", tuple(float(e) for e in self.scales))


@dataclass(frozen=True)
class KLGapResult:
    d: int
    k: int
    kappa: float
    normal_scale: float
    trace_sigma_t: float
    trace_sigma_n: float
    kl_tang: float
    kl_proj: float
    gap: float
    stderr: float
    kl_tang_stderr: float
    kl_proj_stderr: float
    # Gaussian entropy in place of the chart estimate; differs from kl_tang by the chart Jacobian.
    kl_tang_exact: float
    n_mc: int
    n_knn: int
    retraction: str
    seed: Optional[int] = None

    def to_dict(self):
        return asdict(self)


def _delta_array(U, xi, S):
    A = U.T @ xi
    return -xi @ S + 0.5 * U @ (A @ S - S @ A)


def delta_term(U, xi_t, s):
    """Second-order cross term of the polar expansion; always tangent at U."""
    S = np.asarray(s, dtype=np.float64)
    if xi_t.data.shape != U.shape or S.shape != (U.k, U.k):
        raise ValueError(f"Shapes disagree: U {U.shape}, xi_t {xi_t.data.shape}, S {S.shape}")
    return TangentVector(U, _delta_array(U.data, xi_t.data, S))


def random_symmetric(k, rng):
    """Symmetric k x k matrix with unit Frobenius norm."""
    G = rng.standard_normal((k, k))
    S = G + G.T
    return S / np.linalg.norm(S)


def random_probe(d, k, rng, scales=DEFAULT_SCALES):
    U = haar_sample(d, k, rng)
    return ExpansionProbe(U, random_tangent(U, rng), random_symmetric(k, rng), scales)


def expansion_residual(probe, include_delta=True, corrupt_delta=False):
    """||polar(U + e xi_T + e U S) - second-order expansion||_F for each scale e.

    corrupt_delta keeps only the -xi_T S part of Delta (a negative control).
    """
    U, xi, S = probe.base.data, probe.xi_t.data, probe.s_mat
    if not include_delta:
        delta = np.zeros_like(U)
    elif corrupt_delta:
        delta = -xi @ S
    else:
        delta = _delta_array(U, xi, S)
    residuals = []
    for eps in probe.scales:
        projected = polar_project(U + eps * xi + eps * U @ S).data
        expansion = U + eps * xi - 0.5 * eps ** 2 * U @ (xi.T @ xi) + eps ** 2 * delta
        residuals.append(float(np.linalg.norm(projected - expansion)))
    return np.array(residuals)


def residual_slope(scales, residuals):
    """Least-squares slope of log residual against log scale."""
    slope, _ = np.polyfit(np.log(scales), np.log(np.maximum(residuals, 1e-300)), 1)
    return float(slope)


def verify_geometry(trials=1000, seed=0, corrupt_delta=False, tag="geometry"):
    """Tangency of Delta and cubic order of the expansion over random probes, d in 4..16, k in 1..4."""
    if trials < 1:
        raise ValueError(f"trials must be positive, got {trials}")
    rng = np.random.default_rng(seed)
    tangency_failures = slope_failures = 0
    max_residual, min_slope = 0.0, math.inf
    for _ in range(trials):
        d = int(rng.integers(4, 17))
        k = int(rng.integers(1, 5))
        probe = random_probe(d, k, rng)
        delta = _delta_array(probe.base.data, probe.xi_t.data, probe.s_mat)
        residual = tangency_residual(probe.base.data, delta)
        slope = residual_slope(probe.scales, expansion_residual(probe, corrupt_delta=corrupt_delta))
        max_residual = max(max_residual, residual)
        min_slope = min(min_slope, slope)
        tangency_failures += residual > TANGENCY_TOL
        slope_failures += slope < MIN_SLOPE
    passed = tangency_failures == 0 and slope_failures == 0
    report = {
        "trials": trials,
        "seed": seed,
        "corrupt_delta": corrupt_delta,
        "max_tangency_residual": max_residual,
        "min_slope": min_slope,
        "tangency_failures": int(tangency_failures),
        "slope_failures": int(slope_failures),
        "passed": passed,
    }
    log = logging.info if passed else logging.warning
    log(f"[{tag}] {trials} probes: min slope {min_slope:.3f}, max tangency residual {max_residual:.1e}, "
        f"{tangency_failures + slope_failures} failures")
    return report


def symmetric_basis(k):
    """Frobenius-orthonormal basis of symmetric k x k matrices, shape (k(k+1)/2, k, k)."""
    basis = []
    for i in range(k):
        for j in range(i, k):
            E = np.zeros((k, k))
            if i == j:
                E[i, i] = 1.0
            else:
                E[i, j] = E[j, i] = math.sqrt(0.5)
            basis.append(E)
    return np.array(basis)


def _covariance_factor(sigma, size, name):
    """Square-root factor of a scalar (isotropic) or full PSD covariance."""
    if np.ndim(sigma) == 0:
        if sigma < 0:
            raise ValueError(f"{name} must be non-negative, got {sigma}")
        return math.sqrt(float(sigma)) * np.eye(size), float(sigma) * size
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape != (size, size):
        raise ValueError(f"{name} must be {size}x{size}, got {sigma.shape}")
    w, V = np.linalg.eigh(0.5 * (sigma + sigma.T))
    if w.min(initial=0.0) < -1e-12 * max(1.0, w.max(initial=0.0)):
        raise ValueError(f"{name} is not positive semi-definite")
    return V * np.sqrt(np.maximum(w, 0.0)), float(np.trace(sigma))


def polar_batch(W):
    left, singular, right_t = np.linalg.svd(W, full_matrices=False)
    if np.any(singular[:, -1] <= RANK_TOL * singular[:, 0]):
        raise RankDeficiencyError("A perturbed frame is rank deficient")
    return left @ right_t


def qr_batch(W):
    Q, R = np.linalg.qr(W)
    signs = np.where(np.diagonal(R, axis1=1, axis2=2) < 0, -1.0, 1.0)
    return Q * signs[:, None, :]


def knn_entropy_terms(points):
    """Kozachenko-Leonenko entropy with k = ceil(sqrt(n)) neighbours.

    Returns (entropy, per-point terms m log eps_i) so that paired standard errors can be formed.
    """
    n, m = points.shape
    k = int(math.ceil(math.sqrt(n)))
    distances, _ = cKDTree(points).query(points, k=k + 1, workers=-1)
    eps = distances[:, k]
    if np.any(eps <= 0.0):
        raise NumericalError("Duplicate samples make the nearest-neighbour entropy undefined")
    log_unit_ball = 0.5 * m * math.log(math.pi) - gammaln(0.5 * m + 1.0)
    terms = m * np.log(eps)
    return float(digamma(n) - digamma(k) + log_unit_ball + np.mean(terms)), terms


def kl_gap_estimate(target, sigma_t, sigma_n, n_mc, rng, knn_points=8192, retraction="polar"):
    """Monte Carlo KL(q || p_ML) for the retracted and the projected Gaussian, with common random numbers.

    Both are evaluated in the tangent chart at the target mode: log p_ML is exact
    (saddle-point normaliser) and the entropy uses the nearest-neighbour estimate on
    the first min(n_mc, knn_points) chart coordinates. The chart Jacobian is ignored, so
    kl_tang sits above kl_tang_exact by about -E log det of the chart map (for k = 1,
    (m + 2) / 2 * E log(1 + |xi|^2)) on top of the kNN bias. Compare the two only at small sigma_t.
    sigma_t is a variance in tangent coordinates, sigma_n one in the orthonormal
    symmetric basis of the normal space; either may be a full matrix.
    """
    if retraction not in RETRACTIONS:
        raise ValueError(f"Unknown retraction '{retraction}', expected one of {RETRACTIONS}")
    mode = ml_mode(target)
    d, k = mode.shape
    m = manifold_dim(d, k)
    n_knn = min(n_mc, knn_points)
    floor = max(MIN_KNN_POINTS, 2 * m)
    if n_knn < floor:
        raise InsufficientSamplesError(f"{n_knn} samples are below the density estimator floor of {floor}")
    basis = tangent_basis(mode)
    sym_basis = symmetric_basis(k)
    factor_t, trace_t = _covariance_factor(sigma_t, m, "sigma_t")
    factor_n, trace_n = _covariance_factor(sigma_n, sym_basis.shape[0], "sigma_n")
    if trace_t <= 0.0:
        raise ValueError("sigma_t must be positive definite")

    U = mode.data
    xi = np.einsum("nm,mij->nij", rng.standard_normal((n_mc, m)) @ factor_t.T, basis.array)
    S = np.einsum("ns,sij->nij", rng.standard_normal((n_mc, sym_basis.shape[0])) @ factor_n.T, sym_basis)
    tangent_samples = (polar_batch if retraction == "polar" else qr_batch)(U + xi)
    projected_samples = polar_batch(U + xi + U @ S)

    def evaluate(samples):
        log_p = ml_log_density(target, samples)
        chart = np.einsum("mij,nij->nm", basis.array, samples[:n_knn] - U)
        entropy, terms = knn_entropy_terms(chart)
        return log_p, entropy, terms

    log_p_t, entropy_t, terms_t = evaluate(tangent_samples)
    log_p_p, entropy_p, terms_p = evaluate(projected_samples)
    kl_tang = -entropy_t - float(np.mean(log_p_t))
    kl_proj = -entropy_p - float(np.mean(log_p_p))
    gaussian_entropy = 0.5 * m * math.log(2.0 * math.pi * math.e) + 0.5 * float(np.sum(np.log(np.maximum(
        np.linalg.eigvalsh(factor_t @ factor_t.T), 1e-300))))
    return KLGapResult(
        d=d, k=k,
        kappa=float(np.linalg.norm(target.F, 2)),
        normal_scale=(trace_n / sym_basis.shape[0]) / (trace_t / m),
        trace_sigma_t=trace_t,
        trace_sigma_n=trace_n,
        kl_tang=kl_tang,
        kl_proj=kl_proj,
        gap=kl_proj - kl_tang,
        stderr=math.hypot(paired_difference_stderr(terms_p, terms_t), paired_difference_stderr(log_p_p, log_p_t)),
        kl_tang_stderr=math.hypot(standard_error(terms_t), standard_error(log_p_t)),
        kl_proj_stderr=math.hypot(standard_error(terms_p), standard_error(log_p_p)),
        kl_tang_exact=-gaussian_entropy - float(np.mean(log_p_t)),
        n_mc=n_mc,
        n_knn=n_knn,
        retraction=retraction,
    )


def kl_gap_grid(config, tag="klgap"):
    """One KL-gap record per normal scale; every scale reuses the same random numbers."""
    frame_seed, mc_seed = np.random.SeedSequence(config.seed).spawn(2)
    U0 = haar_sample(config.d, config.k, np.random.default_rng(frame_seed))
    target = MatrixLangevin(config.kappa * U0.data)
    sigma_t = config.tangent_scale / config.kappa
    results = []
    for scale in config.normal_scales:
        result = kl_gap_estimate(target, sigma_t, scale * sigma_t, config.n_mc, np.random.default_rng(mc_seed),
                                 config.knn_points, config.retraction)
        result = KLGapResult(**{**result.to_dict(), "normal_scale": float(scale), "seed": config.seed})
        logging.info(f"[{tag}] d={config.d} k={config.k} normal scale {scale}: gap {result.gap:.4f} "
                     f"+- {result.stderr:.4f} (KL tang {result.kl_tang:.4f}, proj {result.kl_proj:.4f})")
        results.append(result)
    return results
