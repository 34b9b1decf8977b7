"""Riemannian MAP training, tangent-space Laplace posteriors and their baselines.

Pipeline: riemannian_map -> tangent_hessian -> laplace_sample -> predictive.
Gauss+Proj, deep ensembles and predictive distillation reuse the same pieces.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.linalg import LinAlgError, cholesky, solve_triangular
from scipy.special import log_softmax, softmax

from AdapterModel import (
    AdapterGrad,
    AdapterLayer,
    AmbientAdapter,
    backward,
    forward,
    grad_log_posterior,
    init_adapters,
    jvp_logits,
    log_posterior,
    make_posterior_spec,
    predict_proba,
)
from errors import CholeskyError, DivergenceError, NumericalError
from StiefelManifold import (
    TangentVector,
    from_coordinates,
    polar_project,
    qr_retract,
    sym,
    tangent_basis,
    tangent_project,
)

HESSIAN_MODES = ("exact_fd", "ggn", "diagonal")
COMPONENTS = ("none", "sigma", "u", "u_v", "u_sigma_v")
SIGMA_RULES = ("adam", "momentum")
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
FD_STEP = 1e-5
DAMPING_FACTOR = 1e-4
DAMPING_GROWTH = 10.0
MAX_DAMPING_RAISES = 20
# Probability floor for logs of averaged predictives.
PROB_FLOOR = 1e-300
# Per-example Riemannian gradient norm above which a Laplace expansion point is reported.
STATIONARITY_TOL = 5e-2


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    learning_rate: float = Field(0.05, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    epochs: int = Field(30, gt=0)
    batch_size: int = Field(16, gt=0)
    seed: int = Field(0, ge=0)
    hessian_points: int = Field(1024, gt=0)
    hessian_mode: Literal["exact_fd", "ggn", "diagonal"] = "exact_fd"
    sigma_rule: Literal["adam", "momentum"] = "adam"


class DistillConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    temperature: float = Field(2.0, gt=0.0)
    epochs: int = Field(1, gt=0)
    learning_rate: float = Field(0.05, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    batch_size: int = Field(16, gt=0)
    seed: int = Field(0, ge=0)
    sigma_rule: Literal["adam", "momentum"] = "momentum"


@dataclass
class TrainResult:
    params: list
    trace: list = field(default_factory=list)
    sigma_trajectory: list = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class PosteriorSampleSet:
    samples: tuple

    def __post_init__(self):
        if not self.samples:
            raise ValueError("A sample set needs at least one parameter set")
        object.__setattr__(self, "samples", tuple(tuple(s) for s in self.samples))

    @property
    def S(self):
        return len(self.samples)

    @classmethod
    def from_members(cls, results):
        return cls(tuple(r.params for r in results))


@dataclass(frozen=True, eq=False)
class LaplacePosterior:
    """Gaussian in joint tangent coordinates [U coords, V coords, sigma] per adapter.

    `curvature` holds -H before damping; `precision` the damped matrix.
    Only coordinates in `active` are sampled, the rest stay at the MAP.
    """
    map_params: tuple
    bases: tuple
    curvature: tuple
    precision: tuple
    cholesky: tuple
    active: tuple
    damping: tuple
    hessian_mode: str
    components: str

    @property
    def m_total(self):
        return sum(P.shape[0] for P in self.precision)

    @property
    def sigma_precision(self):
        return tuple(np.diag(P)[-a.rank:] for P, a in zip(self.precision, self.map_params))

    def block_sizes(self, j):
        basis_U, basis_V = self.bases[j]
        return basis_U.m, basis_V.m, self.map_params[j].rank


@dataclass(frozen=True, eq=False)
class AmbientGaussianPosterior:
    """Gaussian over ambient coordinates [vec U, vec V, sigma] per adapter, given by C with C C^T = covariance."""
    mean: tuple
    cov_factors: tuple
    hessian_mode: str = "given"

    def __post_init__(self):
        for adapter, C in zip(self.mean, self.cov_factors):
            expected = adapter.u_array.size + adapter.v_array.size + adapter.sigma.size
            if C.ndim != 2 or C.shape[0] != expected:
                raise ValueError(f"Covariance factor must have {expected} rows, got {C.shape}")

    def covariance(self, j):
        C = self.cov_factors[j]
        return C @ C.T


def _component_mask(components, m_U, m_V, k):
    if components not in COMPONENTS:
        raise ValueError(f"Unknown component set '{components}', expected one of {COMPONENTS}")
    use_U = components in ("u", "u_v", "u_sigma_v")
    use_V = components in ("u_v", "u_sigma_v")
    use_sigma = components in ("sigma", "u_sigma_v")
    return np.concatenate([np.full(m_U, use_U), np.full(m_V, use_V), np.full(k, use_sigma)])


def _scale_grad(grad, factor):
    return AdapterGrad(grad.U * factor, grad.sigma * factor, grad.V * factor)


class RiemannianMomentum:
    """Gradient ascent with heavy-ball momentum on Stiefel factors and flat sigma.

    Column i of a factor gradient carries a factor sigma_i, so it is divided by max(1, |sigma_i|)
    and projected back to the tangent space. The velocity of a Stiefel factor is moved to the
    next iterate by tangent projection. Sigma follows either the same heavy-ball rule or Adam
    with beta1 = momentum.
    """

    def __init__(self, learning_rate, momentum, sigma_rule="adam"):
        if sigma_rule not in SIGMA_RULES:
            raise ValueError(f"Unknown sigma rule '{sigma_rule}', expected one of {SIGMA_RULES}")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.sigma_rule = sigma_rule
        self.velocity = None
        self.second_moment = None
        self.steps = 0

    def _sigma_step(self, i, v_sigma, grad_sigma):
        if self.sigma_rule == "momentum":
            v_sigma = self.momentum * v_sigma + grad_sigma
            return v_sigma, self.learning_rate * v_sigma
        v_sigma = self.momentum * v_sigma + (1.0 - self.momentum) * grad_sigma
        self.second_moment[i] = ADAM_BETA2 * self.second_moment[i] + (1.0 - ADAM_BETA2) * grad_sigma ** 2
        first = v_sigma / (1.0 - self.momentum ** self.steps)
        second = self.second_moment[i] / (1.0 - ADAM_BETA2 ** self.steps)
        return v_sigma, self.learning_rate * first / (np.sqrt(second) + ADAM_EPS)

    def step(self, adapters, grads):
        """One update; returns the new adapters and the (unpreconditioned) Riemannian gradient norm."""
        if self.velocity is None:
            self.velocity = [(np.zeros(a.U.shape), np.zeros(a.rank), np.zeros(a.V.shape)) for a in adapters]
            self.second_moment = [np.zeros(a.rank) for a in adapters]
        self.steps += 1
        updated = []
        sq_norm = 0.0
        for i, (adapter, grad) in enumerate(zip(adapters, grads)):
            v_U, v_sigma, v_V = self.velocity[i]
            r_U = tangent_project(adapter.U, grad.U).data
            r_V = tangent_project(adapter.V, grad.V).data
            sq_norm += float(np.sum(r_U ** 2) + np.sum(grad.sigma ** 2) + np.sum(r_V ** 2))
            scale = 1.0 / np.maximum(1.0, np.abs(adapter.sigma))
            v_U = self.momentum * tangent_project(adapter.U, v_U).data + tangent_project(adapter.U, r_U * scale).data
            v_V = self.momentum * tangent_project(adapter.V, v_V).data + tangent_project(adapter.V, r_V * scale).data
            v_sigma, sigma_step = self._sigma_step(i, v_sigma, grad.sigma)
            self.velocity[i] = (v_U, v_sigma, v_V)
            updated.append(AdapterLayer(
                U=qr_retract(adapter.U, TangentVector(adapter.U, self.learning_rate * v_U)),
                sigma=adapter.sigma + sigma_step,
                V=qr_retract(adapter.V, TangentVector(adapter.V, self.learning_rate * v_V)),
                layer_index=adapter.layer_index,
            ))
        return updated, math.sqrt(sq_norm)


def _check_finite(value, grads, step, tag):
    finite = np.isfinite(value) and all(
        np.all(np.isfinite(g.U)) and np.all(np.isfinite(g.sigma)) and np.all(np.isfinite(g.V)) for g in grads)
    if not finite:
        logging.error(f"[{tag}] Non-finite objective at step {step} (value {value})")
        raise DivergenceError(f"Training diverged at step {step}", step=step, diagnostics={"value": float(value)})


def _minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def riemannian_map(base, spec, data, config, init, tag="map"):
    """Riemannian gradient ascent on the log posterior, normalised per training example.

    With no data each epoch takes one step on the prior alone.
    """
    rng = np.random.default_rng(config.seed)
    optimizer = RiemannianMomentum(config.learning_rate, config.momentum, config.sigma_rule)
    params = list(init)
    result = TrainResult(params=params)
    n = len(data)
    step = 0
    for epoch in range(config.epochs):
        batches = _minibatches(n, config.batch_size, rng) if n else [None]
        for index in batches:
            if index is None:
                batch, scale, norm = data, 1.0, 1.0
            else:
                batch, scale, norm = data.subset(index), n / len(index), float(n)
            value = log_posterior(base, params, spec, batch, scale)
            grads = grad_log_posterior(base, params, spec, batch, scale)
            _check_finite(value, grads, step, tag)
            params, grad_norm = optimizer.step(params, [_scale_grad(g, 1.0 / norm) for g in grads])
            result.trace.append((step, float(value), grad_norm))
            step += 1
        result.sigma_trajectory.append(np.concatenate([a.sigma for a in params]))
        logging.debug(f"[{tag}] epoch {epoch + 1}/{config.epochs} log posterior {result.trace[-1][1]:.4f}")
    result.params = params
    logging.info(f"[{tag}] Finished {step} steps; last log posterior {result.trace[-1][1]:.4f}")
    return result


def hessian_subset(data, n_points, seed):
    """Seeded subset of at most n_points examples and the factor N / n_h that rescales it."""
    n = len(data)
    if n == 0:
        return data, 1.0
    index = np.sort(np.random.default_rng(seed).permutation(n)[:min(n_points, n)])
    return data.subset(index), n / len(index)


def stationarity_norm(base, spec, data, params, data_scale=1.0):
    """Riemannian gradient norm of the log posterior per (rescaled) training example."""
    grads = grad_log_posterior(base, params, spec, data, data_scale)
    sq_norm = sum(float(np.sum(tangent_project(a.U, g.U).data ** 2) + np.sum(g.sigma ** 2)
                        + np.sum(tangent_project(a.V, g.V).data ** 2)) for a, g in zip(params, grads))
    n_effective = data_scale * len(data) if len(data) else 1.0
    return math.sqrt(sq_norm) / n_effective


def _check_stationary(base, spec, data, params, data_scale, tag):
    norm = stationarity_norm(base, spec, data, params, data_scale)
    if norm > STATIONARITY_TOL:
        logging.warning(f"[{tag}] Expansion point is not stationary: Riemannian gradient norm {norm:.3e} "
                        f"per example (tolerance {STATIONARITY_TOL:.0e}); the Laplace curvature may be off")
    return norm


def constraint_curvature(directions, point, grad):
    """-<E_i, E_j sym(P^T G)>: curvature of the orthonormality constraint at P for ambient gradient G."""
    S = sym(point.T @ grad)
    return -np.einsum("iab,jac,cb->ij", directions, directions, S)


def constrained_hessian_fd(grad_fn, points, direction_sets, flat, step=FD_STEP):
    """Central-difference Hessian in the coordinates spanned by `direction_sets` plus flat coordinates.

    `grad_fn(matrices, flat)` returns (ambient gradients of the matrix blocks, flat gradient).
    Each matrix block adds constraint_curvature at its base point, so with tangent bases the
    result is the Riemannian Hessian under the embedded metric. Not symmetrised.
    """
    points = [np.asarray(p, dtype=np.float64) for p in points]
    flat = np.asarray(flat, dtype=np.float64).reshape(-1)
    sizes = [E.shape[0] for E in direction_sets] + [flat.size]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    m = int(offsets[-1])

    def coordinates(grads):
        matrices, g_flat = grads
        parts = [np.einsum("mij,ij->m", E, G) for E, G in zip(direction_sets, matrices)]
        return np.concatenate(parts + [np.asarray(g_flat, dtype=np.float64).reshape(-1)])

    H = np.empty((m, m))
    for j in range(m):
        block = int(np.searchsorted(offsets, j, side="right")) - 1
        local = j - offsets[block]
        columns = []
        for sign in (1.0, -1.0):
            matrices = list(points)
            shifted = flat.copy()
            if block < len(points):
                matrices[block] = points[block] + sign * step * direction_sets[block][local]
            else:
                shifted[local] += sign * step
            columns.append(coordinates(grad_fn(matrices, shifted)))
        H[:, j] = (columns[0] - columns[1]) / (2.0 * step)
    gradients, _ = grad_fn(points, flat)
    for b, (P, E, G) in enumerate(zip(points, direction_sets, gradients)):
        block = slice(offsets[b], offsets[b + 1])
        H[block, block] += constraint_curvature(E, P, G)
    return H


def adapter_grad_fn(base, adapters, spec, batch, data_scale, j):
    layer_index = adapters[j].layer_index

    def grad_fn(matrices, flat):
        trial = list(adapters)
        trial[j] = AmbientAdapter(matrices[0], flat, matrices[1], layer_index)
        grad = grad_log_posterior(base, trial, spec, batch, data_scale)[j]
        return [grad.U, grad.V], grad.sigma
    return grad_fn


def _ggn_block(base, adapters, spec, batch, data_scale, j, direction_sets):
    """Generalised Gauss-Newton of the likelihood plus the exact prior curvature."""
    adapter = adapters[j]
    E_U, E_V = direction_sets
    m_U, m_V, k = E_U.shape[0], E_V.shape[0], adapter.rank
    m = m_U + m_V + k
    H = np.zeros((m, m))
    if len(batch):
        n, C = len(batch), base.n_classes
        J = np.empty((n, C, m))
        for i in range(m):
            dU, dsigma, dV = np.zeros(adapter.u_array.shape), np.zeros(k), np.zeros(adapter.v_array.shape)
            if i < m_U:
                dU = E_U[i]
            elif i < m_U + m_V:
                dV = E_V[i - m_U]
            else:
                dsigma[i - m_U - m_V] = 1.0
            directions = [None] * len(adapters)
            directions[j] = (dU, dsigma, dV)
            _, J[:, :, i] = jvp_logits(base, adapters, batch.inputs, directions)
        p = predict_proba(base, adapters, batch.inputs)
        pJ = np.einsum("nc,ncm->nm", p, J)
        fisher = np.einsum("ncm,ncl->ml", J, p[:, :, None] * J) - pJ.T @ pJ
        H -= data_scale * fisher
    H[:m_U, :m_U] += constraint_curvature(E_U, adapter.u_array, spec.priors_U[j].F)
    H[m_U:m_U + m_V, m_U:m_U + m_V] += constraint_curvature(E_V, adapter.v_array, spec.priors_V[j].F)
    H[m_U + m_V:, m_U + m_V:] -= np.eye(k) / spec.tau ** 2
    return H


def _curvature_block(base, adapters, spec, batch, data_scale, j, direction_sets, mode, step):
    if mode not in HESSIAN_MODES:
        raise ValueError(f"Unknown Hessian mode '{mode}', expected one of {HESSIAN_MODES}")
    adapter = adapters[j]
    if mode == "ggn":
        H = _ggn_block(base, adapters, spec, batch, data_scale, j, direction_sets)
    else:
        grad_fn = adapter_grad_fn(base, adapters, spec, batch, data_scale, j)
        H = constrained_hessian_fd(grad_fn, [adapter.u_array, adapter.v_array], direction_sets, adapter.sigma, step)
        if mode == "diagonal":
            H = np.diag(np.diag(H))
    if not np.all(np.isfinite(H)):
        raise NumericalError(f"Non-finite curvature entries for adapter {j} ({mode})")
    return H


def damp_precision(P, tag="laplace"):
    """Add lambda I with lambda = 1e-4 * |mean diagonal|, growing tenfold until Cholesky succeeds."""
    P = sym(np.asarray(P, dtype=np.float64))
    if not np.all(np.isfinite(P)):
        raise NumericalError("Precision matrix has non-finite entries")
    m = P.shape[0]
    if m == 0:
        return P, np.zeros((0, 0)), 0.0
    mean_diag = float(np.mean(np.diag(P)))
    lam = DAMPING_FACTOR * (abs(mean_diag) if mean_diag != 0.0 else 1.0)
    for _ in range(MAX_DAMPING_RAISES):
        damped = P + lam * np.eye(m)
        try:
            return damped, cholesky(damped, lower=True), lam
        except LinAlgError:
            logging.warning(f"[{tag}] Cholesky failed with damping {lam:.1e}; raising to {lam * DAMPING_GROWTH:.1e}")
            lam *= DAMPING_GROWTH
    raise CholeskyError(f"Precision is not positive definite even with damping {lam:.1e}")


def build_laplace_posterior(map_params, curvatures, hessian_mode="given", components="u_sigma_v", tag="laplace"):
    """Damp each -H block and factor the active sub-block."""
    map_params = tuple(map_params)
    bases = tuple((tangent_basis(a.U), tangent_basis(a.V)) for a in map_params)
    precisions, factors, masks, dampings = [], [], [], []
    for (basis_U, basis_V), adapter, curvature in zip(bases, map_params, curvatures):
        expected = basis_U.m + basis_V.m + adapter.rank
        if curvature.shape != (expected, expected):
            raise ValueError(f"Curvature block must be {expected}x{expected}, got {curvature.shape}")
        damped, _, lam = damp_precision(curvature, tag)
        mask = _component_mask(components, basis_U.m, basis_V.m, adapter.rank)
        try:
            L = cholesky(damped[np.ix_(mask, mask)], lower=True) if mask.any() else np.zeros((0, 0))
        except LinAlgError as e:
            raise CholeskyError(f"Active precision block is not positive definite: {e}")
        precisions.append(damped)
        factors.append(L)
        masks.append(mask)
        dampings.append(lam)
    logging.info(f"[{tag}] Laplace posterior: {sum(P.shape[0] for P in precisions)} coordinates, "
                 f"mode {hessian_mode}, components {components}, damping {max(dampings, default=0.0):.1e}")
    return LaplacePosterior(
        map_params=map_params,
        bases=bases,
        curvature=tuple(sym(np.asarray(c, dtype=np.float64)) for c in curvatures),
        precision=tuple(precisions),
        cholesky=tuple(factors),
        active=tuple(masks),
        damping=tuple(dampings),
        hessian_mode=hessian_mode,
        components=components,
    )


def tangent_hessian(base, spec, data_subset, map_params, mode="exact_fd", data_scale=1.0,
                    components="u_sigma_v", step=FD_STEP, tag="laplace"):
    """Laplace posterior from the log-posterior Hessian in orthonormal tangent coordinates.

    `data_scale` multiplies the likelihood curvature (N / n_h for a subset of n_h points).
    A warning is logged when the expansion point is not stationary.
    """
    map_params = list(map_params)
    _check_stationary(base, spec, data_subset, map_params, data_scale, tag)
    curvatures = []
    for j, adapter in enumerate(map_params):
        direction_sets = (tangent_basis(adapter.U).array, tangent_basis(adapter.V).array)
        H = _curvature_block(base, map_params, spec, data_subset, data_scale, j, direction_sets, mode, step)
        curvatures.append(-sym(H))
    return build_laplace_posterior(map_params, curvatures, mode, components, tag)


def sample_tangent_coordinates(post, S, rng):
    """S draws of the joint coordinates per adapter; inactive coordinates are zero."""
    draws = []
    for P, L, mask in zip(post.precision, post.cholesky, post.active):
        coords = np.zeros((S, P.shape[0]))
        eps = rng.standard_normal((S, L.shape[0]))
        if L.shape[0]:
            coords[:, mask] = solve_triangular(L, eps.T, lower=True, trans="T").T
        draws.append(coords)
    return draws


def laplace_sample(post, S, rng):
    """Draw tangent coordinates, expand them in the bases and retract each factor with QR."""
    if S < 1:
        raise ValueError(f"Sample count must be positive, got {S}")
    draws = sample_tangent_coordinates(post, S, rng)
    samples = []
    for s in range(S):
        params = []
        for j, adapter in enumerate(post.map_params):
            basis_U, basis_V = post.bases[j]
            m_U, m_V, _ = post.block_sizes(j)
            c = draws[j][s]
            params.append(AdapterLayer(
                U=qr_retract(adapter.U, from_coordinates(basis_U, c[:m_U])),
                sigma=adapter.sigma + c[m_U + m_V:],
                V=qr_retract(adapter.V, from_coordinates(basis_V, c[m_U:m_U + m_V])),
                layer_index=adapter.layer_index,
            ))
        samples.append(params)
    return PosteriorSampleSet(tuple(samples))


def _identity_directions(shape):
    size = shape[0] * shape[1]
    return np.eye(size).reshape(size, *shape)


def ambient_laplace(base, spec, data_subset, map_params, mode="exact_fd", data_scale=1.0,
                    step=FD_STEP, tag="gauss-proj"):
    """Gaussian over the ambient factors with the Hessian of the Lagrangian at the MAP.

    Its restriction to the tangent space equals the tangent Hessian, so both baselines
    spend the same curvature information.
    """
    map_params = list(map_params)
    _check_stationary(base, spec, data_subset, map_params, data_scale, tag)
    factors = []
    for j, adapter in enumerate(map_params):
        direction_sets = (_identity_directions(adapter.U.shape), _identity_directions(adapter.V.shape))
        H = _curvature_block(base, map_params, spec, data_subset, data_scale, j, direction_sets, mode, step)
        _, L, _ = damp_precision(-H, tag)
        factors.append(solve_triangular(L, np.eye(L.shape[0]), lower=True, trans="T"))
    logging.info(f"[{tag}] Ambient Gaussian over {sum(C.shape[0] for C in factors)} coordinates, mode {mode}")
    return AmbientGaussianPosterior(tuple(map_params), tuple(factors), mode)


def embed_laplace(post):
    """Ambient Gaussian whose draws are the Laplace tangent draws (same random stream usage)."""
    factors = []
    for j, adapter in enumerate(post.map_params):
        basis_U, basis_V = post.bases[j]
        m_U, m_V, k = post.block_sizes(j)
        size_U, size_V = adapter.U.data.size, adapter.V.data.size
        M = np.zeros((size_U + size_V + k, m_U + m_V + k))
        M[:size_U, :m_U] = basis_U.matrix()
        M[size_U:size_U + size_V, m_U:m_U + m_V] = basis_V.matrix()
        M[size_U + size_V:, m_U + m_V:] = np.eye(k)
        L = post.cholesky[j]
        if L.shape[0]:
            factor = M[:, post.active[j]] @ solve_triangular(L, np.eye(L.shape[0]), lower=True, trans="T")
        else:
            factor = np.zeros((M.shape[0], 0))
        factors.append(factor)
    return AmbientGaussianPosterior(post.map_params, tuple(factors), post.hessian_mode)


def gauss_proj_sample(post, S, rng):
    """Ambient Gaussian perturbations of the MAP factors followed by polar projection."""
    if S < 1:
        raise ValueError(f"Sample count must be positive, got {S}")
    perturbations = []
    for C in post.cov_factors:
        eps = rng.standard_normal((S, C.shape[1]))
        perturbations.append(eps @ C.T)
    samples = []
    for s in range(S):
        params = []
        for j, adapter in enumerate(post.mean):
            size_U, size_V = adapter.u_array.size, adapter.v_array.size
            delta = perturbations[j][s]
            params.append(AdapterLayer(
                U=polar_project(adapter.u_array + delta[:size_U].reshape(adapter.u_array.shape)),
                sigma=adapter.sigma + delta[size_U + size_V:],
                V=polar_project(adapter.v_array + delta[size_U:size_U + size_V].reshape(adapter.v_array.shape)),
                layer_index=adapter.layer_index,
            ))
        samples.append(params)
    return PosteriorSampleSet(tuple(samples))


def _parameter_sets(sample_set):
    if isinstance(sample_set, PosteriorSampleSet):
        return sample_set.samples
    return tuple(sample_set)


def per_sample_probs(base, sample_set, x, temperature=1.0):
    """Softmax outputs of every parameter set, shape (S, n, C)."""
    return np.stack([predict_proba(base, params, x, temperature) for params in _parameter_sets(sample_set)])


def predictive(base, sample_set, x):
    """Average of the per-sample softmax outputs, summed in sample order."""
    sets = _parameter_sets(sample_set)
    if not sets:
        raise ValueError("Predictive averaging needs at least one sample")
    total = np.zeros((np.shape(x)[0], base.n_classes))
    for params in sets:
        total += predict_proba(base, params, x)
    return total / len(sets)


def _tempered_targets(base, teacher, inputs, temperature):
    mean = predictive(base, teacher, inputs)
    return softmax(np.log(np.maximum(mean, PROB_FLOOR)) / temperature, axis=1)


def distillation_kl(base, teacher, student, inputs, temperature=2.0):
    """Mean KL(teacher || student) between temperature-scaled predictives."""
    targets = _tempered_targets(base, teacher, inputs, temperature)
    log_student = log_softmax(forward(base, student, inputs) / temperature, axis=1)
    log_targets = np.log(np.maximum(targets, PROB_FLOOR))
    return float(np.mean(np.sum(targets * (log_targets - log_student), axis=1)))


def distill(base, teacher, student_init, inputs, config=None, tag="distill"):
    """Train a single Stiefel-constrained adapter set to match the teacher's averaged predictive.

    Minimises T^2 * KL(p_teacher^T || p_student^T) with no prior term.
    """
    config = config or DistillConfig()
    T = config.temperature
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = _tempered_targets(base, teacher, inputs, T)
    log_targets = np.log(np.maximum(targets, PROB_FLOOR))
    rng = np.random.default_rng(config.seed)
    optimizer = RiemannianMomentum(config.learning_rate, config.momentum, config.sigma_rule)
    params = list(student_init)
    result = TrainResult(params=params)
    n = inputs.shape[0]
    step = 0
    for _ in range(config.epochs):
        for index in _minibatches(n, config.batch_size, rng):
            x, t = inputs[index], targets[index]
            log_student = log_softmax(forward(base, params, x) / T, axis=1)
            value = -T ** 2 * float(np.mean(np.sum(t * (log_targets[index] - log_student), axis=1)))
            dlogits = T * (t - np.exp(log_student)) / len(index)
            grads = backward(base, params, x, dlogits)
            _check_finite(value, grads, step, tag)
            params, grad_norm = optimizer.step(params, grads)
            result.trace.append((step, value, grad_norm))
            step += 1
        result.sigma_trajectory.append(np.concatenate([a.sigma for a in params]))
    result.params = params
    logging.info(f"[{tag}] Distilled for {step} steps at temperature {T}")
    return result


def member_seeds(seed, n_members):
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(n_members)]


def deep_ensemble(base, prior_config, data, config, n_members, rank, layer_indices=(0,), tag="ensemble"):
    """Independent MAP runs, each with its own seed, initialisation and prior centre."""
    if n_members < 2:
        raise ValueError(f"An ensemble needs at least 2 members, got {n_members}")
    results = []
    for i, seed in enumerate(member_seeds(config.seed, n_members)):
        init = init_adapters(base, rank, np.random.default_rng(seed), layer_indices)
        spec = make_posterior_spec(init, prior_config)
        results.append(riemannian_map(base, spec, data, config.model_copy(update={"seed": seed}), init,
                                      tag=f"{tag}-member{i}"))
    return results
