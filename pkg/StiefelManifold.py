"""Differential geometry of the Stiefel manifold St(k, d).

Points are d x k matrices with orthonormal columns. Tangent vectors at U are
matrices D with U^T D + D^T U = 0; the normal space at U is {U S : S symmetric}.
All routines work at 64-bit precision and never mutate their inputs.
"""
import math
from dataclasses import dataclass

import numpy as np

from errors import RankDeficiencyError

ORTHONORMAL_TOL = 1e-10
SKEW_TOL = 1e-10
SYMMETRY_TOL = 1e-12
GRAM_TOL = 1e-8
# Relative size of the smallest R diagonal (or singular value) below which a matrix is rank deficient.
RANK_TOL = 1e-12


def sym(X):
    return 0.5 * (X + X.T)


def skew(X):
    return 0.5 * (X - X.T)


def _frozen(array):
    out = np.array(array, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


def orthonormality_residual(data):
    k = data.shape[1]
    return float(np.max(np.abs(data.T @ data - np.eye(k)))) if k else 0.0


def tangency_residual(base, data):
    """Max-abs entry of U^T D + D^T U, the tangency defect of D at U."""
    M = base.T @ data
    return float(np.max(np.abs(M + M.T))) if M.size else 0.0


@dataclass(frozen=True, eq=False)
class StiefelPoint:
    data: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.data)
        if arr.ndim != 2:
            raise ValueError(f"Stiefel point must be a matrix, got shape {arr.shape}")
        d, k = arr.shape
        if k < 1 or k > d:
            raise ValueError(f"Stiefel point needs 1 <= k <= d, got d={d}, k={k}")
        residual = orthonormality_residual(arr)
        if residual > ORTHONORMAL_TOL:
            raise ValueError(f"Columns are not orthonormal (residual {residual:.2e})")
        object.__setattr__(self, "data", arr)

    @property
    def d(self):
        return self.data.shape[0]

    @property
    def k(self):
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True, eq=False)
class TangentVector:
    base: StiefelPoint
    data: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.data)
        _check_shape(self.base, arr)
        residual = tangency_residual(self.base.data, arr)
        if residual > SKEW_TOL * max(1.0, float(np.max(np.abs(arr))) if arr.size else 1.0):
            raise ValueError(f"Matrix is not tangent at the base point (residual {residual:.2e})")
        object.__setattr__(self, "data", arr)

    def norm(self):
        return float(np.linalg.norm(self.data))

    def scaled(self, factor):
        return TangentVector(self.base, factor * self.data)


@dataclass(frozen=True, eq=False)
class NormalVector:
    base: StiefelPoint
    sym: np.ndarray

    def __post_init__(self):
        S = _frozen(self.sym)
        k = self.base.k
        if S.shape != (k, k):
            raise ValueError(f"Normal factor must be {k}x{k}, got {S.shape}")
        if np.max(np.abs(S - S.T), initial=0.0) > SYMMETRY_TOL * max(1.0, float(np.max(np.abs(S), initial=0.0))):
            raise ValueError("Normal factor S is not symmetric")
        object.__setattr__(self, "sym", S)

    @property
    def data(self):
        return self.base.data @ self.sym


@dataclass(frozen=True, eq=False)
class TangentBasis:
    """Frobenius-orthonormal basis of the tangent space, stored as an (m, d, k) array."""
    base: StiefelPoint
    array: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.array)
        expected = manifold_dim(self.base.d, self.base.k)
        if arr.shape != (expected, self.base.d, self.base.k):
            raise ValueError(f"Basis must have shape {(expected, self.base.d, self.base.k)}, got {arr.shape}")
        flat = arr.reshape(expected, -1)
        gram = flat @ flat.T
        if expected and np.max(np.abs(gram - np.eye(expected))) > GRAM_TOL:
            raise ValueError("Basis vectors are not orthonormal")
        object.__setattr__(self, "array", arr)

    @property
    def m(self):
        return self.array.shape[0]

    @property
    def vectors(self):
        return [TangentVector(self.base, E) for E in self.array]

    def matrix(self):
        """Basis as a (d*k, m) matrix whose columns are the flattened vectors."""
        return self.array.reshape(self.m, -1).T


def _check_shape(U, X):
    if np.shape(X) != U.shape:
        raise ValueError(f"Shape mismatch: base point {U.shape}, matrix {np.shape(X)}")


def manifold_dim(d, k):
    if not (isinstance(d, (int, np.integer)) and isinstance(k, (int, np.integer))):
        raise ValueError(f"Dimensions must be integers, got d={d!r}, k={k!r}")
    if d < 1 or k < 1:
        raise ValueError(f"Dimensions must be positive, got d={d}, k={k}")
    if k > d:
        raise ValueError(f"Rank k={k} exceeds ambient dimension d={d}")
    return int(d * k - k * (k + 1) // 2)


def tangent_project(U, G):
    """Orthogonal projection of an ambient matrix onto T_U: G - U sym(U^T G)."""
    _check_shape(U, G)
    G = np.asarray(G, dtype=np.float64)
    return TangentVector(U, G - U.data @ sym(U.data.T @ G))


def qr_retract(U, delta):
    """Q factor of U + delta with a nonnegative R diagonal."""
    _check_shape(U, delta.data)
    if not np.any(delta.data):
        return U
    Q, R = np.linalg.qr(U.data + delta.data)
    diag = np.diag(R)
    scale = np.max(np.abs(R))
    if not np.all(np.isfinite(R)) or np.min(np.abs(diag)) <= RANK_TOL * max(scale, 1e-300):
        raise RankDeficiencyError(f"U + delta is rank deficient (min |R_ii| = {np.min(np.abs(diag)):.2e})")
    signs = np.where(diag < 0, -1.0, 1.0)
    return StiefelPoint(Q * signs)


def polar_project(W):
    """Closest orthonormal matrix W (W^T W)^(-1/2), computed from the thin SVD."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] > W.shape[0]:
        raise ValueError(f"Polar projection needs a tall matrix, got shape {W.shape}")
    left, singular, right_t = np.linalg.svd(W, full_matrices=False)
    if not np.all(np.isfinite(singular)) or singular[-1] <= RANK_TOL * max(singular[0], 1e-300):
        raise RankDeficiencyError(f"Matrix is rank deficient (smallest singular value {singular[-1]:.2e})")
    return StiefelPoint(left @ right_t)


def normal_decompose(U, X):
    """Split X into its tangent part X - U sym(U^T X) and normal part U sym(U^T X)."""
    _check_shape(U, X)
    X = np.asarray(X, dtype=np.float64)
    S = sym(U.data.T @ X)
    xi_n = NormalVector(U, S)
    xi_t = TangentVector(U, X - U.data @ S)
    return xi_t, xi_n


def orthogonal_complement(U):
    Q, _ = np.linalg.qr(U.data, mode="complete")
    return Q[:, U.k:]


def tangent_basis(U):
    """Deterministic orthonormal tangent basis.

    Skew directions U A come first (A elementary skew, scaled by 1/sqrt(2)),
    then complement directions U_perp E_rc in row-major order.
    """
    d, k = U.shape
    vectors = []
    root_half = 1.0 / math.sqrt(2.0)
    for i in range(k):
        for j in range(i + 1, k):
            A = np.zeros((k, k))
            A[i, j] = root_half
            A[j, i] = -root_half
            vectors.append(U.data @ A)
    U_perp = orthogonal_complement(U)
    for r in range(d - k):
        for c in range(k):
            E = np.zeros((d, k))
            E[:, c] = U_perp[:, r]
            vectors.append(E)
    array = np.array(vectors).reshape(len(vectors), d, k)
    return TangentBasis(U, array)


def tangent_coordinates(basis, X):
    """Coordinates of X in the basis (exact for tangent X, the projection otherwise)."""
    data = X.data if isinstance(X, TangentVector) else np.asarray(X, dtype=np.float64)
    _check_shape(basis.base, data)
    return np.einsum("mij,ij->m", basis.array, data)


def from_coordinates(basis, coords):
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape != (basis.m,):
        raise ValueError(f"Expected {basis.m} coordinates, got shape {coords.shape}")
    return TangentVector(basis.base, np.einsum("m,mij->ij", coords, basis.array))


def haar_sample(d, k, rng):
    manifold_dim(d, k)
    Q, R = np.linalg.qr(rng.standard_normal((d, k)))
    signs = np.where(np.diag(R) < 0, -1.0, 1.0)
    return StiefelPoint(Q * signs)


def haar_sample_batch(d, k, n, rng):
    """n Haar-distributed frames as a raw (n, d, k) array."""
    manifold_dim(d, k)
    Q, R = np.linalg.qr(rng.standard_normal((n, d, k)))
    signs = np.where(np.diagonal(R, axis1=1, axis2=2) < 0, -1.0, 1.0)
    return Q * signs[:, None, :]


def random_tangent(U, rng):
    """Unit-norm tangent vector from the projected standard Gaussian."""
    xi = tangent_project(U, rng.standard_normal(U.shape))
    return xi.scaled(1.0 / xi.norm())
