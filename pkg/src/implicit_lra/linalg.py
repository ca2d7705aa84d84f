"""Dense matrix primitives: norms, Gram matrices, top-k subspaces and errors.

Matrices are plain 2-d float64 numpy arrays. A rank-k projection is kept in
factored form ``P = V V^T`` with ``V`` a ``d x k`` orthonormal basis.
"""
from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    pass


def as_matrix(M, name="matrix"):
    """Validate and return ``M`` as a finite 2-d float64 array."""
    A = np.asarray(M, dtype=np.float64)
    if A.ndim == 1:
        A = A[None, :]
    if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] < 1:
        raise DimensionError(f"{name} must be a non-empty 2-d array, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} has non-finite entries")
    return A


@dataclass(frozen=True)
class Projection:
    """Rank-k orthogonal projection ``P = V V^T`` acting on rows."""

    basis: np.ndarray

    @property
    def d(self):
        return self.basis.shape[0]

    @property
    def k(self):
        return self.basis.shape[1]

    def matrix(self):
        return self.basis @ self.basis.T

    def apply(self, M):
        """Return ``M P`` (rows of ``M`` projected onto the span of ``V``)."""
        M = np.asarray(M, dtype=np.float64)
        if M.shape[-1] != self.d:
            raise DimensionError(f"expected {self.d} columns, got {M.shape[-1]}")
        return (M @ self.basis) @ self.basis.T

    def orthonormality_defect(self):
        V = self.basis
        return float(np.linalg.norm(V.T @ V - np.eye(self.k)))

    def to_csv(self, path):
        np.savetxt(path, self.basis, delimiter=",", fmt="%.17g")


def frobenius_sq(M):
    A = np.asarray(M, dtype=np.float64)
    return float(np.sum(A * A))


def gram(M):
    A = np.asarray(M, dtype=np.float64)
    G = A.T @ A
    # symmetrize away matmul rounding asymmetry
    return 0.5 * (G + G.T)


def _check_rank(k, d):
    if not 1 <= k <= d:
        raise ValueError(f"rank k must satisfy 1 <= k <= d={d}, got {k}")


def _gram_eig(M):
    w, U = np.linalg.eigh(gram(M))
    # eigh returns ascending order
    return w[::-1], U[:, ::-1]


def top_k_right_singular(M, k):
    """Top-k right singular subspace of ``M`` via eigendecomposition of ``M^T M``.

    Ties between singular values are broken arbitrarily; any orthonormal
    basis of the tied invariant subspace is a valid answer.
    """
    A = np.asarray(M, dtype=np.float64)
    _check_rank(k, A.shape[1])
    _, U = _gram_eig(A)
    V = np.ascontiguousarray(U[:, :k])
    return Projection(V)


def rank_k_error(M, k):
    """``||M - [M]_k||_F^2``, the sum of the trailing squared singular values."""
    A = np.asarray(M, dtype=np.float64)
    _check_rank(k, A.shape[1])
    w, _ = _gram_eig(A)
    return float(np.sum(np.clip(w[k:], 0.0, None)))


def projection_error(M, P):
    """``||M - M P||_F^2`` computed from the explicit residual."""
    A = np.asarray(M, dtype=np.float64)
    if A.shape[1] != P.d:
        raise DimensionError(f"matrix has {A.shape[1]} columns, projection acts on {P.d}")
    R = A - P.apply(A)
    return frobenius_sq(R)


def additive_error(M, P, k=None):
    """``(||M - MP||^2 - ||M - [M]_k||^2) / ||M||^2``."""
    k = P.k if k is None else k
    total = frobenius_sq(M)
    if total == 0.0:
        return 0.0
    return (projection_error(M, P) - rank_k_error(M, k)) / total


def relative_error(M, P, k=None):
    """``||M - MP||^2 / ||M - [M]_k||^2`` (inf when the optimum is zero and P is not)."""
    k = P.k if k is None else k
    best = rank_k_error(M, k)
    got = projection_error(M, P)
    if best <= 1e-12 * max(frobenius_sq(M), 1e-300):
        return 1.0 if got <= 1e-8 * max(frobenius_sq(M), 1e-300) else float("inf")
    return got / best


def random_orthonormal(d, k, rng):
    Q, _ = np.linalg.qr(rng.standard_normal((d, k)))
    return Projection(Q)
