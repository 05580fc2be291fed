"""Seedable randomness and small dense linear-algebra kernels.

The kernels are thin, validated wrappers around LAPACK (via numpy/scipy).
Everything here is pure except :class:`RngStream`, whose only state is the
underlying counter-based generator.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import InvalidInputError

__all__ = [
    "RngStream",
    "svd",
    "symtridiag_eigen",
    "sym_eigen",
    "numeric_rank",
]


class RngStream:
    """Counter-based random stream that can be split into independent children.

    A stream is identified by ``(seed, key)``. Children created with
    :meth:`split` get ``key + (i,)`` so per-task or per-probe sub-streams are
    reproducible regardless of how much the parent has been consumed.
    Philox is used because its output does not depend on the platform.
    """

    def __init__(self, seed: int, key: Sequence[int] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, *key: int) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(key))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, key={self.key})"

    def uniform01(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def uniform(self, low, high, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def gaussian(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def rademacher(self, size=None) -> np.ndarray:
        return self._gen.integers(0, 2, size=size).astype(np.float64) * 2.0 - 1.0

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(int(n))

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(int(n), size=size, replace=replace)

    def binomial(self, n, p, size=None):
        return self._gen.binomial(n, p, size)

    def draw(self, kind: str, size=None):
        """Dispatch by name: ``uniform01``, ``gaussian``, ``rademacher`` or ``permutation``."""
        if kind == "uniform01":
            return self.uniform01(size)
        if kind == "gaussian":
            return self.gaussian(size)
        if kind == "rademacher":
            return self.rademacher(size)
        if kind == "permutation":
            return self.permutation(size)
        raise InvalidInputError(f"unknown draw kind {kind!r}")


def _as_finite_matrix(M) -> np.ndarray:
    A = np.asarray(M, dtype=np.float64)
    if A.ndim != 2:
        raise InvalidInputError(f"expected a 2-D matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InvalidInputError("matrix contains non-finite entries")
    return A


def svd(M) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``M = U @ diag(s) @ V.T`` with ``s`` descending.

    Returns ``V`` (not ``V.T``) so that column ``i`` of ``U`` and ``V`` pair
    with ``s[i]``.
    """
    A = _as_finite_matrix(M)
    if A.size == 0:
        k = min(A.shape)
        return np.zeros((A.shape[0], k)), np.zeros(k), np.zeros((A.shape[1], k))
    try:
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError:
        # gesdd occasionally fails to converge; gesvd is slower but robust
        U, s, Vt = scipy.linalg.svd(A, full_matrices=False, lapack_driver="gesvd")
    return U, s, Vt.T


def symtridiag_eigen(diag, offdiag) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues and squared first eigenvector components of a symmetric tridiagonal.

    The squared first components are the Gauss quadrature weights used by
    stochastic Lanczos quadrature; they sum to one.
    """
    d = np.asarray(diag, dtype=np.float64).ravel()
    e = np.asarray(offdiag, dtype=np.float64).ravel()
    if d.size == 0:
        raise InvalidInputError("empty tridiagonal")
    if e.size != d.size - 1:
        raise InvalidInputError(
            f"offdiag length {e.size} must equal diag length - 1 ({d.size - 1})"
        )
    if not (np.all(np.isfinite(d)) and np.all(np.isfinite(e))):
        raise InvalidInputError("tridiagonal contains non-finite entries")
    if d.size == 1:
        return d.copy(), np.ones(1)
    values, vectors = scipy.linalg.eigh_tridiagonal(d, e)
    weights = vectors[0, :] ** 2
    return values, weights / weights.sum()


def sym_eigen(M, tol: float = 1e-8) -> np.ndarray:
    """All eigenvalues of a symmetric matrix, ascending."""
    A = _as_finite_matrix(M)
    if A.shape[0] != A.shape[1]:
        raise InvalidInputError(f"matrix must be square, got {A.shape}")
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if A.size and np.max(np.abs(A - A.T)) > tol * scale:
        raise InvalidInputError("matrix is not symmetric")
    return np.linalg.eigvalsh(0.5 * (A + A.T))


def numeric_rank(M, rel_tol: float = 1e-8) -> int:
    """Count singular values above ``rel_tol * s_max``."""
    s = np.linalg.svd(_as_finite_matrix(M), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))
