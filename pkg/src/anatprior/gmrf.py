"""Cholesky factorisation, solves and exact sampling for sparse Gaussian
Markov random fields given in canonical form ``N(Q^-1 b, Q^-1)``.

Small systems (``n <= DENSE_MAX``) use a dense LAPACK Cholesky. Larger ones
are permuted with reverse Cuthill-McKee to a narrow band and factorised with
the LAPACK banded routines.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.linalg import lapack
from scipy.sparse.csgraph import reverse_cuthill_mckee

DENSE_MAX = 64


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    def __init__(self, pivot: int):
        self.pivot = pivot
        super().__init__(f"matrix is not positive definite (failed at pivot {pivot})")


@dataclass(frozen=True)
class CholeskyFactor:
    """``Q[perm][:, perm] = G @ G.T`` with ``G`` lower triangular.

    ``data`` is either the dense ``G`` (``kd is None``) or ``G`` in LAPACK
    lower band storage with ``kd`` sub-diagonals.
    """
    perm: np.ndarray
    data: np.ndarray
    kd: int | None

    @property
    def n(self) -> int:
        return self.perm.size

    @property
    def is_dense(self) -> bool:
        return self.kd is None

    def lower(self) -> np.ndarray:
        """Dense copy of ``G``."""
        if self.is_dense:
            return self.data.copy()
        n, kd = self.n, self.kd
        G = np.zeros((n, n))
        for d in range(kd + 1):
            idx = np.arange(n - d)
            G[idx + d, idx] = self.data[d, : n - d]
        return G

    def diagonal(self) -> np.ndarray:
        return np.diag(self.data).copy() if self.is_dense else self.data[0].copy()

    def _tri(self, rhs, trans: bool):
        """Solve ``G x = rhs`` (or ``G.T x = rhs``) in permuted coordinates."""
        if self.is_dense:
            return scipy.linalg.solve_triangular(self.data, rhs, lower=True, trans=1 if trans else 0,
                                                 check_finite=False)
        x, info = lapack.dtbtrs(self.data, rhs, uplo="L", trans="T" if trans else "N")
        if info != 0:
            raise np.linalg.LinAlgError(f"banded triangular solve failed (info={info})")
        return x

    def _check(self, b) -> tuple[np.ndarray, bool]:
        b = np.asarray(b, dtype=np.float64)
        if b.shape[0] != self.n:
            raise ValueError(f"right-hand side has length {b.shape[0]}, factor has dimension {self.n}")
        vec = b.ndim == 1
        return (b[:, None] if vec else b), vec

    def solve(self, b) -> np.ndarray:
        b, vec = self._check(b)
        y = self._tri(b[self.perm], trans=False)
        xp = self._tri(y, trans=True)
        x = np.empty_like(xp)
        x[self.perm] = xp
        return x[:, 0] if vec else x

    def sample(self, b, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Draw from ``N(Q^-1 b, Q^-1)``; ``size`` adds independent draws along
        a trailing axis."""
        b = np.asarray(b, dtype=np.float64)
        if b.shape != (self.n,):
            raise ValueError(f"b has shape {b.shape}, expected ({self.n},)")
        m = 1 if size is None else size
        eps = rng.standard_normal((self.n, m))
        y = self._tri(b[self.perm][:, None], trans=False)
        xp = self._tri(y + eps, trans=True)
        x = np.empty_like(xp)
        x[self.perm] = xp
        return x[:, 0] if size is None else x

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(self.diagonal())))


def _ordering(Q: sp.csr_matrix, ordering) -> np.ndarray:
    n = Q.shape[0]
    if isinstance(ordering, str):
        if ordering == "natural":
            return np.arange(n)
        if ordering in ("rcm", "banding"):
            return np.asarray(reverse_cuthill_mckee(Q, symmetric_mode=True), dtype=np.int64)
        raise ValueError(f"unknown ordering {ordering!r}")
    perm = np.asarray(ordering, dtype=np.int64)
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError("ordering must be a permutation of 0..n-1")
    return perm


def rcm_ordering(Q) -> np.ndarray:
    return _ordering(sp.csr_matrix(Q), "rcm")


def _check_pivots(diag, perm, scale):
    # pivots at rounding level mean a numerically singular matrix
    tol = diag.size * np.finfo(float).eps * scale
    bad = np.nonzero(diag**2 <= tol)[0]
    if bad.size:
        raise NotPositiveDefiniteError(int(perm[bad[0]]))


def factorize(Q, ridge: float = 0.0, ordering="rcm", dense_max: int = DENSE_MAX) -> CholeskyFactor:
    """Cholesky factor of ``Q + ridge * I``.

    ``ordering`` is ``"natural"``, ``"rcm"`` or an explicit permutation
    array (reuse one across calls when the sparsity pattern is fixed).
    """
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    if sp.issparse(Q):
        Q = sp.csr_matrix(Q, dtype=np.float64)
    else:
        Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    n = Q.shape[0]
    if Q.shape != (n, n):
        raise ValueError(f"Q must be square, got {Q.shape}")

    if n <= dense_max:
        M = Q.toarray() if sp.issparse(Q) else Q.copy()
        perm = np.arange(n) if isinstance(ordering, str) else _ordering(sp.csr_matrix(M), ordering)
        M = M[np.ix_(perm, perm)]
        if ridge:
            M[np.diag_indices(n)] += ridge
        scale = np.abs(np.diag(M)).max(initial=0.0)
        G, info = lapack.dpotrf(M, lower=1, clean=1)
        if info != 0:
            raise NotPositiveDefiniteError(int(perm[info - 1]) if info > 0 else -1)
        _check_pivots(np.diag(G), perm, scale)
        return CholeskyFactor(perm, G, None)

    Q = sp.csr_matrix(Q)
    Q.sum_duplicates()
    perm = _ordering(Q, ordering)
    iperm = np.empty(n, dtype=np.int64)
    iperm[perm] = np.arange(n)
    Qc = Q.tocoo()
    r, c = iperm[Qc.row], iperm[Qc.col]
    low = r >= c
    r, c, v = r[low], c[low], Qc.data[low]
    kd = int((r - c).max()) if r.size else 0
    ab = np.zeros((kd + 1, n))
    ab[r - c, c] = v
    if ridge:
        ab[0] += ridge
    G, info = lapack.dpbtrf(ab, lower=1)
    if info != 0:
        raise NotPositiveDefiniteError(int(perm[info - 1]) if info > 0 else -1)
    _check_pivots(G[0], perm, np.abs(ab[0]).max(initial=0.0))
    return CholeskyFactor(perm, G, kd)


def solve(F: CholeskyFactor, b) -> np.ndarray:
    return F.solve(b)


def sample_gmrf(F: CholeskyFactor, b, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    return F.sample(b, rng, size)


def logdet(F: CholeskyFactor) -> float:
    return F.logdet()
