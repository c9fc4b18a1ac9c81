"""Sparse symmetric positive definite factorization, solves and log-determinants.

Matrices arising on lattices (MRF precisions plus diagonal data terms) have a
small bandwidth once reordered, so factorization uses a reverse Cuthill-McKee
ordering followed by LAPACK banded Cholesky (``dpbtrf``).  The factor is kept
in LAPACK lower band storage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lapack
from scipy.sparse.csgraph import reverse_cuthill_mckee

PIVOT_TOL = 1e-12


class IndefiniteMatrixError(np.linalg.LinAlgError):
    """Cholesky hit a non-positive (or numerically negligible) pivot."""

    def __init__(self, pivot: int, value: float | None = None):
        self.pivot = pivot
        self.value = value
        msg = f"matrix is not positive definite: pivot at index {pivot}"
        if value is not None:
            msg += f" (value {value:.3g})"
        super().__init__(msg)


class SparseSymmetric:
    """Symmetric sparse matrix stored as its lower triangle."""

    def __init__(self, lower: sp.spmatrix):
        lower = sp.csr_matrix(sp.tril(lower))
        if lower.shape[0] != lower.shape[1]:
            raise ValueError(f"matrix must be square, got {lower.shape}")
        lower.sum_duplicates()
        self.lower = lower

    @classmethod
    def from_full(cls, matrix, check: bool = True, tol: float = 1e-12) -> "SparseSymmetric":
        m = sp.csr_matrix(matrix)
        if check:
            diff = abs(m - m.T)
            scale = max(abs(m).max(), 1.0)
            if diff.nnz and diff.max() > tol * scale:
                raise ValueError("matrix is not symmetric")
        return cls(m)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.lower.shape

    def full(self) -> sp.csr_matrix:
        strict = sp.tril(self.lower, k=-1)
        return sp.csr_matrix(self.lower + strict.T)

    def diagonal(self) -> np.ndarray:
        return self.lower.diagonal()

    def __matmul__(self, x):
        return self.full() @ x

    def __add__(self, other):
        if isinstance(other, SparseSymmetric):
            return SparseSymmetric(self.lower + other.lower)
        return NotImplemented

    def scaled(self, c: float) -> "SparseSymmetric":
        return SparseSymmetric(self.lower * c)


def _as_symmetric(M) -> SparseSymmetric:
    if isinstance(M, SparseSymmetric):
        return M
    if isinstance(M, np.ndarray):
        return SparseSymmetric.from_full(sp.csr_matrix(M))
    return SparseSymmetric.from_full(M)


def _bandwidth(coo: sp.coo_matrix) -> int:
    if coo.nnz == 0:
        return 0
    return int(np.max(np.abs(coo.row - coo.col)))


@dataclass(frozen=True, eq=False)
class CholeskyFactor:
    """Permuted banded Cholesky factor: ``M[perm][:, perm] = L @ L.T``."""

    perm: np.ndarray
    band: np.ndarray  # lower band storage, band[k, j] = L[j + k, j]
    n: int

    @property
    def bandwidth(self) -> int:
        return self.band.shape[0] - 1

    def _check_rows(self, b: np.ndarray):
        if b.shape[0] != self.n:
            raise ValueError(f"dimension mismatch: factor is {self.n}, right-hand side has {b.shape[0]} rows")

    def solve(self, b) -> np.ndarray:
        return solve(self, b)

    def log_det(self) -> float:
        return log_det(self)

    def lower_dense(self) -> np.ndarray:
        """Dense L in the permuted ordering (small problems and tests only)."""
        L = np.zeros((self.n, self.n))
        for k in range(self.band.shape[0]):
            idx = np.arange(self.n - k)
            L[idx + k, idx] = self.band[k, : self.n - k]
        return L

    def reconstruct(self) -> np.ndarray:
        """Dense ``M`` in the original ordering, from the factor."""
        L = self.lower_dense()
        Mp = L @ L.T
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.n)
        return Mp[np.ix_(inv, inv)]

    def apply_lower_t(self, x: np.ndarray) -> np.ndarray:
        """``L.T @ x`` for x in the permuted ordering."""
        y = self.band[0][:, None] * x
        for k in range(1, self.band.shape[0]):
            y[: self.n - k] += self.band[k, : self.n - k][:, None] * x[k:]
        return y

    def half_solve(self, b) -> np.ndarray:
        """``L^{-1} b[perm]``, so that ``b.T M^{-1} b`` is the Gram matrix of the result."""
        b = np.asarray(b, dtype=float)
        self._check_rows(b)
        vec = b.ndim == 1
        bp = np.asfortranarray((b[:, None] if vec else b)[self.perm])
        y, info = lapack.dtbtrs(self.band, bp, uplo="L", trans="N")
        if info != 0:
            raise np.linalg.LinAlgError(f"triangular band solve failed (info={info})")
        return y[:, 0] if vec else y

    def quad_form(self, x) -> np.ndarray:
        """``x.T M x`` computed as ``||L.T P x||^2``; columnwise for 2-D input."""
        x = np.asarray(x, dtype=float)
        vec = x.ndim == 1
        xp = (x[:, None] if vec else x)[self.perm]
        y = self.apply_lower_t(xp)
        out = np.sum(y * y, axis=0)
        return float(out[0]) if vec else out

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Draw from N(0, M^{-1})."""
        k = 1 if size is None else size
        z = rng.standard_normal((self.n, k))
        xp, info = lapack.dtbtrs(self.band, z, uplo="L", trans="T")
        if info != 0:
            raise np.linalg.LinAlgError(f"triangular band solve failed (info={info})")
        x = np.empty_like(xp)
        x[self.perm] = xp
        return x[:, 0] if size is None else x.T


def factorize(M, ordering: str = "rcm", perm=None) -> CholeskyFactor:
    """Cholesky-factorize a sparse symmetric positive definite matrix.

    ``ordering`` is ``"rcm"`` (reverse Cuthill-McKee, falling back to natural
    order when that is narrower) or ``"natural"``.  A precomputed ``perm``
    (for repeated factorizations with a fixed pattern) overrides it.
    """
    S = _as_symmetric(M)
    full = S.full().tocsr()
    n = full.shape[0]
    natural = np.arange(n)
    if perm is not None:
        perm = np.asarray(perm, dtype=int)
        if perm.shape != (n,):
            raise ValueError("permutation length does not match the matrix")
    elif ordering == "natural":
        perm = natural
    elif ordering == "rcm":
        perm = np.asarray(reverse_cuthill_mckee(full, symmetric_mode=True), dtype=int)
        if _bandwidth(full[perm][:, perm].tocoo()) >= _bandwidth(full.tocoo()):
            perm = natural
    else:
        raise ValueError(f"unknown ordering {ordering!r}")
    Mp = sp.tril(full[perm][:, perm]).tocoo()
    bw = _bandwidth(Mp)
    band = np.zeros((bw + 1, n))
    band[Mp.row - Mp.col, Mp.col] = Mp.data
    return factorize_band(band, perm)


def factorize_band(band: np.ndarray, perm: np.ndarray) -> CholeskyFactor:
    """Factorize a matrix already in permuted lower band storage.

    ``band[k, j]`` holds ``M[perm][:, perm][j + k, j]``.
    """
    n = band.shape[1]
    diag = band[0].copy()
    if np.any(diag <= 0):
        i = int(np.flatnonzero(diag <= 0)[0])
        raise IndefiniteMatrixError(int(perm[i]), float(diag[i]))
    c, info = lapack.dpbtrf(band, lower=1)
    if info > 0:
        raise IndefiniteMatrixError(int(perm[info - 1]))
    if info < 0:
        raise ValueError(f"dpbtrf argument error (info={info})")
    # pivots that survived LAPACK but are roundoff-sized relative to the matrix
    pivots = c[0] ** 2
    tiny = pivots < PIVOT_TOL * diag.max()
    if np.any(tiny):
        i = int(np.flatnonzero(tiny)[0])
        raise IndefiniteMatrixError(int(perm[i]), float(pivots[i]))
    return CholeskyFactor(np.asarray(perm), c, n)


def solve(F: CholeskyFactor, B) -> np.ndarray:
    """Solve ``M X = B`` for one or many right-hand sides."""
    B = np.asarray(B, dtype=float)
    F._check_rows(B)
    vec = B.ndim == 1
    Bp = np.asfortranarray((B[:, None] if vec else B)[F.perm])
    Xp, info = lapack.dpbtrs(F.band, Bp, lower=1)
    if info != 0:
        raise ValueError(f"dpbtrs argument error (info={info})")
    X = np.empty_like(Xp)
    X[F.perm] = Xp
    return X[:, 0] if vec else X


def log_det(F: CholeskyFactor) -> float:
    return float(2.0 * np.sum(np.log(F.band[0])))


def dense_cholesky_logdet(A: np.ndarray) -> float:
    """log|A| of a dense SPD matrix via Cholesky."""
    L = np.linalg.cholesky(A)
    return float(2.0 * np.sum(np.log(np.diag(L))))
