"""
Shared containers, the doubly stochastic membership test, and validated
constructors used by the rest of the package.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

DEFAULT_FEASIBILITY_TOL = 1e-4
_NORM_TOL = 1e-12


class DsscError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(DsscError, ValueError):
    """Bad input: shapes, ranges, non-finite values, malformed files."""


class ConvergenceError(DsscError, RuntimeError):
    """An iterative solver hit its cap before meeting its tolerance.

    ``partial`` carries whatever the solver had when it stopped, and
    ``diagnostics`` a dict of residuals useful for debugging.
    """

    def __init__(self, message, partial=None, diagnostics=None):
        super().__init__(message)
        self.partial = partial
        self.diagnostics = dict(diagnostics or {})


class InfeasibleSupportError(ConvergenceError):
    """The restricted projection has no doubly stochastic point on its support."""


class FormatError(DsscError, OSError):
    """A file could not be parsed in the expected format."""


def n_workers():
    """Worker cap from ``DSSC_THREADS`` (defaults to the CPU count)."""
    raw = os.environ.get("DSSC_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ValidationError(f"DSSC_THREADS must be an integer, got {raw!r}")
    return os.cpu_count() or 1


def _frozen(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DataMatrix:
    """A d x n point set, one data point per column."""

    values: np.ndarray
    unit_normalized: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValidationError(f"data matrix must be 2-D, got shape {values.shape}")
        d, n = values.shape
        if d < 1 or n < 2:
            raise ValidationError(f"need d >= 1 and n >= 2, got d={d}, n={n}")
        bad = np.argwhere(~np.isfinite(values))
        if bad.size:
            r, c = bad[0]
            raise ValidationError(f"non-finite entry at row {r}, column {c}")
        if self.unit_normalized:
            norms = np.linalg.norm(values, axis=0)
            zero = np.flatnonzero(norms == 0)
            if zero.size:
                raise ValidationError(f"zero column {zero[0]} cannot be unit-normalized")
            off = np.flatnonzero(np.abs(norms - 1.0) > _NORM_TOL)
            if off.size:
                raise ValidationError(
                    f"column {off[0]} has norm {norms[off[0]]!r}, expected 1"
                )
        object.__setattr__(self, "values", _frozen(values))

    @property
    def d(self):
        return self.values.shape[0]

    @property
    def n(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class CoeffMatrix:
    """Self-expressive coefficients, stored column-compressed.

    ``nonneg`` is set for the split parts of the joint model, which must
    be entrywise nonnegative.
    """

    entries: sp.csc_matrix
    zero_diag: bool = True
    nonneg: bool = False

    def __post_init__(self):
        C = sp.csc_matrix(self.entries, dtype=np.float64)
        if C.shape[0] != C.shape[1]:
            raise ValidationError(f"coefficient matrix must be square, got {C.shape}")
        if not np.all(np.isfinite(C.data)):
            raise ValidationError("coefficient matrix has non-finite entries")
        if self.zero_diag and np.any(C.diagonal() != 0):
            i = int(np.flatnonzero(C.diagonal())[0])
            raise ValidationError(f"nonzero diagonal entry at ({i}, {i})")
        if self.nonneg and C.nnz and C.data.min() < 0:
            raise ValidationError("negative entry in a nonnegative coefficient matrix")
        C.sort_indices()
        object.__setattr__(self, "entries", C)

    @classmethod
    def from_dense(cls, C, zero_diag=True, nonneg=False):
        return cls(sp.csc_matrix(np.asarray(C, dtype=np.float64)), zero_diag, nonneg)

    @property
    def n(self):
        return self.entries.shape[0]

    def toarray(self):
        return self.entries.toarray()


@dataclass(frozen=True)
class AffinityReport:
    """Result of the doubly stochastic membership test."""

    max_row_dev: float
    max_col_dev: float
    min_entry: float
    tol: float

    @property
    def passed(self):
        return (
            self.max_row_dev <= self.tol
            and self.max_col_dev <= self.tol
            and self.min_entry >= 0.0
        )


def _row_col_sums(A):
    if sp.issparse(A):
        return np.asarray(A.sum(axis=1)).ravel(), np.asarray(A.sum(axis=0)).ravel()
    A = np.asarray(A)
    return A.sum(axis=1), A.sum(axis=0)


def _min_entry(A):
    if sp.issparse(A):
        A = sp.coo_matrix(A)
        stored = A.data.min() if A.nnz else 0.0
        # any structural zero counts as an entry equal to 0
        if A.nnz < A.shape[0] * A.shape[1]:
            stored = min(stored, 0.0)
        return float(stored)
    return float(np.min(A))


def validate_affinity(A, tol=DEFAULT_FEASIBILITY_TOL):
    """Measure how far ``A`` is from the Birkhoff polytope.

    Accepts a :class:`StochasticAffinity`, a scipy sparse matrix or a dense
    array. Never raises; the caller decides what to do with a failed report.
    """
    if isinstance(A, StochasticAffinity):
        A = A.entries
    rows, cols = _row_col_sums(A)
    return AffinityReport(
        max_row_dev=float(np.max(np.abs(rows - 1.0))),
        max_col_dev=float(np.max(np.abs(cols - 1.0))),
        min_entry=_min_entry(A),
        tol=float(tol),
    )


@dataclass(frozen=True)
class StochasticAffinity:
    """Nonnegative n x n affinity whose rows and columns sum to one."""

    entries: sp.csr_matrix
    feasibility_tol: float = DEFAULT_FEASIBILITY_TOL

    def __post_init__(self):
        A = sp.csr_matrix(self.entries, dtype=np.float64)
        if A.shape[0] != A.shape[1]:
            raise ValidationError(f"affinity must be square, got {A.shape}")
        if not np.all(np.isfinite(A.data)):
            raise ValidationError("affinity has non-finite entries")
        A.eliminate_zeros()
        A.sort_indices()
        report = validate_affinity(A, self.feasibility_tol)
        if not report.passed:
            raise ValidationError(
                "matrix is not doubly stochastic within "
                f"{self.feasibility_tol:g}: row dev {report.max_row_dev:.3g}, "
                f"col dev {report.max_col_dev:.3g}, min entry {report.min_entry:.3g}"
            )
        object.__setattr__(self, "entries", A)

    @property
    def n(self):
        return self.entries.shape[0]

    @property
    def nnz(self):
        return self.entries.nnz

    def toarray(self):
        return self.entries.toarray()

    def report(self, tol=None):
        return validate_affinity(self.entries, self.feasibility_tol if tol is None else tol)


@dataclass(frozen=True)
class SupportPattern:
    """Binary n x n sparsity mask held as per-row sorted column indices.

    Stored CSR-style (``indptr``/``indices``); :attr:`rows` gives the list
    view. With ``include_diagonal=False`` diagonal positions are stripped at
    construction. The complement is never materialized.
    """

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    include_diagonal: bool = False

    def __post_init__(self):
        n = int(self.n)
        indptr = np.asarray(self.indptr, dtype=np.int64)
        indices = np.asarray(self.indices, dtype=np.int64)
        if indptr.shape != (n + 1,) or indptr[0] != 0 or indptr[-1] != indices.size:
            raise ValidationError("malformed support index pointer")
        if np.any(np.diff(indptr) < 0):
            raise ValidationError("support index pointer must be non-decreasing")
        if indices.size and (indices.min() < 0 or indices.max() >= n):
            raise ValidationError(f"support column index out of range [0, {n})")
        row_of = np.repeat(np.arange(n), np.diff(indptr))
        # canonicalize: sort within rows, drop duplicates (and the diagonal if excluded)
        order = np.lexsort((indices, row_of))
        row_of, indices = row_of[order], indices[order]
        keep = np.ones(indices.size, dtype=bool)
        if indices.size:
            keep[1:] = (row_of[1:] != row_of[:-1]) | (indices[1:] != indices[:-1])
        if not self.include_diagonal:
            keep &= row_of != indices
        row_of, indices = row_of[keep], indices[keep]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(row_of, minlength=n), out=indptr[1:])
        indptr.setflags(write=False)
        indices.setflags(write=False)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)

    @classmethod
    def from_rows(cls, rows, include_diagonal=False):
        rows = [np.asarray(r, dtype=np.int64) for r in rows]
        for i, r in enumerate(rows):
            if np.unique(r).size != r.size:
                raise ValidationError(f"duplicate column index in support row {i}")
        indptr = np.zeros(len(rows) + 1, dtype=np.int64)
        np.cumsum([r.size for r in rows], out=indptr[1:])
        indices = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        return cls(len(rows), indptr, indices, include_diagonal)

    @classmethod
    def from_coo(cls, n, rows, cols, include_diagonal=False):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if rows.size and (rows.min() < 0 or rows.max() >= n):
            raise ValidationError(f"support row index out of range [0, {n})")
        order = np.argsort(rows, kind="stable")
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
        return cls(n, indptr, cols[order], include_diagonal)

    @classmethod
    def from_matrix(cls, M, include_diagonal=False):
        """Support of the nonzero (strictly, ``!= 0``) entries of ``M``."""
        M = sp.coo_matrix(M)
        mask = M.data != 0
        return cls.from_coo(M.shape[0], M.row[mask], M.col[mask], include_diagonal)

    @classmethod
    def full(cls, n, include_diagonal=True):
        indices = np.tile(np.arange(n, dtype=np.int64), n)
        return cls(n, np.arange(0, n * n + 1, n, dtype=np.int64), indices, include_diagonal)

    @classmethod
    def permutation(cls, perm, include_diagonal=True):
        perm = np.asarray(perm, dtype=np.int64)
        n = perm.size
        return cls(n, np.arange(n + 1, dtype=np.int64), perm, include_diagonal)

    @property
    def nnz(self):
        return int(self.indices.size)

    @property
    def rows(self):
        return [self.indices[self.indptr[i]:self.indptr[i + 1]] for i in range(self.n)]

    def coo(self):
        """Row and column index arrays in row-major order."""
        return np.repeat(np.arange(self.n, dtype=np.int64), np.diff(self.indptr)), self.indices

    def union(self, other):
        if other.n != self.n:
            raise ValidationError("cannot merge supports of different sizes")
        r1, c1 = self.coo()
        r2, c2 = other.coo()
        return SupportPattern.from_coo(
            self.n,
            np.concatenate([r1, r2]),
            np.concatenate([c1, c2]),
            self.include_diagonal or other.include_diagonal,
        )

    def contains(self, other):
        """True when every position of ``other`` is also in this pattern."""
        return self.union(other).nnz == self.nnz

    def to_csr(self, data=None):
        if data is None:
            data = np.ones(self.nnz)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))


@dataclass(frozen=True)
class DsscParams:
    """Hyperparameters of the joint and sequential models.

    ``rho`` and ``tau`` only matter for the ADMM solver; ``k`` is the
    cluster count (``None`` when only an affinity is wanted).
    """

    eta1: float
    eta2: float
    eta3: float = 0.0
    rho: float = 0.5
    tau: float = 1e-4
    k: int | None = None

    def __post_init__(self):
        for name in ("eta1", "eta2", "rho", "tau"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ValidationError(f"{name} must be > 0, got {v!r}")
        if not np.isfinite(self.eta3) or self.eta3 < 0:
            raise ValidationError(f"eta3 must be >= 0, got {self.eta3!r}")
        if self.k is not None and int(self.k) < 2:
            raise ValidationError(f"k must be >= 2, got {self.k!r}")

    def check_k(self, n):
        if self.k is not None and self.k > n:
            raise ValidationError(f"k={self.k} exceeds the number of points n={n}")


def symmetrize(A):
    """Return (A + A^T) / 2, keeping sparse inputs sparse."""
    if A.shape[0] != A.shape[1]:
        raise ValidationError(f"cannot symmetrize a non-square matrix of shape {A.shape}")
    if sp.issparse(A):
        S = (sp.csr_matrix(A) + sp.csr_matrix(A).T) * 0.5
        S = sp.csr_matrix(S)
        S.sort_indices()
        return S
    A = np.asarray(A, dtype=np.float64)
    return 0.5 * (A + A.T)


def unit_normalize_columns(X):
    """Scale each column of ``X`` to unit Euclidean norm.

    Raises :class:`ValidationError` naming the first zero column.
    """
    values = X.values if isinstance(X, DataMatrix) else np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(values, axis=0)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValidationError(f"zero column {zero[0]} cannot be unit-normalized")
    out = values / norms
    # a second pass fixes the last-ulp drift of the first division
    out = out / np.linalg.norm(out, axis=0)
    return DataMatrix(out, unit_normalized=True)
