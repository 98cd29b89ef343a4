"""
Self-expressive coefficients: ridge (LSR) closed forms, entrywise
evaluation through a d x d Woodbury core, and an elastic-net solver.

Every routine solves, column by column,

    min_c  1/2 ||x_j - X c||^2 + eta1/2 ||c||^2 + eta3 ||c||_1   s.t. c_j = 0

(the unconstrained ridge forms drop the ``c_j = 0`` constraint).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from .core import (
    CoeffMatrix,
    ConvergenceError,
    DataMatrix,
    SupportPattern,
    ValidationError,
)

DENSE_N_CAP = 8000


def _values(X):
    return X.values if isinstance(X, DataMatrix) else np.asarray(X, dtype=np.float64)


@dataclass(frozen=True)
class WoodburyCache:
    """d x d factors that give LSR coefficients one entry at a time.

    ``M`` is built from the Woodbury form of (X^T X + gamma I)^{-1} X^T X,
    so that C_ij = x_i^T M x_j. Algebraically M equals ``Zcore`` =
    (gamma I + X X^T)^{-1}; both are kept because ``Zcore`` also yields
    entries of (X^T X + gamma I)^{-1} for the zero-diagonal correction.
    """

    gamma: float
    M: np.ndarray
    Zcore: np.ndarray

    @classmethod
    def build(cls, X, gamma):
        if not gamma > 0:
            raise ValidationError(f"gamma must be > 0, got {gamma!r}")
        V = _values(X)
        d = V.shape[0]
        G = V @ V.T
        eye = np.eye(d)
        inner = la.solve(eye + G / gamma, G, assume_a="pos")
        M = eye / gamma - inner / gamma**2
        M = 0.5 * (M + M.T)
        Zcore = la.inv(gamma * eye + G)
        Zcore = 0.5 * (Zcore + Zcore.T)
        return cls(float(gamma), M, Zcore)

    def zfull_diag(self, X):
        """Diagonal of (X^T X + gamma I)^{-1}, O(n d^2)."""
        V = _values(X)
        q = np.einsum("ij,ij->j", V, self.Zcore @ V)
        return (1.0 - q) / self.gamma

    def c0_diag(self, X):
        V = _values(X)
        return np.einsum("ij,ij->j", V, self.M @ V)


def _zfull_dense(V, gamma):
    """(X^T X + gamma I)^{-1}, through the cheaper of the two systems."""
    d, n = V.shape
    if d < n:
        core = la.inv(gamma * np.eye(d) + V @ V.T)
        Z = (np.eye(n) - V.T @ core @ V) / gamma
    else:
        Z = la.inv(V.T @ V + gamma * np.eye(n))
    return 0.5 * (Z + Z.T)


def lsr_dense(X, gamma, zero_diag=False, max_n=DENSE_N_CAP):
    """Dense least-squares-regression coefficients.

    Without ``zero_diag`` this is the closed form (X^T X + gamma I)^{-1} X^T X.
    With it, each column is corrected by a multiple of the matching column
    of Z = (X^T X + gamma I)^{-1} so that its own entry vanishes, which is the
    exact minimizer under ``c_j = 0``.
    """
    if not gamma > 0:
        raise ValidationError(f"gamma must be > 0, got {gamma!r}")
    V = _values(X)
    n = V.shape[1]
    if n > max_n:
        raise ValidationError(f"n={n} exceeds the dense LSR cap of {max_n}; use lsr_entries")
    Z = _zfull_dense(V, gamma)
    # (X^T X + gamma I)^{-1} X^T X = I - gamma Z
    C = np.eye(n) - gamma * Z
    if zero_diag:
        mu = np.diag(C) / np.diag(Z)
        C = C - Z * mu[None, :]
        np.fill_diagonal(C, 0.0)
    return CoeffMatrix.from_dense(C, zero_diag=zero_diag)


def lsr_entries(cache, X, S, zero_diag=False, chunk=1 << 16):
    """LSR coefficients on the positions of ``S`` only.

    Returns a CSR matrix with an explicit entry for every position of ``S``
    (zeros included). Work is O(nnz(S) d) after an O(n d^2) setup and memory
    never reaches O(n^2).
    """
    V = _values(X)
    n = V.shape[1]
    if S.n != n:
        raise ValidationError(f"support is {S.n} x {S.n} but X has {n} points")
    rows, cols = S.coo()
    vals = _entries(cache, V, rows, cols, zero_diag, chunk)
    return sp.csr_matrix((vals, S.indices.copy(), S.indptr.copy()), shape=(n, n))


def _entries(cache, V, rows, cols, zero_diag, chunk=1 << 16):
    n = V.shape[1]
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.size and (min(rows.min(), cols.min()) < 0 or max(rows.max(), cols.max()) >= n):
        raise ValidationError(f"entry index out of range [0, {n})")
    W = cache.M @ V
    out = np.empty(rows.size)
    for s in range(0, rows.size, chunk):
        r, c = rows[s:s + chunk], cols[s:s + chunk]
        out[s:s + chunk] = np.einsum("ij,ij->j", V[:, r], W[:, c])
    if zero_diag:
        zd = cache.zfull_diag(V)
        mu = cache.c0_diag(V) / zd
        Zc = cache.Zcore @ V
        for s in range(0, rows.size, chunk):
            r, c = rows[s:s + chunk], cols[s:s + chunk]
            zrc = ((r == c).astype(np.float64) - np.einsum("ij,ij->j", V[:, r], Zc[:, c])) / cache.gamma
            out[s:s + chunk] -= zrc * mu[c]
        out[rows == cols] = 0.0
    return out


def _en_objective(G, C, j_cols, eta1, eta3):
    """Per-column elastic-net objective, up to the constant 1/2 ||x_j||^2."""
    GC = G @ C
    quad = 0.5 * np.einsum("ij,ij->j", C, GC)
    lin = np.einsum("ij,ij->j", G[:, j_cols], C)
    return quad - lin + 0.5 * eta1 * np.einsum("ij,ij->j", C, C) + eta3 * np.abs(C).sum(axis=0), GC


def _kkt_residual(grad, C, eta3, j_cols):
    """Max violation of the soft-threshold optimality conditions per column."""
    nz = C != 0
    r = np.where(nz, np.abs(grad + eta3 * np.sign(C)), np.maximum(np.abs(grad) - eta3, 0.0))
    r[j_cols, np.arange(len(j_cols))] = 0.0
    return r.max(axis=0) if r.size else np.zeros(0)


def ensc_solve(X, eta1, eta3, tol=1e-6, max_iter=10000, max_n=DENSE_N_CAP, trace=None):
    """Elastic-net self-expression with a zero diagonal.

    Runs monotone FISTA (with gradient-based restarts) on all columns at
    once; columns leave the active batch once their KKT residual drops
    below ``tol``. ``eta3 == 0`` reduces to :func:`lsr_dense` with
    ``zero_diag=True``.

    If ``trace`` is a list, the per-column objective vector is appended at
    every iteration (objective values exclude the constant 1/2 ||x_j||^2).
    """
    if not eta1 > 0:
        raise ValidationError(f"eta1 must be > 0, got {eta1!r}")
    if eta3 < 0:
        raise ValidationError(f"eta3 must be >= 0, got {eta3!r}")
    if eta3 == 0:
        return lsr_dense(X, eta1, zero_diag=True, max_n=max_n)
    V = _values(X)
    n = V.shape[1]
    if n > max_n:
        raise ValidationError(f"n={n} exceeds the dense elastic-net cap of {max_n}")
    G = V.T @ V
    L = np.linalg.eigvalsh(G)[-1] + eta1
    step = 1.0 / L
    thresh = eta3 * step

    C = np.zeros((n, n))
    active = np.arange(n)
    x = np.zeros((n, n))  # current iterate (active columns)
    y = x.copy()
    t = np.ones(n)
    at_x = np.ones(n, dtype=bool)  # y == x, so the prox step is a sure descent step
    fx, _ = _en_objective(G, x, active, eta1, eta3)
    residual = np.full(n, np.inf)

    for it in range(max_iter):
        cols = active
        ycols = y
        grad = G @ ycols - G[:, cols] + eta1 * ycols
        z = ycols - step * grad
        z = np.sign(z) * np.maximum(np.abs(z) - thresh, 0.0)
        z[cols, np.arange(cols.size)] = 0.0
        fz, Gz = _en_objective(G, z, cols, eta1, eta3)
        # a step from y == x is accepted even if rounding makes fz look larger
        better = (fz <= fx) | at_x
        x_prev = x
        x_new = np.where(better[None, :], z, x_prev)
        f_new = np.where(better, fz, fx)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        mom_z = (t / t_new)[None, :] * (z - x_new)
        mom_x = ((t - 1.0) / t_new)[None, :] * (x_new - x_prev)
        y_new = x_new + mom_z + mom_x
        # restart momentum where the step went uphill or was rejected
        uphill = ~better | (np.einsum("ij,ij->j", ycols - z, z - x_prev) > 0)
        y_new[:, uphill] = x_new[:, uphill]
        t_new[uphill] = 1.0
        at_x_new = uphill
        if trace is not None:
            full = C.copy()
            full[:, cols] = x_new
            tr, _ = _en_objective(G, full, np.arange(n), eta1, eta3)
            trace.append(tr)

        grad_x = G @ x_new - G[:, cols] + eta1 * x_new
        res = _kkt_residual(grad_x, x_new, eta3, cols)
        residual[cols] = res
        done = res <= tol
        C[:, cols] = x_new
        if done.all():
            active = cols[:0]
            break
        keep = ~done
        active = cols[keep]
        x, y, t, fx = x_new[:, keep], y_new[:, keep], t_new[keep], f_new[keep]
        at_x = at_x_new[keep]
    if active.size:
        worst = int(active[np.argmax(residual[active])])
        raise ConvergenceError(
            f"elastic net did not converge in {max_iter} iterations; "
            f"worst column {worst} has KKT residual {residual[worst]:.3g}",
            partial=CoeffMatrix.from_dense(C),
            diagnostics={"worst_column": worst, "residual": float(residual[worst])},
        )
    np.fill_diagonal(C, 0.0)
    return CoeffMatrix.from_dense(C)
