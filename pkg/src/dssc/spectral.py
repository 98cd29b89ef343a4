"""
Spectral clustering of an affinity: Laplacian, eigen-embedding and
restarted k-means.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import (
    DEFAULT_FEASIBILITY_TOL,
    ConvergenceError,
    StochasticAffinity,
    ValidationError,
    n_workers,
    symmetrize,
    validate_affinity,
)

logger = logging.getLogger(__name__)

DENSE_EIG_CAP = 2000
DEFAULT_RESTARTS = 16
LAPLACIAN_MODES = ("auto", "unnormalized", "symmetric", "random_walk")
_MODE_ALIASES = {"unnorm": "unnormalized", "sym": "symmetric", "rw": "random_walk"}


@dataclass(frozen=True)
class SpectralEmbedding:
    vectors: np.ndarray
    eigenvalues: np.ndarray
    row_normalized: bool = False


@dataclass(frozen=True)
class ClusterLabels:
    labels: np.ndarray
    k: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 1:
            raise ValidationError("labels must be a 1-D vector")
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise ValidationError("labels must be integers")
        labels = labels.astype(np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= self.k):
            raise ValidationError(f"labels must lie in [0, {self.k})")
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_array(cls, labels):
        """Relabel arbitrary integer ids to 0..k-1 (order of first sorted id)."""
        uniq, inv = np.unique(np.asarray(labels), return_inverse=True)
        return cls(inv.astype(np.int64), max(1, uniq.size))

    @property
    def n(self):
        return self.labels.size


def _as_sparse(A):
    if isinstance(A, StochasticAffinity):
        return A.entries
    return sp.csr_matrix(A, dtype=np.float64)


def laplacian(A, mode="auto", tol=DEFAULT_FEASIBILITY_TOL):
    """Graph Laplacian of the symmetrized affinity (A + A^T) / 2.

    ``auto`` gives I - A_hat when A is doubly stochastic within ``tol`` and
    the normalized Laplacian I - D^{-1/2} A_hat D^{-1/2} otherwise. The other
    modes are D - A_hat, the normalized one, and I - D^{-1} A_hat.
    """
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in LAPLACIAN_MODES:
        raise ValidationError(f"unknown Laplacian mode {mode!r}")
    A = _as_sparse(A)
    if A.shape[0] != A.shape[1]:
        raise ValidationError(f"affinity must be square, got {A.shape}")
    if A.nnz and A.data.min() < 0:
        raise ValidationError("affinity must be nonnegative")
    n = A.shape[0]
    Ah = symmetrize(A)
    eye = sp.identity(n, format="csr")
    if mode == "auto":
        if validate_affinity(A, tol).passed:
            return sp.csr_matrix(eye - Ah)
        mode = "symmetric"
    deg = np.asarray(Ah.sum(axis=1)).ravel()
    if mode == "unnormalized":
        return sp.csr_matrix(sp.diags(deg) - Ah)
    zero = np.flatnonzero(deg <= 0)
    if zero.size:
        raise ValidationError(f"row {zero[0]} of the affinity is zero; degree matrix is singular")
    if mode == "symmetric":
        s = 1.0 / np.sqrt(deg)
        return sp.csr_matrix(eye - sp.diags(s) @ Ah @ sp.diags(s))
    return sp.csr_matrix(eye - sp.diags(1.0 / deg) @ Ah)


def embed(L, k, normalize=True, dense_cap=DENSE_EIG_CAP, check_tol=1e-8):
    """Eigenvectors of the ``k`` smallest eigenvalues of a symmetric ``L``.

    Dense symmetric solver up to ``dense_cap`` points, Lanczos (ARPACK) on
    I - L for the largest eigenvalues above it. Rows are then scaled to unit
    norm; all-zero rows stay zero and trigger a warning.
    """
    n = L.shape[0]
    if not 1 <= k < n:
        raise ValidationError(f"need 1 <= k < n, got k={k}, n={n}")
    if n <= dense_cap:
        M = L.toarray() if sp.issparse(L) else np.asarray(L, dtype=np.float64)
        M = 0.5 * (M + M.T)
        w, U = np.linalg.eigh(M)
        w, U = w[:k], U[:, :k]
    else:
        Ls = sp.csr_matrix(L)
        shifted = sp.identity(n, format="csr") - Ls
        try:
            w, U = spla.eigsh(shifted, k=k, which="LA", tol=1e-12, maxiter=20 * n)
        except spla.ArpackNoConvergence as exc:
            raise ConvergenceError(f"eigensolver did not converge: {exc}") from exc
        w = 1.0 - w
        order = np.argsort(w)
        w, U = w[order], U[:, order]
    resid = L @ U - U * w[None, :]
    worst = float(np.max(np.linalg.norm(resid, axis=0)))
    scale = max(1.0, float(np.max(np.abs(w))))
    if worst > check_tol * scale * max(1.0, np.sqrt(n) / 10):
        raise ConvergenceError(f"eigenpair residual {worst:.3g} exceeds tolerance")
    if not normalize:
        return SpectralEmbedding(U, w, False)
    norms = np.linalg.norm(U, axis=1)
    zero = norms <= 1e-300
    if zero.any():
        warnings.warn(f"{int(zero.sum())} embedding rows are zero; left unnormalized", RuntimeWarning, stacklevel=2)
    U = U / np.where(zero, 1.0, norms)[:, None]
    return SpectralEmbedding(U, w, True)


def _kmeanspp(E, k, rng):
    n = E.shape[0]
    centers = np.empty((k, E.shape[1]))
    centers[0] = E[rng.integers(n)]
    d2 = np.sum((E - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers[c] = E[idx]
        d2 = np.minimum(d2, np.sum((E - centers[c]) ** 2, axis=1))
    return centers


def _lloyd(E, centers, max_iter=300, tol=1e-10):
    k = centers.shape[0]
    sq = np.sum(E * E, axis=1)
    for _ in range(max_iter):
        D = sq[:, None] - 2.0 * E @ centers.T + np.sum(centers * centers, axis=1)[None, :]
        D = np.maximum(D, 0.0)
        labels = np.argmin(D, axis=1)
        mind = D[np.arange(E.shape[0]), labels]
        new = np.empty_like(centers)
        counts = np.bincount(labels, minlength=k)
        for c in range(k):
            if counts[c]:
                new[c] = E[labels == c].mean(axis=0)
            else:
                # reseed an empty cluster at the point farthest from its center
                far = int(np.argmax(mind))
                new[c] = E[far]
                mind[far] = 0.0
        shift = float(np.max(np.sum((new - centers) ** 2, axis=1)))
        centers = new
        if shift <= tol:
            break
    D = sq[:, None] - 2.0 * E @ centers.T + np.sum(centers * centers, axis=1)[None, :]
    labels = np.argmin(D, axis=1)
    inertia = float(np.sum((E - centers[labels]) ** 2))
    return labels, inertia


def kmeans(E, k, restarts=DEFAULT_RESTARTS, seed=0, return_all=False):
    """Lloyd's algorithm with k-means++ seeding, best of ``restarts`` runs.

    Each restart draws from its own child of ``seed``'s SeedSequence, so the
    result is deterministic whatever the worker count. Returns
    ``(ClusterLabels, inertia)``; with ``return_all`` a third element lists
    every restart's ``(labels, inertia)``.
    """
    V = E.vectors if isinstance(E, SpectralEmbedding) else np.asarray(E, dtype=np.float64)
    if V.ndim == 1:
        V = V[:, None]
    if restarts < 1:
        raise ValidationError("restarts must be >= 1")
    if not 1 <= k <= V.shape[0]:
        raise ValidationError(f"need 1 <= k <= n, got k={k}")
    children = np.random.SeedSequence(seed).spawn(restarts)

    def run(ss):
        rng = np.random.default_rng(ss)
        return _lloyd(V, _kmeanspp(V, k, rng))

    workers = min(n_workers(), restarts)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(run, children))
    else:
        runs = [run(ss) for ss in children]
    best = min(range(restarts), key=lambda i: (runs[i][1], i))
    labels, inertia = runs[best]
    out = (ClusterLabels(labels, k), inertia)
    if return_all:
        return out + ([(ClusterLabels(l, k), w) for l, w in runs],)
    return out


def cluster_pipeline(A, k, extra_vec=False, restarts=DEFAULT_RESTARTS, seed=0, mode="auto", return_all=False):
    """Laplacian, (k + extra_vec)-dimensional embedding, k-means into k groups."""
    L = laplacian(A, mode=mode)
    E = embed(L, k + int(bool(extra_vec)))
    out = kmeans(E, k, restarts=restarts, seed=seed, return_all=return_all)
    return out if return_all else out[0]
