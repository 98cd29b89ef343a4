"""Clustering and affinity scores: ACC, NMI, SPE and nonzeros per column."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linear_sum_assignment

from .core import StochasticAffinity, ValidationError
from .spectral import ClusterLabels


@dataclass(frozen=True)
class EvalReport:
    acc: float
    nmi: float
    spe: float | None = None
    nnz_per_col: float | None = None

    def as_dict(self):
        d = asdict(self)
        d["nnz"] = d.pop("nnz_per_col")
        return d


def _labels(x):
    return x.labels if isinstance(x, ClusterLabels) else np.asarray(x)


def _contingency(pred, truth):
    pred, truth = _labels(pred), _labels(truth)
    if pred.shape != truth.shape:
        raise ValidationError(f"label vectors differ in length: {pred.size} vs {truth.size}")
    _, p = np.unique(pred, return_inverse=True)
    _, t = np.unique(truth, return_inverse=True)
    M = np.zeros((p.max(initial=-1) + 1, t.max(initial=-1) + 1))
    np.add.at(M, (p, t), 1.0)
    return M


def accuracy(pred, truth):
    """Fraction of points correctly labeled under the best one-to-one matching."""
    M = _contingency(pred, truth)
    if M.size == 0:
        return 1.0
    r, c = linear_sum_assignment(-M)
    return float(M[r, c].sum() / M.sum())


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(pred, truth):
    """Mutual information over the arithmetic mean of the two entropies."""
    M = _contingency(pred, truth)
    total = M.sum()
    if total == 0:
        return 1.0
    hp, ht = _entropy(M.sum(axis=1)), _entropy(M.sum(axis=0))
    if hp + ht == 0:
        return 1.0
    P = M / total
    outer = np.outer(P.sum(axis=1), P.sum(axis=0))
    nz = P > 0
    mi = float(np.sum(P[nz] * np.log(P[nz] / outer[nz])))
    return float(min(1.0, max(0.0, mi / (0.5 * (hp + ht)))))


def _as_csc(A):
    if isinstance(A, StochasticAffinity):
        A = A.entries
    return sp.csc_matrix(A, dtype=np.float64)


def spe(A, truth):
    """Mean over columns of the share of |A| mass on points of other clusters.

    All-zero columns contribute 0 and are counted in a warning.
    """
    A = _as_csc(A)
    y = _labels(truth)
    n = A.shape[1]
    if y.size != n:
        raise ValidationError(f"{y.size} labels for an affinity with {n} columns")
    absA = abs(A).tocoo()
    col_total = np.bincount(absA.col, absA.data, n)
    off = absA.data * (y[absA.row] != y[absA.col])
    col_off = np.bincount(absA.col, off, n)
    zero = col_total == 0
    if zero.any():
        warnings.warn(f"{int(zero.sum())} all-zero columns counted as error-free", RuntimeWarning, stacklevel=2)
    frac = np.divide(col_off, col_total, out=np.zeros(n), where=~zero)
    return float(frac.mean())


def nnz_per_col(A, threshold=1e-12):
    A = _as_csc(A)
    return float(np.count_nonzero(np.abs(A.data) > threshold) / A.shape[1])


def evaluate(pred, truth, A=None):
    if A is None:
        return EvalReport(accuracy(pred, truth), nmi(pred, truth))
    return EvalReport(accuracy(pred, truth), nmi(pred, truth), spe(A, truth), nnz_per_col(A))
