"""
Quadratically regularized projection onto the doubly stochastic matrices.

Solves

    min_A  <-|C|, A> + eta2/2 ||A||_F^2   s.t.  A >= 0, A 1 = 1, A^T 1 = 1

through its dual in two potentials (alpha, beta). The primal is recovered
as A = [|C| - alpha 1^T - 1 beta^T]_+ / eta2. The dual may be restricted to a
support pattern; :func:`active_set_project` grows such a support until the
unrestricted recovery is doubly stochastic, which certifies optimality.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize as opt
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components, maximum_bipartite_matching

from .core import (
    DEFAULT_FEASIBILITY_TOL,
    ConvergenceError,
    InfeasibleSupportError,
    StochasticAffinity,
    SupportPattern,
    ValidationError,
    validate_affinity,
)
from .selfexpr import WoodburyCache, _entries

logger = logging.getLogger(__name__)

LBFGS_MEMORY = 10
DEFAULT_K_TOP = 15
DEFAULT_N_PERMS = 3
_BLOCK_ENTRIES = 1 << 22
# kernel values this many ulps of |C| + |alpha| + |beta| are cancellation noise
_ROUNDOFF_ULPS = 16


@dataclass(frozen=True)
class DualPotentials:
    """Row and column potentials. Only defined up to (alpha + c, beta - c)."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64).ravel()
        b = np.asarray(self.beta, dtype=np.float64).ravel()
        if a.shape != b.shape:
            raise ValidationError("alpha and beta must have the same length")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValidationError("potentials must be finite")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))

    @property
    def n(self):
        return self.alpha.size

    def shifted(self, c):
        return DualPotentials(self.alpha + c, self.beta - c)


# -- cost oracles -------------------------------------------------------------


class DenseCost:
    """|C| held as a dense array."""

    def __init__(self, C):
        C = np.abs(np.asarray(C, dtype=np.float64))
        if C.ndim != 2 or C.shape[0] != C.shape[1]:
            raise ValidationError(f"cost must be square, got shape {C.shape}")
        if not np.all(np.isfinite(C)):
            raise ValidationError("cost has non-finite entries")
        self.C = C
        self.n = C.shape[0]

    @property
    def diagonal_is_zero(self):
        return not np.any(np.diag(self.C))

    def values(self, rows, cols):
        return self.C[rows, cols]

    def row_block(self, start, stop):
        return self.C[start:stop]


class SparseCost:
    """|C| from a sparse matrix; unstored positions cost 0."""

    def __init__(self, C):
        C = sp.csr_matrix(C, dtype=np.float64)
        if C.shape[0] != C.shape[1]:
            raise ValidationError(f"cost must be square, got shape {C.shape}")
        C = abs(C)
        C.sort_indices()
        if not np.all(np.isfinite(C.data)):
            raise ValidationError("cost has non-finite entries")
        self.C = C
        self.n = C.shape[0]

    @property
    def diagonal_is_zero(self):
        return not np.any(self.C.diagonal())

    def values(self, rows, cols):
        return np.asarray(self.C[rows, cols]).ravel()

    def row_block(self, start, stop):
        return self.C[start:stop].toarray()


class LsrCost:
    """|C| for ridge coefficients, evaluated on demand through a Woodbury core.

    ``diag`` selects what the diagonal means: ``"mask"`` (default) reports a
    zero cost there, since self-representation is excluded; ``"keep"`` uses
    the unconstrained closed form as is; ``"exact"`` applies the per-column
    zero-diagonal correction to every entry.
    """

    def __init__(self, X, gamma, diag="mask"):
        if diag not in ("mask", "keep", "exact"):
            raise ValidationError(f"unknown diagonal mode {diag!r}")
        self.V = X.values if hasattr(X, "values") else np.asarray(X, dtype=np.float64)
        self.cache = WoodburyCache.build(self.V, gamma)
        self.diag = diag
        self.n = self.V.shape[1]
        self._W = self.cache.M @ self.V
        if diag == "exact":
            self._mu = self.cache.c0_diag(self.V) / self.cache.zfull_diag(self.V)
            self._Zc = self.cache.Zcore @ self.V

    @property
    def diagonal_is_zero(self):
        return self.diag != "keep"

    def values(self, rows, cols):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.abs(_entries(self.cache, self.V, rows, cols, zero_diag=self.diag == "exact"))
        if self.diag == "mask":
            vals[rows == cols] = 0.0
        return vals

    def row_block(self, start, stop):
        block = self.V[:, start:stop].T @ self._W
        if self.diag == "exact":
            idx = np.arange(start, stop)
            Z = -(self.V[:, start:stop].T @ self._Zc)
            Z[np.arange(stop - start), idx] += 1.0
            block = block - (Z / self.cache.gamma) * self._mu[None, :]
        block = np.abs(block)
        if self.diag != "keep":
            block[np.arange(stop - start), np.arange(start, stop)] = 0.0
        return block


def as_cost(C):
    """Wrap arrays and sparse matrices in the matching cost oracle."""
    if isinstance(C, (DenseCost, SparseCost, LsrCost)):
        return C
    if sp.issparse(C):
        return SparseCost(C)
    return DenseCost(C)


def _block_rows(n):
    return max(1, _BLOCK_ENTRIES // max(n, 1))


# -- problems and support evaluation ------------------------------------------


@dataclass(frozen=True)
class ProjectionProblem:
    """A cost |C| and regularization weight eta2.

    ``cost`` may be a dense array or cost oracle (every entry available), or
    a scipy sparse matrix whose stored entries are the only ones available;
    asking for the dual on a support that leaves this stored set is an error.
    """

    cost: object
    eta2: float
    n: int = field(default=None)

    def __post_init__(self):
        if not (np.isfinite(self.eta2) and self.eta2 > 0):
            raise ValidationError(f"eta2 must be > 0, got {self.eta2!r}")
        cost = self.cost
        if sp.issparse(cost):
            cost = sp.csr_matrix(cost, dtype=np.float64, copy=True)
            cost.data = np.abs(cost.data)
            cost.sort_indices()
            if not np.all(np.isfinite(cost.data)):
                raise ValidationError("cost has non-finite entries")
            n = cost.shape[0]
        elif isinstance(cost, (DenseCost, SparseCost, LsrCost)):
            n = cost.n
        else:
            cost = DenseCost(cost)
            n = cost.n
        if self.n is not None and self.n != n:
            raise ValidationError(f"n={self.n} does not match cost size {n}")
        object.__setattr__(self, "cost", cost)
        object.__setattr__(self, "n", n)

    def on_support(self, S):
        """Row indices, column indices and cost values over ``S``."""
        if S.n != self.n:
            raise ValidationError(f"support size {S.n} != problem size {self.n}")
        rows, cols = S.coo()
        if sp.issparse(self.cost):
            C = self.cost
            # locate each (row, col) among the stored entries of its row
            vals = np.empty(rows.size)
            for i in range(self.n):
                lo, hi = S.indptr[i], S.indptr[i + 1]
                if lo == hi:
                    continue
                stored = C.indices[C.indptr[i]:C.indptr[i + 1]]
                want = S.indices[lo:hi]
                pos = np.searchsorted(stored, want)
                ok = (pos < stored.size) & (stored[np.minimum(pos, stored.size - 1)] == want)
                if not ok.all():
                    j = int(want[np.flatnonzero(~ok)[0]])
                    raise ValidationError(f"no cost entry stored at support position ({i}, {j})")
                vals[lo:hi] = C.data[C.indptr[i] + pos]
            return rows, cols, vals
        return rows, cols, self.cost.values(rows, cols)

    def dense_cost(self):
        if sp.issparse(self.cost):
            return self.cost.toarray()
        if isinstance(self.cost, DenseCost):
            return self.cost.C
        return self.cost.row_block(0, self.n)


def _unit_mass_threshold(w):
    """The t with sum([w - t]_+) = 1."""
    ws = -np.sort(-w)
    css = np.cumsum(ws) - 1.0
    k = np.arange(1, ws.size + 1)
    last = np.flatnonzero(ws - css / k > 0)[-1]
    return css[last] / (last + 1)


class _Evaluator:
    """Scaled dual on a fixed support, G = |C| / eta2, u = alpha / eta2.

    f(u, v) = 1^T u + 1^T v + 1/2 sum_S [G - u_i - v_j]_+^2 is the negated
    dual divided by eta2; its gradient is exactly the vector of row/column
    sum deviations (1 - sums) of the recovered primal.
    """

    def __init__(self, n, rows=None, cols=None, g=None, dense=None):
        self.n = n
        self.dense = dense
        self.rows, self.cols, self.g = rows, cols, g
        vals = dense if dense is not None else g
        self.gmax = float(np.max(np.abs(vals), initial=0.0))

    @classmethod
    def build(cls, P, S):
        if S is None:
            return cls(P.n, dense=P.dense_cost() / P.eta2)
        rows, cols, vals = P.on_support(S)
        return cls(P.n, rows, cols, vals / P.eta2)

    def kernel(self, u, v):
        if self.dense is not None:
            return self.dense - u[:, None] - v[None, :]
        return self.g - u[self.rows] - v[self.cols]

    def sums(self, a):
        if self.dense is not None:
            return a.sum(axis=1), a.sum(axis=0)
        n = self.n
        return np.bincount(self.rows, a, n), np.bincount(self.cols, a, n)

    def _row_groups(self):
        """Entry positions grouped by row and by column (sparse mode)."""
        if not hasattr(self, "_groups"):
            n = self.n
            r_order = np.argsort(self.rows, kind="stable")
            c_order = np.argsort(self.cols, kind="stable")
            r_ptr = np.searchsorted(self.rows[r_order], np.arange(n + 1))
            c_ptr = np.searchsorted(self.cols[c_order], np.arange(n + 1))
            self._groups = (r_order, r_ptr, c_order, c_ptr)
        return self._groups

    def activate_empty(self, uv):
        """Exactly minimize f over each potential whose row (column) of the
        clipped kernel is all zero; the generalized Hessian is singular there.
        """
        n = self.n
        uv = uv.copy()
        u, v = uv[:n], uv[n:]
        for axis in (0, 1):
            k = self.kernel(u, v)
            if self.dense is not None:
                deg = (k > 0).sum(axis=1 - axis)
                for i in np.flatnonzero(deg == 0):
                    w = self.dense[i] - v if axis == 0 else self.dense[:, i] - u
                    (u if axis == 0 else v)[i] = _unit_mass_threshold(w)
            else:
                order, ptr = self._row_groups()[2 * axis: 2 * axis + 2]
                idx = self.rows if axis == 0 else self.cols
                deg = np.bincount(idx[k > 0], minlength=n)
                for i in np.flatnonzero(deg == 0):
                    pos = order[ptr[i]:ptr[i + 1]]
                    other = v[self.cols[pos]] if axis == 0 else u[self.rows[pos]]
                    (u if axis == 0 else v)[i] = _unit_mass_threshold(self.g[pos] - other)
        return uv

    def primal_grad(self, uv):
        """Clipped kernel a and the gradient 1 - sums(a)."""
        n = self.n
        a = np.maximum(self.kernel(uv[:n], uv[n:]), 0.0)
        rs, cs = self.sums(a)
        return a, np.concatenate([1.0 - rs, 1.0 - cs])

    def fg(self, uv):
        a, g = self.primal_grad(uv)
        return float(uv.sum()) + 0.5 * float(np.vdot(a, a)), g

    def hessian(self, uv, thresh=0.0):
        """Generalized Hessian pattern: entries with kernel above ``thresh``."""
        n = self.n
        k = self.kernel(uv[:n], uv[n:])
        if self.dense is not None:
            B = sp.csr_matrix((k > thresh).astype(np.float64))
        else:
            on = k > thresh
            B = sp.csr_matrix(
                (np.ones(int(on.sum())), (self.rows[on], self.cols[on])), shape=(n, n)
            )
        r = np.asarray(B.sum(axis=1)).ravel()
        c = np.asarray(B.sum(axis=0)).ravel()
        Bt = B.T.tocsr()
        return B, Bt, r, c


def dual_objective_grad(P, pots, S=None):
    """Dual objective and its gradient in the original (unscaled) variables.

    Returns ``(value, grad_alpha, grad_beta)`` where
    value = -(alpha + beta)^T 1 - ||[|C| - alpha 1^T - 1 beta^T]_+ (.) S||^2 / (2 eta2)
    and grad_alpha_i = -1 + row sum i of the recovered primal.
    Cost is O(nnz(S)), or O(n^2) when ``S`` is None (full support).
    """
    if pots.n != P.n:
        raise ValidationError(f"potentials have length {pots.n}, problem has n={P.n}")
    ev = _Evaluator.build(P, S)
    eta2 = P.eta2
    uv = np.concatenate([pots.alpha, pots.beta]) / eta2
    f, g = ev.fg(uv)
    return -eta2 * f, -g[: P.n], -g[P.n:]


def support_is_feasible(S):
    """True when ``S`` contains a permutation, i.e. a doubly stochastic pattern."""
    match = maximum_bipartite_matching(S.to_csr().astype(bool).astype(np.int8), perm_type="column")
    return bool(np.all(match >= 0))


def _newton_direction(ev, g, B, Bt, r, c):
    """Minimum-norm Newton step for the pattern B.

    Each connected component of the bipartite graph of B contributes a null
    vector (+1 on its rows, -1 on its columns); those components of g are
    removed so CG solves a consistent system instead of amplifying them.
    """
    n = ev.n
    dg = np.concatenate([r, c])
    shift = 1e-10 * (1.0 + dg.max())
    graph = sp.bmat([[None, B], [Bt, None]], format="csr")
    ncomp, comp = connected_components(graph, directed=False)
    z = np.concatenate([np.ones(n), -np.ones(n)])
    coef = np.bincount(comp, z * g, ncomp) / np.bincount(comp, minlength=ncomp)
    gp = g - coef[comp] * z

    def matvec(x):
        xu, xv = x[:n], x[n:]
        return np.concatenate([r * xu + B @ xv, Bt @ xu + c * xv]) + shift * x

    H = spla.LinearOperator((2 * n, 2 * n), matvec=matvec, dtype=np.float64)
    Minv = spla.LinearOperator((2 * n, 2 * n), matvec=lambda x: x / (dg + shift), dtype=np.float64)
    d, _ = spla.cg(H, -gp, rtol=1e-12, atol=0.0, maxiter=10 * n, M=Minv)
    slope = float(g @ d)
    if not np.isfinite(slope) or slope >= 0:
        d = -g
        slope = -float(g @ g)
    return d, slope


def _armijo(ev, uv, a, g, d, slope, halvings=60):
    """Backtracking on f; returns (step, trial, a, g) or None.

    Each kernel entry carries an absolute rounding error of order
    eps * (|G| + |u| + |v|), which bounds how well the decrease can be
    resolved. A step whose decrease is lost in that noise is still taken
    when it shrinks the gradient.
    """
    gmax = np.max(np.abs(g))
    step = 1.0
    for _ in range(halvings):
        trial = uv + step * d
        at, gt = ev.primal_grad(trial)
        df = step * float(d.sum()) + 0.5 * float(np.vdot(at - a, at + a))
        if df <= 1e-4 * step * slope:
            return step, trial, at, gt
        noise = 8 * np.finfo(np.float64).eps * (ev.gmax + np.max(np.abs(trial))) * float((at + a).sum())
        if df <= noise and np.max(np.abs(gt)) < gmax:
            return step, trial, at, gt
        step *= 0.5
    return None


def _newton_polish(ev, uv, tol, max_iter=50):
    """Semismooth Newton on the piecewise quadratic f, with Armijo backtracking.

    Once the active pattern is identified one full step lands on the exact
    minimizer of that quadratic piece. Decreases in f are formed from the
    differences of the clipped kernels, since near the minimizer they fall
    far below the rounding error of f itself. When entries sit just above
    their kink the full step overshoots and backtracking stalls; the step
    is then retried with those entries treated as inactive.
    """
    a, g = ev.primal_grad(uv)
    for _ in range(max_iter):
        gmax = np.max(np.abs(g))
        if gmax <= tol:
            break
        B, Bt, r, c = ev.hessian(uv)
        if not (r.all() and c.all()):
            uv = ev.activate_empty(uv)
            a, g = ev.primal_grad(uv)
            B, Bt, r, c = ev.hessian(uv)
        d, slope = _newton_direction(ev, g, B, Bt, r, c)
        found = _armijo(ev, uv, a, g, d, slope)
        if found is None or found[0] < 1e-3:
            B, Bt, r, c = ev.hessian(uv, thresh=10.0 * gmax)
            if r.all() and c.all():
                d2, slope2 = _newton_direction(ev, g, B, Bt, r, c)
                alt = _armijo(ev, uv, a, g, d2, slope2)
                if alt is not None and (found is None or alt[0] > found[0]):
                    found = alt
        if found is None:
            break
        _, uv, a, g = found
    return uv, ev.fg(uv)[0], g


def solve_dual(P, S=None, init=None, grad_tol=1e-6, max_iter=2000, polish=True):
    """Maximize the (optionally support-restricted) dual with L-BFGS.

    Stops once every row and column sum of the restricted primal is within
    ``grad_tol`` of one. With ``polish`` (default) the quasi-Newton result is
    refined by semismooth Newton steps, which usually reaches round-off.
    If that falls short, eta2 is followed down from the cost scale in
    factors of ten, warm-starting each stage.

    Raises :class:`InfeasibleSupportError` when ``S`` holds no permutation
    (the dual is then unbounded) and :class:`ConvergenceError` when the
    tolerance is not met.
    """
    n = P.n
    if S is not None and not support_is_feasible(S):
        raise InfeasibleSupportError(
            "support contains no doubly stochastic pattern; the dual is unbounded. "
            "Augment the support, e.g. with random permutations."
        )
    ev = _Evaluator.build(P, S)
    uv, g, nit = _solve_scaled(P, ev, init, grad_tol, max_iter, polish)
    err = float(np.max(np.abs(g)))
    if err > grad_tol and polish:
        # small eta2 makes the dual badly conditioned and the Newton polish
        # crawls through many active patterns; follow eta2 down from a scale
        # where the problem is easy, warm-starting each stage
        scale = float(np.max(ev.dense if ev.dense is not None else ev.g, initial=0.0)) * P.eta2
        eta = P.eta2
        stages = []
        while eta < scale:
            eta *= 10.0
            stages.append(eta)
        pots = init
        for eta in reversed(stages):
            Q = ProjectionProblem(P.cost, eta)
            uvq, _, _ = _solve_scaled(Q, _Evaluator.build(Q, S), pots, grad_tol, max_iter, polish)
            pots = DualPotentials(uvq[:n] * eta, uvq[n:] * eta)
        if stages:
            uv2, g2, nit2 = _solve_scaled(P, ev, pots, grad_tol, max_iter, polish)
            if np.max(np.abs(g2)) < err:
                uv, g, nit = uv2, g2, nit2
                err = float(np.max(np.abs(g)))
    pots = DualPotentials(uv[:n] * P.eta2, uv[n:] * P.eta2)
    if err > grad_tol:
        raise ConvergenceError(
            f"dual solve stopped with max sum deviation {err:.3g} > {grad_tol:g}",
            partial=pots,
            diagnostics={"sum_deviation": err, "lbfgs_iterations": nit},
        )
    return pots


def _solve_scaled(P, ev, init, grad_tol, max_iter, polish):
    """L-BFGS then optional Newton polish; returns (uv, gradient, iterations)."""
    n = P.n
    if init is None:
        uv = np.zeros(2 * n)
    else:
        if init.n != n:
            raise ValidationError(f"initial potentials have length {init.n}, expected {n}")
        uv = np.concatenate([init.alpha, init.beta]) / P.eta2
    res = opt.minimize(
        ev.fg,
        uv,
        jac=True,
        method="L-BFGS-B",
        options={
            "maxcor": LBFGS_MEMORY,
            "maxiter": max_iter,
            "gtol": grad_tol,
            "ftol": 1e-15,
            "maxls": 40,
        },
    )
    uv = res.x
    f, g = ev.fg(uv)
    if polish:
        uv, f, g = _newton_polish(ev, uv, tol=min(grad_tol, 1e-11) * 1e-1)
    return uv, g, int(res.nit)


def _kernel(c, a, b):
    """[c - a - b]_+ with values inside the cancellation error set to zero."""
    k = c - a - b
    floor = _ROUNDOFF_ULPS * np.finfo(np.float64).eps * (np.abs(c) + np.abs(a) + np.abs(b))
    return np.where(k > floor, k, 0.0)


def recover_primal(P, pots, S=None):
    """A = [|C| - alpha 1^T - 1 beta^T]_+ / eta2, on ``S`` or everywhere.

    Always returns a CSR matrix holding the strictly positive entries (values
    within cancellation error of zero are dropped); wrap it in
    :class:`StochasticAffinity` once it is known to be feasible.
    """
    n = P.n
    if S is not None:
        rows, cols, vals = P.on_support(S)
        a = _kernel(vals, pots.alpha[rows], pots.beta[cols]) / P.eta2
        on = a > 0
        A = sp.csr_matrix((a[on], (rows[on], cols[on])), shape=(n, n))
    elif sp.issparse(P.cost):
        # unstored entries cost 0, so stored and unstored alike are checked
        rows, cols, vals = _positive_unrestricted(SparseCost(P.cost), pots, P.eta2)
        A = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    else:
        rows, cols, vals = _positive_unrestricted(P.cost, pots, P.eta2)
        A = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    A.sort_indices()
    return A


def _positive_unrestricted(cost, pots, eta2, forbid_diag=False):
    """Positive entries of the unrestricted recovery, scanned in row blocks."""
    n = cost.n
    step = _block_rows(n)
    out_r, out_c, out_v = [], [], []
    for start in range(0, n, step):
        stop = min(n, start + step)
        K = _kernel(cost.row_block(start, stop), pots.alpha[start:stop, None], pots.beta[None, :])
        if forbid_diag:
            K[np.arange(stop - start), np.arange(start, stop)] = -np.inf
        r, c = np.nonzero(K > 0)
        out_r.append(r + start)
        out_c.append(c)
        out_v.append(K[r, c] / eta2)
    return np.concatenate(out_r), np.concatenate(out_c), np.concatenate(out_v)


def init_support(cost, n=None, k_top=DEFAULT_K_TOP, n_perms=DEFAULT_N_PERMS, seed=0, forbid_diag=False):
    """Top-``k_top`` cost entries of each row plus ``n_perms`` random permutations.

    The permutations guarantee the restricted problem is feasible. The
    diagonal is skipped among top-k candidates when the cost diagonal is
    structurally zero (or forbidden); with ``forbid_diag`` the random
    permutations are derangements.
    """
    cost = as_cost(cost)
    n = cost.n if n is None else n
    if n != cost.n:
        raise ValidationError(f"n={n} does not match cost size {cost.n}")
    if k_top < 0 or n_perms < 0:
        raise ValidationError("k_top and n_perms must be nonnegative")
    rng = np.random.default_rng(seed)
    skip_diag = forbid_diag or cost.diagonal_is_zero
    rows, cols = [], []
    k = min(k_top, n - 1 if skip_diag else n)
    if k > 0:
        step = _block_rows(n)
        for start in range(0, n, step):
            stop = min(n, start + step)
            block = np.array(cost.row_block(start, stop), dtype=np.float64, copy=True)
            if skip_diag:
                block[np.arange(stop - start), np.arange(start, stop)] = -np.inf
            if k < n:
                top = np.argpartition(-block, k - 1, axis=1)[:, :k]
            else:
                top = np.tile(np.arange(n), (stop - start, 1))
            rows.append(np.repeat(np.arange(start, stop), top.shape[1]))
            cols.append(top.ravel())
    for _ in range(n_perms):
        perm = _derangement(n, rng) if forbid_diag else rng.permutation(n)
        rows.append(np.arange(n))
        cols.append(perm)
    if not rows:
        return SupportPattern.from_coo(n, [], [], include_diagonal=not forbid_diag)
    return SupportPattern.from_coo(
        n, np.concatenate(rows), np.concatenate(cols), include_diagonal=not forbid_diag
    )


def _derangement(n, rng):
    if n < 2:
        raise ValidationError("a derangement needs n >= 2")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


@dataclass
class ActiveSetInfo:
    outer_iterations: int = 0
    support_sizes: list = field(default_factory=list)
    potentials: DualPotentials | None = None
    converged: bool = False


def active_set_project(
    cost,
    eta2,
    S0=None,
    *,
    tol=DEFAULT_FEASIBILITY_TOL,
    k_top=DEFAULT_K_TOP,
    n_perms=DEFAULT_N_PERMS,
    seed=0,
    forbid_diag=False,
    grad_tol=1e-6,
    max_outer=50,
    new_entry_tol=1e-12,
    return_info=False,
):
    """Projection onto the doubly stochastic matrices on a growing support.

    Each outer iteration solves the restricted dual on ``S`` (warm-started),
    forms the unrestricted recovery A0 and stops if A0 is doubly stochastic
    within ``tol`` and has no mass outside ``S`` (above ``new_entry_tol``);
    otherwise ``S`` absorbs the support of A0 and the loop repeats.

    ``cost`` is any cost oracle (or an array / sparse matrix). When ``S0`` is
    omitted it is built by :func:`init_support`.
    """
    cost = as_cost(cost)
    n = cost.n
    if S0 is None:
        S0 = init_support(cost, n, k_top, n_perms, seed, forbid_diag)
    if S0.n != n:
        raise ValidationError(f"initial support size {S0.n} != cost size {n}")
    if forbid_diag:
        S0 = SupportPattern(n, S0.indptr, S0.indices, include_diagonal=False)
    P = ProjectionProblem(cost, eta2)
    info = ActiveSetInfo()
    S = S0
    pots = None
    A = None
    for outer in range(max_outer):
        info.outer_iterations = outer + 1
        info.support_sizes.append(S.nnz)
        pots = solve_dual(P, S, init=pots, grad_tol=grad_tol)
        rows, cols, vals = _positive_unrestricted(cost, pots, eta2, forbid_diag)
        A = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        report = validate_affinity(A, tol)
        grown = S.union(
            SupportPattern.from_coo(n, rows[vals > new_entry_tol], cols[vals > new_entry_tol], S.include_diagonal)
        )
        logger.debug(
            "active set outer %d: |S|=%d row dev %.3g col dev %.3g new entries %d",
            outer + 1, S.nnz, report.max_row_dev, report.max_col_dev, grown.nnz - S.nnz,
        )
        if report.passed and grown.nnz == S.nnz:
            info.converged = True
            break
        if grown.nnz == S.nnz:
            # no new entries yet not feasible: the restricted solve was too loose
            grad_tol = grad_tol * 0.01
        S = grown
    info.potentials = pots
    if not info.converged:
        raise ConvergenceError(
            f"active set did not terminate within {max_outer} outer iterations",
            partial=A,
            diagnostics={"support_sizes": info.support_sizes},
        )
    result = StochasticAffinity(A, feasibility_tol=tol)
    return (result, info) if return_info else result


def dual_project(cost, eta2, *, tol=DEFAULT_FEASIBILITY_TOL, grad_tol=1e-6, max_iter=2000, polish=True, return_info=False):
    """Full-support dual solve followed by primal recovery."""
    P = ProjectionProblem(as_cost(cost), eta2)
    pots = solve_dual(P, None, grad_tol=grad_tol, max_iter=max_iter, polish=polish)
    A = StochasticAffinity(recover_primal(P, pots), feasibility_tol=tol)
    return (A, pots) if return_info else A


@dataclass
class AltProjResult:
    matrix: np.ndarray
    iterations: int
    converged: bool


def altproj_project(cost, eta2, max_iter=5000, tol=DEFAULT_FEASIBILITY_TOL):
    """Alternating projections between the affine sum constraints and A >= 0.

    Baseline for benchmarking. Starts from |C| / eta2, the point whose
    Euclidean projection is sought. The nonnegativity step carries Dykstra's
    correction so the limit is that projection rather than just some
    feasible point (the affine step needs none). Stops when the clipped
    iterate has all row and column sums within ``tol`` of one;
    ``converged`` is False if that never happens within ``max_iter``.
    """
    X = np.abs(np.asarray(cost.C if isinstance(cost, DenseCost) else cost, dtype=np.float64)) / eta2
    n = X.shape[0]
    corr = np.zeros_like(X)
    for it in range(1, max_iter + 1):
        r = X.sum(axis=1)
        c = X.sum(axis=0)
        s = r.sum()
        Y = X + ((1.0 / n + s / n**2) - r / n)[:, None] - (c / n)[None, :]
        Y += corr
        X = np.maximum(Y, 0.0)
        corr = Y - X
        if (
            np.max(np.abs(X.sum(axis=1) - 1.0)) <= tol
            and np.max(np.abs(X.sum(axis=0) - 1.0)) <= tol
        ):
            return AltProjResult(X, it, True)
    return AltProjResult(X, max_iter, False)
