"""
Joint model: self-expression and a doubly stochastic affinity learned
together by linearized ADMM.

    min  1/2 ||X - X[Cp - Cq]||^2 + eta1/2 ||[Cp + Cq] - eta2 A||^2 + eta3 sum(Cp + Cq)
    s.t. A doubly stochastic, Cp, Cq >= 0 with zero diagonal

The splitting introduces Y = A (carrying the sum constraints) and
Z = X[Cp - Cq]; every step below is the closed-form update for one block.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    CoeffMatrix,
    ConvergenceError,
    DataMatrix,
    DsscParams,
    StochasticAffinity,
    ValidationError,
    validate_affinity,
)
from .dsproj import dual_project

logger = logging.getLogger(__name__)

JDSSC_N_CAP = 10000
DIVERGENCE_BOUND = 1e12


@dataclass
class AdmmState:
    Cp: np.ndarray
    Cq: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    lambda1: np.ndarray
    lambda2: np.ndarray
    Lambda1: np.ndarray
    Lambda2: np.ndarray
    iter: int = 0

    @classmethod
    def initial(cls, d, n):
        """Cp = Cq = 0, A = Y = I, Z = 0 and all multipliers zero."""
        return cls(
            Cp=np.zeros((n, n)),
            Cq=np.zeros((n, n)),
            A=np.eye(n),
            Y=np.eye(n),
            Z=np.zeros((d, n)),
            lambda1=np.zeros(n),
            lambda2=np.zeros(n),
            Lambda1=np.zeros((n, n)),
            Lambda2=np.zeros((d, n)),
        )

    def check_finite(self):
        for name in ("Cp", "Cq", "A", "Y", "Z", "lambda1", "lambda2", "Lambda1", "Lambda2"):
            v = getattr(self, name)
            # NaN fails the comparison, so this also catches non-finite entries
            if v.size and not max(v.max(), -v.min()) <= DIVERGENCE_BOUND:
                raise ConvergenceError(
                    f"ADMM diverged at iteration {self.iter}: {name} blew up",
                    partial=self,
                    diagnostics={"variable": name, "iteration": self.iter},
                )


def _prox_nonneg_zero_diag(E):
    np.maximum(E, 0.0, out=E)
    np.fill_diagonal(E, 0.0)
    return E


def update_y(A, lambda1, lambda2, Lambda1, rho):
    """Exact Y-minimizer: solves rho Y + rho Y 11^T + rho 11^T Y = V."""
    n = A.shape[0]
    V = rho * A
    V -= Lambda1
    V += (2.0 * rho - lambda1)[None, :]
    V -= lambda2[:, None]
    # P = I - 11^T / (2n + 1); only P V 1 and 1^T V P are needed
    v_row = V.sum(axis=1)
    v_col = V.sum(axis=0)
    pv1 = v_row - v_row.sum() / (2 * n + 1)
    onev_p = v_col - v_col.sum() / (2 * n + 1)
    V -= pv1[:, None] / (n + 1)
    V -= onev_p[None, :] / (n + 1)
    V /= rho
    return V


def admm_step(state, X, params, fixed_affinity=False):
    """One linearized ADMM iteration; returns a new state.

    Order: linearized proximal steps on Cp then Cq, exact minimizations over
    A, Y and Z, then dual ascent on all multipliers. With
    ``fixed_affinity`` the A and Y blocks (and their multipliers) are held.
    """
    V = X.values if isinstance(X, DataMatrix) else np.asarray(X, dtype=np.float64)
    eta1, eta2, eta3 = params.eta1, params.eta2, params.eta3
    rho, tau = params.rho, params.tau
    s = state
    Cp, Cq, A = s.Cp, s.Cq, s.A
    denom = eta1 + 1.0 / tau

    # Cp_half / tau = Cp / tau - grad, and the Cq gradient is the negation
    XC = V @ (Cp - Cq)
    G = V.T @ (rho * (XC - s.Z) - s.Lambda2)
    E = Cp / tau
    E -= G
    E -= eta1 * Cq
    E += (eta1 * eta2) * A
    E -= eta3
    E /= denom
    Cp = _prox_nonneg_zero_diag(E)

    XC = V @ (Cp - Cq)
    G = V.T @ (rho * (XC - s.Z) - s.Lambda2)
    E = Cq / tau
    E += G
    E -= eta1 * Cp
    E += (eta1 * eta2) * A
    E -= eta3
    E /= denom
    Cq = _prox_nonneg_zero_diag(E)

    if fixed_affinity:
        Y = s.Y
    else:
        A = (eta1 * eta2) * (Cp + Cq)
        A += s.Lambda1
        A += rho * s.Y
        A /= eta1 * eta2**2 + rho
        np.maximum(A, 0.0, out=A)
        Y = update_y(A, s.lambda1, s.lambda2, s.Lambda1, rho)

    XC = V @ (Cp - Cq)
    Z = (V - s.Lambda2 + rho * XC) / (1.0 + rho)

    if fixed_affinity:
        lambda1, lambda2, Lambda1 = s.lambda1, s.lambda2, s.Lambda1
    else:
        lambda1 = s.lambda1 + rho * (Y.sum(axis=0) - 1.0)
        lambda2 = s.lambda2 + rho * (Y.sum(axis=1) - 1.0)
        Lambda1 = Y - A
        Lambda1 *= rho
        Lambda1 += s.Lambda1
    Lambda2 = s.Lambda2 + rho * (Z - XC)

    out = AdmmState(Cp, Cq, A, Y, Z, lambda1, lambda2, Lambda1, Lambda2, s.iter + 1)
    out.check_finite()
    return out


def joint_objective(Cp, Cq, A, X, params):
    """Joint-model objective; the l1 term is the entry sum of Cp + Cq."""
    V = X.values if isinstance(X, DataMatrix) else np.asarray(X, dtype=np.float64)
    Cp, Cq, A = (np.asarray(M.toarray() if hasattr(M, "toarray") else M) for M in (Cp, Cq, A))
    R = V - V @ (Cp - Cq)
    W = (Cp + Cq) - params.eta2 * A
    return (
        0.5 * float(np.vdot(R, R))
        + 0.5 * params.eta1 * float(np.vdot(W, W))
        + params.eta3 * float(np.sum(Cp + Cq))
    )


@dataclass(frozen=True)
class StopRule:
    """Residual tolerance (None means 1e-5 sqrt(n)) and iteration cap."""

    tol: float | None = None
    max_iter: int = 20000

    def resolve(self, n):
        return 1e-5 * np.sqrt(n) if self.tol is None else self.tol


@dataclass
class JdsscResult:
    C: CoeffMatrix
    Cp: np.ndarray
    Cq: np.ndarray
    affinity: StochasticAffinity | None
    raw_affinity: np.ndarray
    iterations: int
    converged: bool
    residuals: dict = field(default_factory=dict)
    state: AdmmState | None = None


def _residuals(prev, cur, V):
    n = cur.A.shape[0]
    ones = np.ones(n)
    return {
        "y_minus_a": float(np.linalg.norm(cur.Y - cur.A)),
        "z_minus_xc": float(np.linalg.norm(cur.Z - V @ (cur.Cp - cur.Cq))),
        "row_sums": float(np.linalg.norm(cur.Y @ ones - 1.0)),
        "col_sums": float(np.linalg.norm(cur.Y.T @ ones - 1.0)),
        "delta_c": float(np.linalg.norm(cur.Cp - prev.Cp) + np.linalg.norm(cur.Cq - prev.Cq)),
        "delta_a": float(np.linalg.norm(cur.A - prev.A)),
    }


def safe_tau(X, params):
    """Largest step that satisfies tau <= 1 / (rho * lambda_max(X^T X))."""
    V = X.values if isinstance(X, DataMatrix) else np.asarray(X, dtype=np.float64)
    lmax = float(np.linalg.norm(V, 2) ** 2)
    return 1.0 / (params.rho * lmax) if lmax > 0 else np.inf


def jdssc_solve(
    X,
    params,
    stop=StopRule(),
    init=None,
    fixed_affinity=False,
    trace=None,
    project_affinity=True,
    raise_on_failure=True,
    max_n=JDSSC_N_CAP,
):
    """Run linearized ADMM until the primal residuals
    ||Y - A||, ||Z - X[Cp - Cq]||, ||Y 1 - 1||, ||Y^T 1 - 1|| and the iterate
    changes of C and A all fall below the stopping tolerance.

    The final A is the Euclidean projection of the ADMM affinity onto the
    doubly stochastic matrices (``project_affinity``), so it is exactly
    feasible up to the projection tolerance. ``trace`` may be a list; one
    dict per iteration (iter, objective, residuals) is appended.

    On non-convergence a :class:`ConvergenceError` carrying the partial
    :class:`JdsscResult` is raised unless ``raise_on_failure`` is False.
    """
    V = X.values if isinstance(X, DataMatrix) else np.asarray(X, dtype=np.float64)
    d, n = V.shape
    if n > max_n:
        raise ValidationError(f"n={n} exceeds the joint-model cap of {max_n}")
    limit = safe_tau(V, params)
    if params.tau > limit:
        warnings.warn(
            f"tau={params.tau:g} violates the linearization bound {limit:.3g}; shrinking it",
            RuntimeWarning,
            stacklevel=2,
        )
        params = replace(params, tau=0.99 * limit)
    tol = stop.resolve(n)
    state = init if init is not None else AdmmState.initial(d, n)
    res = {}
    converged = False
    for _ in range(stop.max_iter):
        new = admm_step(state, V, params, fixed_affinity=fixed_affinity)
        res = _residuals(state, new, V)
        state = new
        if trace is not None:
            trace.append({"iter": state.iter, "objective": joint_objective(state.Cp, state.Cq, state.A, V, params), **res})
        if max(res.values()) <= tol:
            converged = True
            break
    logger.debug("jdssc: %d iterations, residuals %s", state.iter, res)

    Cp, Cq = state.Cp, state.Cq
    C = CoeffMatrix.from_dense(Cp - Cq)
    affinity = None
    if project_affinity and not fixed_affinity:
        affinity = dual_project(state.A, 1.0)
    result = JdsscResult(
        C=C,
        Cp=Cp,
        Cq=Cq,
        affinity=affinity,
        raw_affinity=state.A,
        iterations=state.iter,
        converged=converged,
        residuals=res,
        state=state,
    )
    if not converged and raise_on_failure:
        raise ConvergenceError(
            f"ADMM did not reach tol {tol:.3g} in {stop.max_iter} iterations "
            f"(worst residual {max(res.values()):.3g})",
            partial=result,
            diagnostics=res,
        )
    return result


def affinity_report(result, tol=1e-4):
    A = result.affinity.entries if result.affinity is not None else result.raw_affinity
    return validate_affinity(A, tol)
