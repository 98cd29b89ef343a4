import numpy as np
import pytest

from _oracles import subspace_data
from dssc.core import ConvergenceError, DsscParams, ValidationError
from dssc.jdssc import (
    AdmmState,
    StopRule,
    admm_step,
    affinity_report,
    jdssc_solve,
    joint_objective,
    safe_tau,
    update_y,
)
from dssc.selfexpr import ensc_solve


def rand_X(d, n, seed, scale=1.0):
    X = np.random.default_rng(seed).standard_normal((d, n))
    return scale * X / np.linalg.norm(X, axis=0)


def params_for(X, eta1, eta2, eta3, rho=0.5):
    p = DsscParams(eta1, eta2, eta3, rho=rho)
    return DsscParams(eta1, eta2, eta3, rho=rho, tau=0.99 * safe_tau(X, p))


def test_y_update_stationarity():
    rng = np.random.default_rng(0)
    n, rho = 7, 0.5
    A = np.abs(rng.standard_normal((n, n)))
    l1, l2 = rng.standard_normal(n), rng.standard_normal(n)
    L1 = rng.standard_normal((n, n))
    Y = update_y(A.copy(), l1, l2, L1, rho)
    V = rho * A + 2 * rho - l1[None, :] - l2[:, None] - L1
    one = np.ones((n, n))
    np.testing.assert_allclose(rho * Y + rho * Y @ one + rho * one @ Y, V, atol=1e-8)


def test_step_on_two_by_two():
    """Each block of one step against hand-written updates."""
    X = np.array([[1.0, 0.5], [0.0, 1.0]])
    p = DsscParams(0.7, 0.3, 0.05, rho=0.5, tau=0.1)
    s0 = AdmmState.initial(2, 2)
    rng = np.random.default_rng(1)
    s0.Cp = np.abs(rng.standard_normal((2, 2))) * (1 - np.eye(2))
    s0.Lambda1 = rng.standard_normal((2, 2))
    s0.Lambda2 = rng.standard_normal((2, 2))
    s0.lambda1, s0.lambda2 = rng.standard_normal(2), rng.standard_normal(2)
    s1 = admm_step(s0, X, p)

    def prox(E):
        E = np.maximum(E, 0)
        np.fill_diagonal(E, 0)
        return E

    e1, e2, e3, rho, tau = 0.7, 0.3, 0.05, 0.5, 0.1
    grad = -X.T @ s0.Lambda2 + rho * X.T @ (X @ (s0.Cp - s0.Cq) - s0.Z)
    Cp = prox(((s0.Cp - tau * grad) / tau - e1 * s0.Cq + e1 * e2 * s0.A - e3) / (e1 + 1 / tau))
    grad = X.T @ s0.Lambda2 - rho * X.T @ (X @ (Cp - s0.Cq) - s0.Z)
    Cq = prox(((s0.Cq - tau * grad) / tau - e1 * Cp + e1 * e2 * s0.A - e3) / (e1 + 1 / tau))
    A = np.maximum((e1 * e2 * (Cp + Cq) + s0.Lambda1 + rho * s0.Y) / (e1 * e2**2 + rho), 0)
    Z = (X - s0.Lambda2 + rho * X @ (Cp - Cq)) / (1 + rho)
    for got, want in ((s1.Cp, Cp), (s1.Cq, Cq), (s1.A, A), (s1.Z, Z)):
        np.testing.assert_allclose(got, want, atol=1e-14)
    np.testing.assert_allclose(s1.Lambda1, s0.Lambda1 + rho * (s1.Y - A), atol=1e-14)
    np.testing.assert_allclose(s1.Lambda2, s0.Lambda2 + rho * (Z - X @ (Cp - Cq)), atol=1e-14)
    np.testing.assert_allclose(s1.lambda1, s0.lambda1 + rho * (s1.Y.sum(0) - 1), atol=1e-14)
    np.testing.assert_allclose(s1.lambda2, s0.lambda2 + rho * (s1.Y.sum(1) - 1), atol=1e-14)


def test_state_invariants_hold_every_step():
    X = rand_X(4, 8, 2)
    p = params_for(X, 1.0, 0.2, 0.01)
    s = AdmmState.initial(4, 8)
    for _ in range(50):
        s = admm_step(s, X, p)
        assert s.Cp.min() >= 0 and s.Cq.min() >= 0 and s.A.min() >= 0
        assert np.all(np.diag(s.Cp) == 0) and np.all(np.diag(s.Cq) == 0)


def test_divergence_detected():
    X = rand_X(3, 6, 3, scale=10.0)
    p = DsscParams(1.0, 0.1, 0.0, tau=10.0)
    s = AdmmState.initial(3, 6)
    with pytest.raises(ConvergenceError, match="diverged"):
        for _ in range(2000):
            s = admm_step(s, X, p)


def test_zero_data_gives_uniform_affinity():
    X = np.zeros((3, 6))
    p = DsscParams(1.0, 0.5, 0.1)
    res = jdssc_solve(X, p, StopRule(tol=1e-9, max_iter=20000))
    assert np.all(res.Cp == 0) and np.all(res.Cq == 0)
    np.testing.assert_allclose(res.raw_affinity, 1 / 6, atol=1e-6)


def test_objective_plug_in():
    X = rand_X(3, 5, 4)
    p = DsscParams(0.8, 0.3, 0.1)
    Z = np.zeros((5, 5))
    val = joint_objective(Z, Z, np.eye(5), X, p)
    assert val == pytest.approx(0.5 * np.sum(X**2) + 0.5 * 0.8 * 0.3**2 * 5, rel=1e-14)


def test_objective_matches_expanded_form():
    """For feasible A, ||C||^2 - 2 eta2 <C, A> form equals the split form."""
    rng = np.random.default_rng(5)
    X = rand_X(4, 6, 5)
    p = DsscParams(0.9, 0.2, 0.05)
    Cp = np.abs(rng.standard_normal((6, 6))) * (rng.random((6, 6)) < 0.5)
    Cq = np.abs(rng.standard_normal((6, 6))) * (Cp == 0)
    np.fill_diagonal(Cp, 0)
    np.fill_diagonal(Cq, 0)
    A = np.full((6, 6), 1 / 6)
    C = Cp - Cq
    expanded = (
        0.5 * np.sum((X - X @ C) ** 2)
        + 0.5 * p.eta1 * np.sum(C**2)
        + p.eta3 * np.abs(C).sum()
        - p.eta1 * p.eta2 * np.sum(np.abs(C) * A)
        + 0.5 * p.eta1 * p.eta2**2 * np.sum(A**2)
    )
    assert joint_objective(Cp, Cq, A, X, p) == pytest.approx(expanded, abs=1e-10)


def kkt_residual(res, X, p):
    """Complementary slackness of the joint model in Cp and Cq at fixed A."""
    s = res.state
    Cp, Cq, A = s.Cp, s.Cq, s.A
    R = X.T @ (X @ (Cp - Cq) - X)
    W = p.eta1 * ((Cp + Cq) - p.eta2 * A)
    off = 1 - np.eye(A.shape[0])
    out = []
    for C, g in ((Cp, R + W + p.eta3), (Cq, -R + W + p.eta3)):
        out.append(np.max(np.abs(np.minimum(C, g)) * off))
    return max(out)


def test_solve_reaches_kkt():
    X = rand_X(5, 20, 6)
    p = params_for(X, 1.0, 0.1, 0.01)
    res = jdssc_solve(X, p, StopRule(tol=1e-7, max_iter=50000))
    assert res.converged
    assert kkt_residual(res, X, p) < 1e-4
    assert affinity_report(res).passed


def test_objective_trailing_window_non_increasing():
    X = rand_X(4, 12, 7)
    p = params_for(X, 1.0, 0.2, 0.01)
    trace = []
    jdssc_solve(X, p, StopRule(tol=1e-8, max_iter=4000), trace=trace, raise_on_failure=False)
    obj = np.array([t["objective"] for t in trace])
    burn = len(obj) // 4
    window = 50
    mins = [obj[i:i + window].min() for i in range(burn, len(obj) - window, window)]
    assert all(b <= a + 1e-9 for a, b in zip(mins, mins[1:]))


def test_two_initializations_agree():
    X = rand_X(4, 10, 8)
    p = params_for(X, 1.0, 0.2, 0.02)
    r1 = jdssc_solve(X, p, StopRule(tol=1e-9, max_iter=60000))
    init = AdmmState.initial(4, 10)
    init.A = np.full((10, 10), 0.1)
    init.Y = init.A.copy()
    init.Cp = np.abs(np.random.default_rng(8).standard_normal((10, 10))) * (1 - np.eye(10))
    r2 = jdssc_solve(X, p, StopRule(tol=1e-9, max_iter=60000), init=init)
    o1 = joint_objective(r1.Cp, r1.Cq, r1.raw_affinity, X, p)
    o2 = joint_objective(r2.Cp, r2.Cq, r2.raw_affinity, X, p)
    assert abs(o1 - o2) <= 1e-6 * abs(o1)


def test_frozen_identity_affinity_matches_ensc():
    X = rand_X(5, 12, 9)
    eta1, eta2, eta3 = 1.0, 0.1, 0.05
    p = params_for(X, eta1, eta2, eta3)
    res = jdssc_solve(X, p, StopRule(tol=1e-10, max_iter=100000), fixed_affinity=True)
    # A = I is zero off the diagonal, so the coupling term drops out and the
    # joint model reduces to the elastic net
    C = ensc_solve(X, eta1, eta3, tol=1e-10).toarray()
    np.testing.assert_allclose(res.Cp - res.Cq, C, atol=1e-5)


def test_proposition_disjoint_supports():
    rng = np.random.default_rng(10)
    for trial in range(5):
        X = rand_X(3, 6, 100 + trial, scale=rng.uniform(0.05, 1.0))
        p = params_for(X, 0.5, 0.1, 0.06)  # eta1 eta2 = 0.05 <= eta3
        res = jdssc_solve(X, p, StopRule(tol=1e-8, max_iter=50000))
        assert not np.any((res.Cp > 1e-6) & (res.Cq > 1e-6))


def test_proposition_overlap_bound():
    X = rand_X(3, 6, 11, scale=0.01)
    eta1, eta2, eta3 = 1.0, 0.5, 0.0
    p = params_for(X, eta1, eta2, eta3)
    # with X this small the split of C into Cp, Cq is nearly free, so the
    # iterates drift slowly; check the bound on a feasible late iterate
    res = jdssc_solve(X, p, StopRule(tol=1e-8, max_iter=5000), raise_on_failure=False)
    assert max(res.residuals[k] for k in ("y_minus_a", "z_minus_xc", "row_sums", "col_sums")) < 1e-6
    both = (res.Cp > 1e-6) & (res.Cq > 1e-6)
    assert both.any(), "instance chosen so that overlaps occur"
    bound = (eta1 * eta2 - eta3) / eta1
    assert np.all(np.maximum(res.Cp, res.Cq)[both] < bound + 1e-8)


def test_tau_shrunk_with_warning():
    X = rand_X(4, 8, 12, scale=3.0)
    p = DsscParams(1.0, 0.1, 0.0, tau=1.0)
    with pytest.warns(RuntimeWarning, match="tau"):
        jdssc_solve(X, p, StopRule(max_iter=5), raise_on_failure=False)


def test_nonconvergence_carries_partial():
    X = rand_X(4, 8, 13)
    p = params_for(X, 1.0, 0.1, 0.0)
    with pytest.raises(ConvergenceError) as err:
        jdssc_solve(X, p, StopRule(tol=1e-12, max_iter=3))
    assert err.value.partial.iterations == 3


def test_size_cap():
    with pytest.raises(ValidationError):
        jdssc_solve(rand_X(2, 12, 0), DsscParams(1.0, 0.1), max_n=10)


def test_projected_affinity_is_feasible_on_subspace_data():
    X, _ = subspace_data(3, 2, 6, 8, 0.0, 0)
    p = params_for(X, 1.0, 0.1, 0.0)
    res = jdssc_solve(X, p, StopRule(max_iter=20000))
    assert res.affinity.report(1e-4).passed
