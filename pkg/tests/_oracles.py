"""Independent reference implementations used only by the tests.

Nothing here imports the package solvers, so agreement with them is a
genuine cross-check.
"""

import itertools

import numpy as np


def proj_simplex_rows(Y):
    """Euclidean projection of each row of Y onto the probability simplex."""
    n = Y.shape[1]
    U = -np.sort(-Y, axis=1)
    css = np.cumsum(U, axis=1) - 1.0
    ind = np.arange(1, n + 1)
    cond = U - css / ind > 0
    rho = n - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(Y.shape[0]), rho] / (rho + 1)
    return np.maximum(Y - theta[:, None], 0.0)


def qp_projection(C, eta2, tol=1e-11, max_iter=200000):
    """Solve min <-|C|, A> + eta2/2 ||A||^2 over doubly stochastic A.

    Accelerated projected gradient on the column multipliers: for fixed
    multipliers beta the rows decouple into simplex projections of
    |C|/eta2 - beta, and the column-sum residual is the gradient. Restarted
    whenever momentum opposes the gradient. Runs until every column sum is
    within ``tol`` of one (rows are exact by construction).
    """
    G = np.abs(np.asarray(C, dtype=np.float64)) / eta2
    n = G.shape[0]
    beta = np.zeros(n)
    y = beta.copy()
    t = 1.0
    for it in range(max_iter):
        A = proj_simplex_rows(G - y[None, :])
        g = A.sum(axis=0) - 1.0
        if np.abs(g).max() < tol:
            return A
        bnew = y + g / n
        tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        if g @ (bnew - beta) < 0:
            tn = 1.0
            y = bnew.copy()
        else:
            y = bnew + (t - 1.0) / tn * (bnew - beta)
        beta, t = bnew, tn
    raise RuntimeError(f"oracle did not reach {tol:g} in {max_iter} iterations")


def cvxpy_projection(C, eta2):
    """Same problem through a general-purpose conic solver."""
    import cvxpy as cp

    C = np.abs(np.asarray(C, dtype=np.float64))
    n = C.shape[0]
    A = cp.Variable((n, n), nonneg=True)
    obj = cp.Minimize(-cp.sum(cp.multiply(C, A)) + 0.5 * eta2 * cp.sum_squares(A))
    prob = cp.Problem(obj, [cp.sum(A, axis=0) == 1, cp.sum(A, axis=1) == 1])
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    return A.value


def projection_objective(C, A, eta2):
    return float(-np.sum(np.abs(C) * A) + 0.5 * eta2 * np.sum(A * A))


def subspace_data(K, dim, ambient, per, sigma, seed):
    """Union of random subspaces, generated without the package."""
    rng = np.random.default_rng(seed)
    cols, labels = [], []
    for k in range(K):
        B, _ = np.linalg.qr(rng.standard_normal((ambient, dim)))
        P = B @ rng.standard_normal((dim, per))
        cols.append(P + sigma * rng.standard_normal(P.shape))
        labels += [k] * per
    X = np.hstack(cols)
    return X / np.linalg.norm(X, axis=0), np.array(labels)


def brute_force_accuracy(pred, truth):
    pred, truth = np.asarray(pred), np.asarray(truth)
    p_ids, t_ids = np.unique(pred), np.unique(truth)
    m = max(len(p_ids), len(t_ids))
    best = 0
    for perm in itertools.permutations(range(m), len(p_ids)):
        mapping = {p: perm[i] for i, p in enumerate(p_ids)}
        t_index = {t: i for i, t in enumerate(t_ids)}
        hits = sum(mapping[a] == t_index[b] for a, b in zip(pred, truth))
        best = max(best, hits)
    return best / len(pred)


def contingency_nmi(pred, truth):
    """NMI by explicit double loops over cluster ids."""
    pred, truth = list(pred), list(truth)
    n = len(pred)
    P, T = sorted(set(pred)), sorted(set(truth))

    def H(labels, ids):
        out = 0.0
        for a in ids:
            p = labels.count(a) / n
            out -= p * np.log(p)
        return out

    mi = 0.0
    for a in P:
        for b in T:
            nab = sum(1 for x, y in zip(pred, truth) if x == a and y == b)
            if nab:
                pa, pb = pred.count(a) / n, truth.count(b) / n
                mi += nab / n * np.log((nab / n) / (pa * pb))
    denom = 0.5 * (H(pred, P) + H(truth, T))
    return 1.0 if denom == 0 else mi / denom


def dense_spe(A, y):
    A = np.abs(np.asarray(A))
    n = A.shape[1]
    total = 0.0
    for i in range(n):
        col = A[:, i]
        s = col.sum()
        if s > 0:
            total += sum(col[j] for j in range(n) if y[j] != y[i]) / s
    return total / n


def central_diff(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def hub_graph(n, k):
    """Hub-and-spoke adjacency with minimum degree k and no perfect matching.

    The first n - k nodes are joined only to the k hub nodes, which are
    joined to everything but themselves. For k < n/2 the n - k spokes share
    k neighbours, so Hall's condition fails.
    """
    m = n - k
    G = np.zeros((n, n))
    G[:m, m:] = 1.0
    G[m:, :m] = 1.0
    G[m:, m:] = 1.0 - np.eye(k)
    return G
