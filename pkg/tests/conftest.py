"""Shared reference implementations and reporting helpers for the tests.

The two simplex-LS oracles here are deliberately independent of the package
solver: a projected-gradient iteration and an exhaustive support enumeration.
"""

import numpy as np

# pass/fail lines appended by the acceptance tests, printed at session end
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, len(v) + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def pg_simplex_ls(W: np.ndarray, y: np.ndarray, max_iter: int = 200_000,
                  tol: float = 1e-14) -> np.ndarray:
    """Projected gradient on 0.5*||y - Wx||^2 over the simplex.

    Fixed step 1/L with L the largest Gram eigenvalue; stops at a projection
    fixed point. Slow but independent of the active-set solver."""
    G = W.T @ W
    a = W.T @ y
    L = np.linalg.eigvalsh(G)[-1]
    x = np.full(W.shape[1], 1.0 / W.shape[1])
    for _ in range(max_iter):
        grad = G @ x - a
        xn = project_simplex(x - grad / L)
        if np.abs(xn - x).max() < tol:
            return xn
        x = xn
    return x


def enum_simplex_ls(W: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Exact solution by enumerating supports (exponential in K; K small).

    For every nonempty support solve the equality-constrained stationarity
    system; the best feasible candidate is the optimum."""
    G = W.T @ W
    a = W.T @ y
    K = len(a)
    best, best_obj = None, np.inf
    for mask in range(1, 2 ** K):
        S = [k for k in range(K) if mask >> k & 1]
        m = len(S)
        kkt = np.zeros((m + 1, m + 1))
        kkt[:m, :m] = 2.0 * G[np.ix_(S, S)]
        kkt[:m, m] = 1.0
        kkt[m, :m] = 1.0
        rhs = np.concatenate([2.0 * a[S], [1.0]])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            continue
        x = np.zeros(K)
        x[S] = sol[:m]
        if x.min() < -1e-12:
            continue
        x = np.clip(x, 0.0, None)
        x /= x.sum()
        obj = x @ G @ x - 2.0 * a @ x
        if obj < best_obj:
            best, best_obj = x, obj
    return best


def random_instance(rng, K=None, p=None, spread=1.0):
    """Random (W, y) with a mix of interior and boundary optima."""
    K = K if K is not None else int(rng.integers(2, 7))
    p = p if p is not None else int(rng.integers(K + 2, 50))
    W = rng.normal(0.0, 1.0, (p, K))
    if rng.random() < 0.5:
        pi = rng.dirichlet(np.ones(K))
        y = W @ pi + spread * rng.normal(0.0, 1.0, p)
    else:
        y = spread * rng.normal(0.0, 2.0, p)
    return W, y
