"""Quadratic-programming kernel: simplex- and equality-constrained least squares
plus a Frobenius-nearest PSD projection.

The simplex solver is a dual active-set method (Goldfarb-Idnani): start at the
unconstrained minimizer, impose the sum-to-one equality first, then add violated
nonnegativity constraints one at a time, taking the dual-feasible step length at
each move. The design dimension K is small, so per-step systems are solved
directly against one Cholesky factorization of W'W.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DimensionMismatch, MaxIterations, NonFinite, SingularDesign

# Relative eigenvalue threshold below which W'W counts as singular.
_COND_FLOOR = 1e-10
# Negative dust on returned proportions is clamped to zero up to this slack.
_CLAMP = 1e-12


def _as_problem(W, y):
    W = np.asarray(W, dtype=float)
    y = np.asarray(y, dtype=float)
    if W.ndim != 2 or y.ndim != 1 or W.shape[0] != y.shape[0]:
        raise DimensionMismatch(
            f"design {W.shape} and response {y.shape} are incompatible")
    p, K = W.shape
    if p < K or K < 2:
        raise DimensionMismatch(f"need p >= K >= 2, got p={p}, K={K}")
    if not (np.isfinite(W).all() and np.isfinite(y).all()):
        raise NonFinite("design or response contains NaN/Inf")
    return W, y


def _gram(W):
    G = W.T @ W
    w = np.linalg.eigvalsh(G)
    if w[0] <= _COND_FLOOR * w[-1] or w[-1] <= 0.0:
        raise SingularDesign(
            f"W'W numerically singular (eig range [{w[0]:.3e}, {w[-1]:.3e}])")
    return G


def solve_equality_ls(W, y) -> np.ndarray:
    """Minimize ||y - W pi||^2 subject only to sum(pi) = 1.

    Closed form: shift the unconstrained solution along G^{-1} 1 until the
    constraint holds. Entries may be negative.
    """
    W, y = _as_problem(W, y)
    G = _gram(W)
    c = cho_factor(G)
    pit = cho_solve(c, W.T @ y)
    g1 = cho_solve(c, np.ones(len(pit)))
    pi = pit - g1 * ((pit.sum() - 1.0) / g1.sum())
    # guard against rounding in the shift itself
    pi[-1] += 1.0 - pi.sum()
    return pi


def solve_simplex_ls(W, y) -> np.ndarray:
    """Minimize ||y - W pi||^2 over the probability simplex.

    Returns the unique minimizer with every entry >= 0 and sum exactly 1.
    Raises MaxIterations if the active-set loop exceeds 50*(K+1) changes.
    """
    W, y = _as_problem(W, y)
    G = _gram(W)
    return _gi_simplex(G, W.T @ y)


def solve_simplex_normal(G, a) -> np.ndarray:
    """Simplex-constrained minimizer of 0.5 x'Gx - a'x for positive definite G.

    Normal-equation form of solve_simplex_ls: equivalent to it on any design
    with W'W = G and W'y = a. Useful when the design itself is never formed.
    """
    G = np.asarray(G, dtype=float)
    a = np.asarray(a, dtype=float)
    if G.ndim != 2 or G.shape[0] != G.shape[1] or a.shape != (G.shape[0],):
        raise DimensionMismatch(f"incompatible shapes {G.shape} and {a.shape}")
    if not (np.isfinite(G).all() and np.isfinite(a).all()):
        raise NonFinite("normal equations contain NaN/Inf")
    w = np.linalg.eigvalsh(0.5 * (G + G.T))
    if w[0] <= _COND_FLOOR * w[-1] or w[-1] <= 0.0:
        raise SingularDesign(
            f"moment matrix numerically singular (eig range [{w[0]:.3e}, {w[-1]:.3e}])")
    return _gi_simplex(G, a)


def _gi_simplex(G, a) -> np.ndarray:
    K = G.shape[0]
    c = cho_factor(G)

    pi = cho_solve(c, a)                     # unconstrained start
    ones = np.ones(K)

    # active constraint normals; index 0 is the equality, k>=1 pins pi[k-1] at 0
    act: list[int] = []
    u = np.zeros(0)

    def normal(idx):
        if idx == 0:
            return ones
        e = np.zeros(K)
        e[idx - 1] = 1.0
        return e

    def step_dirs(nplus, N):
        z0 = cho_solve(c, nplus)
        if N.shape[1] == 0:
            return z0, np.zeros(0)
        GiN = cho_solve(c, N)
        r = np.linalg.solve(N.T @ GiN, N.T @ z0)
        return z0 - GiN @ r, r

    cap = 50 * (K + 1)
    changes = 0

    def take_in(idx, bval):
        # add constraint idx (target n'pi = bval) keeping dual feasibility
        nonlocal pi, act, u, changes
        uplus = 0.0
        while True:
            changes += 1
            if changes > cap:
                raise MaxIterations("active-set change cap exceeded")
            nplus = normal(idx)
            N = np.column_stack([normal(j) for j in act]) if act else np.zeros((K, 0))
            z, r = step_dirs(nplus, N)
            viol = bval - nplus @ pi
            # dual blocking step (equality constraint never leaves)
            t1 = np.inf
            drop = -1
            for pos, j in enumerate(act):
                if j != 0 and r[pos] > 1e-13:
                    tj = u[pos] / r[pos]
                    if tj < t1:
                        t1, drop = tj, pos
            denom = nplus @ z
            t2 = viol / denom if denom > 1e-13 * max(1.0, abs(viol)) else np.inf
            t = min(t1, t2)
            if not np.isfinite(t):
                raise MaxIterations("no feasible step; constraints degenerate")
            pi = pi + t * z
            if len(u):
                u = u - t * r
            uplus += t
            if t2 <= t1:
                act.append(idx)
                u = np.append(u, uplus)
                return
            # blocked: drop the binding constraint and retry the same candidate
            act.pop(drop)
            u = np.delete(u, drop)

    take_in(0, 1.0)                          # equality first
    while True:
        k = int(np.argmin(pi))
        if pi[k] >= -1e-11:
            break
        take_in(k + 1, 0.0)

    pi = np.where(pi < 0.0, np.where(pi >= -_CLAMP, 0.0, pi), pi)
    pi = np.maximum(pi, 0.0)                 # residual dust after the loop exit test
    return pi / pi.sum()


def kkt_residual(W, y, pi) -> float:
    """Max KKT violation of pi for the simplex problem; small means optimal.

    Checks stationarity (gradient equal across strictly positive coordinates,
    no smaller on zero coordinates), primal feasibility, and nonnegativity.
    """
    W = np.asarray(W, dtype=float)
    y = np.asarray(y, dtype=float)
    pi = np.asarray(pi, dtype=float)
    g = W.T @ (W @ pi - y)
    free = pi > 1e-10
    mu = g[free].mean() if free.any() else g.min()
    res = abs(pi.sum() - 1.0)
    res = max(res, float(-pi.min()) if pi.min() < 0 else 0.0)
    if free.any():
        res = max(res, float(np.abs(g[free] - mu).max()))
    if (~free).any():
        res = max(res, float(max(0.0, (mu - g[~free]).max())))
    return res


def nearest_psd(S) -> np.ndarray:
    """Frobenius-nearest positive semidefinite matrix to S.

    Symmetrizes, then clips negative eigenvalues at zero (the projection onto
    the PSD cone for the Frobenius norm). Idempotent.
    """
    S = np.asarray(S, dtype=float)
    if not np.isfinite(S).all():
        raise NonFinite("matrix contains NaN/Inf")
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got {S.shape}")
    S = 0.5 * (S + S.T)
    w, Q = np.linalg.eigh(S)
    if w[0] >= 0.0:
        return S
    out = (Q * np.maximum(w, 0.0)) @ Q.T
    return 0.5 * (out + out.T)
