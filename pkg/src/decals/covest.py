"""Cell-type covariance estimation and the iterative covariance/proportion fit.

Residual products z_ij z_ij' regress on squared proportions to recover the
per-type covariance entries Sigma^(k)_jj'. Because estimated proportions enter
the regressors, the moment matrix H'H and the regressor matrix H are biased;
bias_terms computes the correction (B1, B2) implied by a Gaussian model for the
estimation error. Correlation-scale SCAD thresholding with a cross-validated
level sparsifies each Sigma^(k); a PSD projection restores validity.

run_decals alternates: covariance estimates -> subject covariances -> sandwich
covariances V_i -> new bias terms, until V stabilizes. When the corrected
moment matrix H'H - B1 loses positive definiteness (correction larger than the
signal, typical at small p), the loop permanently falls back to the raw
estimator for the rest of the run and records a warning.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import qp
from .deconv import (ProportionEstimate, constraint_projector,
                     estimate_proportions, _sample_ids, _values, BOUNDARY_TOL)
from .errors import (DimensionMismatch, InsufficientSamples,
                     NonConvergenceWarning, SingularCorrectedMoment,
                     SingularMomentMatrix)

# Variance floor for corrected diagonal entries (over-correction guard).
_DIAG_FLOOR = 1e-10
# Relative eigenvalue threshold at which H'H - B1 counts as not invertible.
_CORRECTED_EIG_FLOOR = 1e-8


@dataclass
class CtsCovarianceSet:
    """K symmetric p x p covariance matrices, one per cell type."""
    matrices: np.ndarray                     # (K, p, p)
    cell_types: list[str]

    def __post_init__(self):
        self.matrices = np.asarray(self.matrices, dtype=float)


@dataclass
class BiasTerms:
    """Finite-sample bias of the moment regression under estimated proportions.

    B1 corrects H'H (K x K, symmetric); B2 corrects H row-wise (n x K)."""
    B1: np.ndarray
    B2: np.ndarray


@dataclass
class DecalsResult:
    estimates: list[ProportionEstimate]
    cts_covariances: CtsCovarianceSet
    iterations: int
    converged: bool
    lambdas: np.ndarray | None = None        # per-type SCAD levels, sparse mode
    warnings: list[str] = field(default_factory=list)


def residuals(W, Y, proportions) -> np.ndarray:
    """Residual matrix Z with Z[j, i] = y_ij - sum_k pi_ik w_kj."""
    Wv, Yv = _values(W), _values(Y)
    P = np.asarray(proportions, dtype=float)
    if P.ndim != 2 or P.shape != (Yv.shape[1], Wv.shape[1]):
        raise DimensionMismatch(
            f"proportions {P.shape} do not match n={Yv.shape[1]}, K={Wv.shape[1]}")
    if Wv.shape[0] != Yv.shape[0]:
        raise DimensionMismatch("signature and bulk gene dimensions differ")
    return Yv - Wv @ P.T


def _moment_weights(H_hat):
    H = np.asarray(H_hat, dtype=float)
    M = H.T @ H
    w = np.linalg.eigvalsh(M)
    if w[0] <= 1e-12 * max(w[-1], 0.0) or w[-1] <= 0.0:
        raise SingularMomentMatrix(
            f"H'H numerically singular (eig range [{w[0]:.3e}, {w[-1]:.3e}])")
    return H, np.linalg.solve(M, H.T)        # C: (K, n)


def cts_covariance_raw(H_hat, Z, pair) -> np.ndarray:
    """Raw regression estimate of (Sigma^(1)_jj', ..., Sigma^(K)_jj')."""
    H, C = _moment_weights(H_hat)
    Z = np.asarray(Z, dtype=float)
    j, jp = pair
    return C @ (Z[j] * Z[jp])


def cts_covariance_raw_all(H_hat, Z) -> np.ndarray:
    """All gene pairs at once: (K, p, p) array reusing one factorization."""
    H, C = _moment_weights(H_hat)
    Z = np.asarray(Z, dtype=float)
    out = np.stack([(Z * C[k]) @ Z.T for k in range(C.shape[0])])
    return 0.5 * (out + out.transpose(0, 2, 1))


def _bias_arrays(P, V, p):
    """B1/B2 from proportions P (n,K) and covariances V (n,K,K) at the
    sqrt(p)-scale (covariance of sqrt(p) * estimation error)."""
    P = np.asarray(P, dtype=float)
    V = np.asarray(V, dtype=float)
    n, K = P.shape
    H2 = P ** 2                              # squared proportions
    u = np.einsum('nkk->nk', V)              # per-sample diag(V_i)
    t1 = H2.T @ u                            # sum_i pi2_i u_i'
    t2 = 4.0 * np.einsum('nk,nl,nkl->kl', P, P, V)
    T = 2.0 * V ** 2 + u[:, :, None] * u[:, None, :]
    B1 = (t1 + t1.T + t2) / p + T.sum(axis=0) / p ** 2
    B2 = u / p
    return 0.5 * (B1 + B1.T), B2


def bias_terms(estimates: list[ProportionEstimate], p: int) -> BiasTerms:
    """Bias of the moment regression implied by the estimates' covariances.

    E[H'H] - H'H and E[H] - H under Gaussian estimation error with the stored
    per-sample covariances (which are at the /p scale, hence the rescale)."""
    P = np.stack([np.asarray(e.proportions, dtype=float) for e in estimates])
    V = np.stack([np.asarray(e.covariance, dtype=float) for e in estimates]) * p
    B1, B2 = _bias_arrays(P, V, p)
    return BiasTerms(B1, B2)


def cts_covariance_corrected(H_hat, Z, bias: BiasTerms) -> np.ndarray:
    """Bias-corrected covariance estimates, (K, p, p), symmetrized.

    Solves {H'H - B1} C = (H - B2)' and assembles sum_i C_ki z_i z_i'.
    Raises SingularCorrectedMoment when H'H - B1 is not positive definite."""
    H = np.asarray(H_hat, dtype=float)
    Z = np.asarray(Z, dtype=float)
    M = H.T @ H - bias.B1
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    if w[0] <= _CORRECTED_EIG_FLOOR * max(w[-1], 0.0) or w[-1] <= 0.0:
        raise SingularCorrectedMoment(
            f"corrected moment matrix not positive definite "
            f"(eig range [{w[0]:.3e}, {w[-1]:.3e}])")
    C = np.linalg.solve(M, (H - bias.B2).T)
    out = np.stack([(Z * C[k]) @ Z.T for k in range(C.shape[0])])
    return 0.5 * (out + out.transpose(0, 2, 1))


def scad_threshold(R, lam: float, a: float = 3.7) -> np.ndarray:
    """Elementwise three-branch SCAD shrinkage of off-diagonal entries.

    |r| <= 2*lam: soft threshold sign(r)*max(|r|-lam, 0); 2*lam < |r| <= a*lam:
    sign(r)*(lam + (a-1)/(a-2)*(|r| - 2*lam)); beyond a*lam: unchanged.
    The diagonal is preserved."""
    R = np.asarray(R, dtype=float)
    if lam < 0.0:
        raise ValueError(f"lam must be nonnegative, got {lam}")
    if a <= 2.0:
        raise ValueError(f"shape parameter must exceed 2, got {a}")
    if (np.abs(R) > 1.0 + 1e-8).any():
        raise ValueError("entries exceed 1 in magnitude; not a correlation matrix")
    A = np.abs(R)
    S = np.sign(R)
    soft = S * np.maximum(A - lam, 0.0)
    mid = S * (lam + (a - 1.0) / (a - 2.0) * (A - 2.0 * lam))
    out = np.where(A <= 2.0 * lam, soft, np.where(A <= a * lam, mid, R))
    d = np.diag_indices(min(R.shape))
    out[d] = R[d]
    return out


def _to_correlation(S):
    d = np.clip(np.einsum('kk->k', S), _DIAG_FLOOR, None)
    rd = np.sqrt(d)
    R = np.clip(S / np.outer(rd, rd), -1.0, 1.0)
    np.fill_diagonal(R, 1.0)
    return R, rd


def _sparsify(S, lam):
    """Threshold one covariance on the correlation scale, then re-project."""
    R, rd = _to_correlation(S)
    T = scad_threshold(R, lam)
    return qp.nearest_psd(T * np.outer(rd, rd))


def cross_validate_lambda(Z, H_hat, folds: int = 5, grid=None, seed: int = 0
                          ) -> np.ndarray:
    """Per-type SCAD level minimizing held-out Frobenius loss.

    Samples are split into `folds` groups by a seeded permutation. For each
    fold, the thresholded training estimate is compared to the raw held-out
    estimate; the per-type grid value with the smallest summed loss wins."""
    Z = np.asarray(Z, dtype=float)
    H = np.asarray(H_hat, dtype=float)
    n, K = H.shape
    # every holdout fold must support its own rank-K moment regression
    need = folds * max(2, K)
    if n < need:
        raise InsufficientSamples(
            f"need n >= {need} for {folds}-fold cross-validation with "
            f"K={K}, got {n}")
    if grid is None:
        grid = np.logspace(np.log10(0.01), 0.0, 20)
    grid = np.asarray(grid, dtype=float)
    rng = np.random.Generator(np.random.Philox(key=seed))
    fold_ids = np.array_split(rng.permutation(n), folds)
    losses = np.zeros((K, len(grid)))
    for hold in fold_ids:
        mask = np.ones(n, dtype=bool)
        mask[hold] = False
        S_tr = cts_covariance_raw_all(H[mask], Z[:, mask])
        S_ho = cts_covariance_raw_all(H[~mask], Z[:, ~mask])
        for k in range(K):
            R, rd = _to_correlation(S_tr[k])
            scale = np.outer(rd, rd)
            for g, lam in enumerate(grid):
                fit = scad_threshold(R, lam) * scale
                losses[k, g] += ((fit - S_ho[k]) ** 2).sum()
    return grid[np.argmin(losses, axis=1)]


def subject_covariance(proportions, cts: CtsCovarianceSet | np.ndarray
                       ) -> np.ndarray:
    """Subject-level error covariance: sum_k pi_k^2 Sigma^(k)."""
    pi = np.asarray(proportions, dtype=float)
    M = np.asarray(getattr(cts, "matrices", cts), dtype=float)
    if pi.shape[0] != M.shape[0]:
        raise DimensionMismatch(
            f"{pi.shape[0]} proportions vs {M.shape[0]} covariance matrices")
    return np.einsum('k,kpq->pq', pi ** 2, M)


def run_decals(W, Y, *, sparse: bool = True, correct: bool = True,
               max_iter: int = 50, tol: float = 1e-4,
               lambdas=None, seed: int = 0) -> DecalsResult:
    """Full pipeline: proportions, then the covariance fixed-point loop.

    sparse:   SCAD-threshold each Sigma^(k) (level from cross-validation
              unless `lambdas` is given) and project to PSD. Without
              thresholding the plug-in V collapses along the constraint
              direction, so leave this on unless Sigma estimates are not needed.
    correct:  apply the moment bias correction; automatically and permanently
              falls back to the raw estimator if the corrected moment matrix
              stops being positive definite (warning recorded).
    tol:      relative sup-norm change of all V_i that counts as converged.
    """
    Wv, Yv = _values(W), _values(Y)
    p, K = Wv.shape
    n = Yv.shape[1]
    if n < K:
        raise InsufficientSamples(f"need n >= K for the moment regression, got n={n}")
    if max_iter < 1:
        raise ValueError(f"max_iter must be at least 1, got {max_iter}")
    run_warnings: list[str] = []

    pis = estimate_proportions(W, Y)
    P = np.stack(pis)
    H = P ** 2
    Z = residuals(Wv, Yv, P)
    U, Omi = constraint_projector(Wv)

    # starting covariances: pooled residual variance, iid-error sandwich
    s2 = (Z * Z).sum(axis=0) / (p - 1)
    base = U @ Omi @ U.T
    V = s2[:, None, None] * base[None, :, :]           # (n, K, K)

    if sparse and lambdas is None:
        try:
            lambdas = cross_validate_lambda(Z, H, seed=seed)
        except InsufficientSamples as err:
            raise InsufficientSamples(
                f"{err}; too few samples to cross-validate the threshold "
                f"level, pass fixed `lambdas` instead") from None
    lambdas = None if lambdas is None else np.asarray(lambdas, dtype=float)

    tripped = False
    converged = False
    iterations = 0
    Sk = np.zeros((K, p, p))
    for t in range(max_iter):
        iterations = t + 1
        use_correct = correct and not tripped
        if use_correct:
            B1, B2 = _bias_arrays(P, V, p)
            try:
                Sk = cts_covariance_corrected(H, Z, BiasTerms(B1, B2))
            except SingularCorrectedMoment as err:
                tripped = True
                msg = (f"iteration {t}: {err}; bias correction disabled, "
                       f"raw estimator used for the rest of the run")
                run_warnings.append(msg)
                warnings.warn(msg)
        if not (correct and not tripped):
            Sk = cts_covariance_raw_all(H, Z)
        # variance floor, then optional sparsification
        di = np.arange(p)
        for k in range(K):
            Sk[k, di, di] = np.maximum(Sk[k, di, di], _DIAG_FLOOR)
            if sparse:
                Sk[k] = _sparsify(Sk[k], lambdas[k])
        Gk = np.stack([Wv.T @ Sk[k] @ Wv / p for k in range(K)])
        A = np.einsum('ab,kbc,cd->kad', Omi, Gk, Omi)
        Vn = np.einsum('ab,nbc,dc->nad', U, np.einsum('nk,kab->nab', H, A), U)
        Vn = 0.5 * (Vn + Vn.transpose(0, 2, 1))
        delta = (np.abs(Vn - V).max(axis=(1, 2))
                 / (1.0 + np.abs(V).max(axis=(1, 2)))).max()
        V = Vn
        if delta < tol:
            converged = True
            break
    if not converged:
        msg = f"no convergence after {iterations} iterations (last delta {delta:.3e})"
        run_warnings.append(msg)
        warnings.warn(msg, NonConvergenceWarning)

    ids = _sample_ids(Y, n)
    estimates = []
    for i in range(n):
        est = ProportionEstimate(P[i], V[i] / p, ids[i])
        if P[i].min() < BOUNDARY_TOL:
            est.warnings.append(
                "proportion at the simplex boundary; normal approximation "
                "may be unreliable")
        estimates.append(est)
    cell_types = list(getattr(W, "cell_types", [str(k) for k in range(K)]))
    return DecalsResult(estimates, CtsCovarianceSet(Sk, cell_types),
                        iterations, converged, lambdas, run_warnings)
