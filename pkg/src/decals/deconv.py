"""Proportion estimation, asymptotic covariance, and confidence intervals.

Estimation solves a simplex-constrained least squares per sample. The sampling
covariance of the estimator follows the sandwich form V = U D U' built from the
design Gram matrix and a subject-level residual covariance; V has null vector 1
because the sum-to-one constraint removes variation along it. V is scaled so
that V/p is the covariance of the estimate itself; ProportionEstimate stores
the /p scale since that is what intervals use.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import qp
from .errors import (DecalsError, DimensionMismatch, GeneMismatch, NonFinite,
                     SingularDesign)

# A proportion this close to 0 sits on the boundary where the normal
# approximation for its estimate is not guaranteed.
BOUNDARY_TOL = 1e-6


@dataclass
class SignatureMatrix:
    """Mean expression of p signature genes (rows) across K cell types."""
    values: np.ndarray
    gene_ids: list[str]
    cell_types: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        p, K = self.values.shape
        if len(self.gene_ids) != p or len(self.cell_types) != K:
            raise DimensionMismatch("id lists do not match matrix shape")
        if len(set(self.gene_ids)) != p:
            raise GeneMismatch("duplicate gene ids in signature")
        if len(set(self.cell_types)) != K:
            raise GeneMismatch("duplicate cell type names")
        if not np.isfinite(self.values).all():
            raise NonFinite("signature contains NaN/Inf")


@dataclass
class BulkMatrix:
    """Observed bulk expression, p genes (rows) by n samples (columns)."""
    values: np.ndarray
    gene_ids: list[str]
    sample_ids: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        p, n = self.values.shape
        if len(self.gene_ids) != p or len(self.sample_ids) != n:
            raise DimensionMismatch("id lists do not match matrix shape")
        if len(set(self.gene_ids)) != p:
            raise GeneMismatch("duplicate gene ids in bulk matrix")
        if not np.isfinite(self.values).all():
            raise NonFinite("bulk matrix contains NaN/Inf")


@dataclass
class ProportionEstimate:
    """Per-sample proportion estimate with its K x K sampling covariance.

    `covariance` is the covariance of the estimate (the /p scale used for
    interval construction). For the constrained estimator it is PSD with
    null vector 1; the unconstrained baseline does not satisfy those."""
    proportions: np.ndarray
    covariance: np.ndarray
    sample_id: str = ""
    warnings: list[str] = field(default_factory=list)


@dataclass
class SubjectCovariance:
    """p x p covariance of the bulk-level error for one sample."""
    values: np.ndarray
    sample_id: str = ""


def _values(x):
    return np.asarray(getattr(x, "values", x), dtype=float)


def align_genes(W: SignatureMatrix, Y: BulkMatrix):
    """Match genes by id and reorder the bulk rows to signature order.

    Genes present on only one side are dropped (count reported via a warning).
    Raises GeneMismatch when no genes are shared.
    """
    sig_index = {g: i for i, g in enumerate(W.gene_ids)}
    keep_sig, keep_bulk = [], []
    for j, g in enumerate(Y.gene_ids):
        i = sig_index.get(g)
        if i is not None:
            keep_sig.append(i)
            keep_bulk.append(j)
    if not keep_sig:
        first = Y.gene_ids[0] if Y.gene_ids else "<empty>"
        raise GeneMismatch(f"no shared gene ids; first bulk id was {first!r}")
    order = np.argsort(keep_sig)
    keep_sig = [keep_sig[i] for i in order]
    keep_bulk = [keep_bulk[i] for i in order]
    dropped = (len(W.gene_ids) - len(keep_sig)) + (len(Y.gene_ids) - len(keep_bulk))
    if dropped:
        warnings.warn(f"dropped {dropped} unmatched gene rows during alignment")
    Wa = SignatureMatrix(W.values[keep_sig], [W.gene_ids[i] for i in keep_sig],
                         list(W.cell_types))
    Ya = BulkMatrix(Y.values[keep_bulk], [Y.gene_ids[j] for j in keep_bulk],
                    list(Y.sample_ids))
    return Wa, Ya


def _sample_ids(Y, n):
    ids = getattr(Y, "sample_ids", None)
    return list(ids) if ids is not None else [str(i) for i in range(n)]


def estimate_proportions(W, Y) -> list[np.ndarray]:
    """Simplex-constrained least-squares proportions, one vector per sample."""
    Wv, Yv = _values(W), _values(Y)
    if Wv.shape[0] != Yv.shape[0]:
        raise GeneMismatch(
            f"gene dimension mismatch: signature {Wv.shape[0]} vs bulk {Yv.shape[0]}")
    ids = _sample_ids(Y, Yv.shape[1])
    out = []
    for i in range(Yv.shape[1]):
        try:
            out.append(qp.solve_simplex_ls(Wv, Yv[:, i]))
        except DecalsError as err:
            raise type(err)(f"sample {ids[i]}: {err}") from err
    return out


def constraint_projector(W) -> tuple[np.ndarray, np.ndarray]:
    """Return (U, Omega_inv) for the sandwich covariance.

    Omega = W'W/p; U = I - Omega^{-1} 1 (1' Omega^{-1} 1)^{-1} 1' projects out
    the direction the sum-to-one constraint fixes.
    """
    Wv = _values(W)
    p, K = Wv.shape
    Om = Wv.T @ Wv / p
    w = np.linalg.eigvalsh(Om)
    if w[0] <= 1e-10 * w[-1] or w[-1] <= 0.0:
        raise SingularDesign("W'W numerically singular")
    Omi = np.linalg.inv(Om)
    ones = np.ones(K)
    s = Omi @ ones
    U = np.eye(K) - np.outer(s, ones) / (ones @ s)
    return U, Omi


def theorem1_covariance(W, Sigma_i) -> np.ndarray:
    """Asymptotic covariance V of sqrt(p) * (estimate - truth).

    V = U D U' with D = Omega^{-1} (W' Sigma_i W / p) Omega^{-1}. Symmetric,
    PSD, and V 1 = 0. Divide by p for the covariance of the estimate.
    """
    Wv, Sv = _values(W), _values(Sigma_i)
    p = Wv.shape[0]
    if Sv.shape != (p, p):
        raise DimensionMismatch(
            f"subject covariance {Sv.shape} does not match p={p}")
    U, Omi = constraint_projector(Wv)
    D = Omi @ (Wv.T @ Sv @ Wv / p) @ Omi
    V = U @ D @ U.T
    return 0.5 * (V + V.T)


def confidence_intervals(est: ProportionEstimate, level: float = 0.95) -> np.ndarray:
    """Per-coordinate Wald intervals, truncated to [0, 1]. Shape (K, 2)."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0,1), got {level}")
    z = stats.norm.ppf(0.5 * (1.0 + level))
    pi = np.asarray(est.proportions, dtype=float)
    var = np.clip(np.diag(np.asarray(est.covariance, dtype=float)), 0.0, None)
    half = z * np.sqrt(var)
    lo = np.clip(pi - half, 0.0, 1.0)
    hi = np.clip(pi + half, 0.0, 1.0)
    return np.column_stack([lo, hi])


def ols_baseline(W, Y) -> list[ProportionEstimate]:
    """Unconstrained least-squares proportions with the iid-error covariance.

    No simplex projection: entries may be negative or exceed one. Covariance is
    sigma2_i * (W'W)^{-1} with sigma2_i = RSS_i / (p - K), the classical formula
    that ignores gene-gene correlation.
    """
    Wv, Yv = _values(W), _values(Y)
    p, K = Wv.shape
    G = Wv.T @ Wv
    w = np.linalg.eigvalsh(G)
    if w[0] <= 1e-10 * w[-1] or w[-1] <= 0.0:
        raise SingularDesign("W'W numerically singular")
    Gi = np.linalg.inv(G)
    B = Gi @ (Wv.T @ Yv)                     # K x n
    R = Yv - Wv @ B
    s2 = (R * R).sum(axis=0) / (p - K)
    ids = _sample_ids(Y, Yv.shape[1])
    return [ProportionEstimate(B[:, i].copy(), s2[i] * Gi, ids[i])
            for i in range(Yv.shape[1])]
