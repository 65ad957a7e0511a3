"""Propagating proportion uncertainty into downstream analyses.

Two pieces: draw simplex-valued proportion sets from each estimate's Gaussian
approximation, and aggregate per-draw test decisions into final calls with a
cutoff that accounts for the extra variability injected by the draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch

DRAW_CLIP_FLOOR = 0.0


@dataclass
class ProportionDrawSet:
    """M resampled proportion matrices for n samples: draws is (M, n, K)."""
    draws: np.ndarray
    sample_ids: list
    cell_types: list
    seed: int

    def __post_init__(self):
        d = np.asarray(self.draws, dtype=float)
        if d.ndim != 3:
            raise DimensionMismatch(f"draws must be (M, n, K), got {d.shape}")
        self.draws = d


@dataclass
class CallDecision:
    """Aggregated decision for one (unit, cell type) hypothesis."""
    unit_id: str
    cell_type: str
    hits: int
    total_draws: int
    cutoff: int
    called: bool


def _gauss_root(V: np.ndarray) -> np.ndarray:
    """Symmetric square root with negative eigenvalues clipped to zero."""
    V = 0.5 * (V + V.T)
    w, Q = np.linalg.eigh(V)
    return Q * np.sqrt(np.maximum(w, 0.0))


def _raw_draws(estimates, M: int, rng) -> np.ndarray:
    """Gaussian draws around each estimate before the simplex projection."""
    n = len(estimates)
    K = len(estimates[0].proportions)
    out = np.empty((M, n, K))
    for i, est in enumerate(estimates):
        root = _gauss_root(np.asarray(est.covariance, dtype=float))
        z = rng.standard_normal((M, K))
        out[:, i, :] = est.proportions[None, :] + z @ root.T
    return out


def project_draws(raw: np.ndarray) -> np.ndarray:
    """Clip negatives to zero and renormalize each draw to sum one.

    A draw that clips to all zeros falls back to the uniform vector."""
    clipped = np.clip(raw, DRAW_CLIP_FLOOR, None)
    tot = clipped.sum(axis=-1, keepdims=True)
    K = raw.shape[-1]
    uniform = np.full(K, 1.0 / K)
    out = np.where(tot > 0, clipped / np.where(tot > 0, tot, 1.0),
                   uniform[None, None, :])
    return out


def sample_proportion_sets(estimates, M: int, seed: int = 0,
                           cell_types=None) -> ProportionDrawSet:
    """M proportion-set draws from N(estimate, covariance), projected back to
    the simplex (clip at zero, renormalize).

    The covariance is the stored per-sample sampling covariance; drawing self
    consistently from it is what lets downstream aggregation see the
    estimation uncertainty."""
    if M < 1:
        raise ValueError("M must be >= 1")
    if not estimates:
        raise DimensionMismatch("need at least one estimate")
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    raw = _raw_draws(estimates, M, rng)
    if cell_types is None:
        cell_types = [str(k) for k in range(raw.shape[2])]
    return ProportionDrawSet(project_draws(raw),
                             [e.sample_id for e in estimates],
                             list(cell_types), seed)


def call_cutoff(M: int, alpha: float) -> int:
    """Hit-count threshold: mean plus two binomial sds, rounded up.

    A hypothesis null in every draw exceeds this only with small probability,
    so calls surviving the cutoff are robust to the injected noise."""
    if M < 1:
        raise ValueError("M must be >= 1")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    return math.ceil(M * alpha + 2.0 * math.sqrt(M * alpha * (1.0 - alpha)))


def aggregate_calls(pvalues, alpha: float = 0.05):
    """Aggregate per-draw p-values into final calls.

    pvalues maps (unit_id, cell_type) -> array of M per-draw p-values. A
    hypothesis is called when its number of draws with p < alpha strictly
    exceeds call_cutoff(M, alpha). Returns a list of CallDecision sorted by
    (unit_id, cell_type)."""
    decisions = []
    for (unit, ct), ps in sorted(pvalues.items()):
        ps = np.asarray(ps, dtype=float)
        if ps.ndim != 1 or not len(ps):
            raise DimensionMismatch(
                f"p-values for ({unit}, {ct}) must be a nonempty vector")
        if (ps < 0).any() or (ps > 1).any() or not np.isfinite(ps).all():
            raise ValueError(f"p-values for ({unit}, {ct}) outside [0, 1]")
        M = len(ps)
        cut = call_cutoff(M, alpha)
        hits = int((ps < alpha).sum())
        decisions.append(CallDecision(str(unit), str(ct), hits, M, cut,
                                      hits > cut))
    return decisions
