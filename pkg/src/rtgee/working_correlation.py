"""Working correlation estimation from robust-transformed residuals.

Moment estimators for the exchangeable and AR(1) structures plus the robust
unstructured estimator: a time-grid moment matrix of score-transformed
residuals, rescaled to unit diagonal and repaired to a positive definite
matrix.  Unbalanced designs are handled by pairwise-available averaging.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateScaleError, EstimationError
from .score_kernels import ScoreFunction, psi

INDEPENDENCE = "independence"
EXCHANGEABLE = "exchangeable"
AR1 = "ar1"
UNSTRUCTURED = "unstructured"

KINDS = (INDEPENDENCE, EXCHANGEABLE, AR1, UNSTRUCTURED)

#: Smallest admissible eigenvalue of any working correlation matrix.
MIN_EIGENVALUE = 1e-3
#: Off-diagonal clip keeping the unstructured matrix invertible in the
#: Cauchy-Schwarz equality case.
OFFDIAG_CLIP = 1.0 - 1e-6
#: Clip for the scalar exchangeable / AR(1) coefficient.
ALPHA_CLIP = 0.99


@dataclass(frozen=True)
class CorrelationModel:
    """A fitted working correlation structure.

    ``alpha`` is set for the exchangeable and AR(1) kinds; ``grid_matrix``
    is the T x T unit-diagonal matrix for the unstructured kind.
    """

    kind: str
    alpha: float | None = None
    grid_matrix: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown correlation kind {self.kind!r}")


def independence() -> CorrelationModel:
    return CorrelationModel(INDEPENDENCE)


def robust_residual_transform(residuals, score: ScoreFunction) -> list:
    """Apply the score kernel elementwise to the standardized residuals."""
    return [psi(score, e_i) for e_i in residuals.e]


def ensure_positive_definite(R: np.ndarray, min_eig: float = MIN_EIGENVALUE) -> np.ndarray:
    """Shrink toward the identity until the smallest eigenvalue clears
    ``min_eig``, using the smallest shrink factor on a 1e-3 grid."""
    R = 0.5 * (R + R.T)
    w_min = float(np.linalg.eigvalsh(R)[0])
    if w_min >= min_eig:
        return R
    # min eig of (1-g)R + gI is (1-g) w_min + g; solve for g and round up.
    g_exact = (min_eig - w_min) / (1.0 - w_min)
    g = min(1.0, np.ceil(g_exact / 1e-3) * 1e-3)
    out = (1.0 - g) * R + g * np.eye(R.shape[0])
    np.fill_diagonal(out, 1.0)
    return out


def pairwise_moment_matrix(transformed, time_index, n_times: int):
    """Pairwise-available moment matrix of the transformed residuals.

    Returns (S, counts) where S[j, k] sums products over subjects observing
    both grid positions and counts[j, k] is the number of such subjects.
    """
    S = np.zeros((n_times, n_times))
    counts = np.zeros((n_times, n_times), dtype=int)
    for pe_i, t_i in zip(transformed, time_index):
        ix = np.ix_(t_i, t_i)
        S[ix] += np.outer(pe_i, pe_i)
        counts[ix] += 1
    return S, counts


def unstructured_correlation(transformed, time_index, n_times: int) -> np.ndarray:
    """Raw unit-diagonal unstructured estimate (before clip and repair).

    For balanced data this is exactly the moment matrix of the transformed
    residuals divided by n, rescaled by its diagonal; unbalanced designs
    average over the subjects observing each time pair.
    """
    S, counts = pairwise_moment_matrix(transformed, time_index, n_times)
    if np.any(np.diag(counts) < 2):
        j = int(np.argmin(np.diag(counts)))
        raise EstimationError(
            f"time index {j} is observed for fewer than 2 subjects"
        )
    missing = np.argwhere(counts == 0)
    if missing.size:
        j, k = missing[0]
        raise EstimationError(
            f"time pair ({int(j)}, {int(k)}) is never jointly observed; the "
            "unstructured correlation is not identifiable"
        )
    R_u = S / counts
    B_o = np.diag(R_u).copy()
    if np.any(B_o <= 0.0):
        j = int(np.argmin(B_o))
        raise DegenerateScaleError(
            f"all transformed residuals vanish at time index {j}; cannot "
            "rescale the unstructured correlation"
        )
    scale = 1.0 / np.sqrt(B_o)
    return R_u * np.outer(scale, scale)


def estimate_unstructured(transformed, time_index, n_times: int,
                          n_subjects: int | None = None) -> CorrelationModel:
    """Unstructured working correlation with clipping and PD repair."""
    n = n_subjects if n_subjects is not None else len(transformed)
    if n_times * n_times > n:
        warnings.warn(
            f"time grid of size {n_times} is large relative to {n} subjects; "
            "the unstructured correlation estimate may be unstable",
            stacklevel=2,
        )
    R = unstructured_correlation(transformed, time_index, n_times)
    R = np.clip(R, -OFFDIAG_CLIP, OFFDIAG_CLIP)
    np.fill_diagonal(R, 1.0)
    R = ensure_positive_definite(R)
    return CorrelationModel(UNSTRUCTURED, grid_matrix=R)


def estimate_exchangeable(transformed) -> CorrelationModel:
    """Moment estimate: mean within-subject pair product over mean square."""
    pair_sum = 0.0
    pair_count = 0
    sq_sum = 0.0
    sq_count = 0
    for pe_i in transformed:
        m = pe_i.size
        sq_sum += float(pe_i @ pe_i)
        sq_count += m
        if m >= 2:
            tot = pe_i.sum()
            pair_sum += 0.5 * (tot * tot - pe_i @ pe_i)
            pair_count += m * (m - 1) // 2
    if pair_count == 0:
        raise EstimationError("no subject has two or more observations")
    denom = sq_sum / sq_count
    if denom == 0.0:
        raise DegenerateScaleError("all transformed residuals are zero")
    alpha = (pair_sum / pair_count) / denom
    return CorrelationModel(EXCHANGEABLE, alpha=float(np.clip(alpha, -ALPHA_CLIP, ALPHA_CLIP)))


def estimate_ar1(transformed, time_index) -> CorrelationModel:
    """Moment estimate from lag-1 adjacent pairs (grid distance 1)."""
    pair_sum = 0.0
    pair_count = 0
    sq_sum = 0.0
    sq_count = 0
    for pe_i, t_i in zip(transformed, time_index):
        sq_sum += float(pe_i @ pe_i)
        sq_count += pe_i.size
        adj = np.diff(t_i) == 1
        if np.any(adj):
            pair_sum += float(pe_i[:-1][adj] @ pe_i[1:][adj])
            pair_count += int(adj.sum())
    if pair_count == 0:
        raise EstimationError("no lag-1 adjacent observation pairs")
    denom = sq_sum / sq_count
    if denom == 0.0:
        raise DegenerateScaleError("all transformed residuals are zero")
    alpha = (pair_sum / pair_count) / denom
    return CorrelationModel(AR1, alpha=float(np.clip(alpha, -ALPHA_CLIP, ALPHA_CLIP)))


def build_R_i(model: CorrelationModel, times) -> np.ndarray:
    """Working correlation matrix for one subject's grid positions.

    Always returns a symmetric matrix with smallest eigenvalue >=
    ``MIN_EIGENVALUE``.
    """
    times = np.asarray(times, dtype=int)
    m = times.size
    if model.kind == INDEPENDENCE:
        return np.eye(m)
    if model.kind == EXCHANGEABLE:
        R = np.full((m, m), model.alpha)
        np.fill_diagonal(R, 1.0)
    elif model.kind == AR1:
        lag = np.abs(np.subtract.outer(times, times))
        R = model.alpha ** lag
    else:
        grid = model.grid_matrix
        if np.any(times >= grid.shape[0]) or np.any(times < 0):
            raise EstimationError("subject time index outside the fitted grid")
        R = grid[np.ix_(times, times)]
    return ensure_positive_definite(R)
