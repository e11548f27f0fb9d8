"""Two-level tuning of the robustness constant and the threshold level.

For each threshold level the biweight constant is picked by minimizing the
determinant of the sandwich covariance on the selected coordinates; the
threshold level itself is picked by a penalized weighted-deviance criterion
with a log(n) model-size penalty.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import EstimationError
from .score_kernels import TUKEY, ScoreFunction, candidate_b_grid
from .st_solver import (
    FitConfig,
    FitResult,
    assemble_components,
    compute_row_weights,
    initial_estimate,
    solve,
)


@dataclass
class PathEntry:
    """One evaluated threshold level."""

    lam: float
    b_opt: float | None
    rpwd: float
    df: int
    converged: bool


@dataclass
class TuningResult:
    lambda_opt: float
    b_opt: float | None
    path: list = field(default_factory=list)
    fits: dict = field(default_factory=dict)
    best_fit: FitResult | None = None


def default_lambda_grid(data=None, tau: float = 1.0, beta0=None,
                        count: int = 30) -> np.ndarray:
    """Data-driven threshold grid.

    ``count`` log-spaced values from lam_max * 1e-4 up to lam_max, the
    smallest level that shrinks every coordinate of the initial estimator,
    prepended with 0.
    """
    if beta0 is None:
        if data is None:
            raise ValueError("need either data or an initial estimate")
        beta0 = initial_estimate(data)
    beta0 = np.asarray(beta0, dtype=float)
    lam_max = float(np.max(np.abs(beta0) ** (1.0 + tau)))
    if lam_max == 0.0:
        return np.array([0.0])
    grid = np.geomspace(lam_max * 1e-4, lam_max, count)
    return np.concatenate([[0.0], grid])


def _active_determinant(fit: FitResult) -> float:
    A = fit.active_set
    if A.size == 0:
        # det of an empty matrix: all-empty candidates tie, smaller b wins.
        return 1.0
    return float(np.linalg.det(fit.covariance[np.ix_(A, A)]))


def select_b(data, lam: float, candidates, config: FitConfig, beta0=None,
             precomputed_weights=None):
    """Fit every candidate constant and keep the covariance-determinant
    minimizer; ties break toward the smaller (more robust) constant."""
    candidates = sorted(float(b) for b in candidates)
    if not candidates:
        raise ValueError("candidate list for b is empty")
    if config.score.kind != TUKEY:
        raise ValueError("b selection applies to the biweight score")
    best = None
    for b in candidates:
        cfg = replace(config, lam=lam, score=ScoreFunction.tukey(b))
        fit = solve(data, cfg, beta0=beta0, precomputed_weights=precomputed_weights)
        if not fit.converged:
            continue
        det = _active_determinant(fit)
        if best is None or det < best[0]:
            best = (det, b, fit)
    if best is None:
        raise EstimationError(f"no candidate b converged at lam={lam}")
    return best[1], best[2]


def rpwd(data, fit: FitResult, precomputed_weights=None) -> float:
    """Penalized weighted deviance of a fitted model.

    Sum over subjects of h_i' R_i^{-1} h_i at the fitted coefficients (using
    the fit's own score constant, scale, and working correlation) plus
    df * log(n) with df the number of unshrunk coordinates.
    """
    if precomputed_weights is None:
        precomputed_weights = compute_row_weights(data, fit.config.leverage)
    comps = assemble_components(
        data, fit.beta, fit.phi, fit.correlation, fit.config.score,
        precomputed_weights, columns=np.empty(0, dtype=int),
    )
    deviance = 0.0
    for h, R in zip(comps.h, comps.R):
        Rinv_h = np.linalg.solve(R, h[..., None])[..., 0]
        deviance += float(np.sum(h * Rinv_h))
    df = int(np.sum(fit.delta != 1.0))
    return deviance + df * np.log(data.n)


def select_lambda(data, lambda_grid, b_candidates, config: FitConfig,
                  beta0=None) -> TuningResult:
    """Tune the threshold level (and, for the biweight, the constant).

    Non-converged grid cells are recorded on the path and never selected.
    """
    lambda_grid = [float(v) for v in np.atleast_1d(lambda_grid)]
    if not lambda_grid:
        raise ValueError("lambda grid is empty")
    tune_b = config.score.kind == TUKEY and b_candidates is not None
    if tune_b and len(list(b_candidates)) == 0:
        raise ValueError("candidate list for b is empty")
    if beta0 is None:
        beta0 = initial_estimate(data)
    weights = compute_row_weights(data, config.leverage)

    result = TuningResult(lambda_opt=np.nan, b_opt=None)
    best_crit = np.inf
    for lam in lambda_grid:
        try:
            if tune_b:
                b_opt, fit = select_b(
                    data, lam, b_candidates, config, beta0=beta0,
                    precomputed_weights=weights,
                )
            else:
                fit = solve(
                    data, replace(config, lam=lam), beta0=beta0,
                    precomputed_weights=weights,
                )
                b_opt = config.score.constant if config.score.kind == TUKEY else None
        except EstimationError:
            result.path.append(PathEntry(lam, None, np.nan, 0, False))
            continue
        if not fit.converged:
            result.path.append(PathEntry(lam, b_opt, np.nan, 0, False))
            continue
        crit = rpwd(data, fit, precomputed_weights=weights)
        df = int(fit.active_set.size)
        result.path.append(PathEntry(lam, b_opt, crit, df, True))
        result.fits[lam] = fit
        if crit < best_crit:
            best_crit = crit
            result.lambda_opt = lam
            result.b_opt = b_opt
            result.best_fit = fit
    if result.best_fit is None:
        raise EstimationError("no grid cell produced a converged fit")
    return result


def tune(data, config: FitConfig, lambda_grid=None, b_candidates=None,
         b_min_efficiency: float = 0.70, lambda_count: int = 30,
         beta0=None) -> TuningResult:
    """Convenience wrapper: data-driven grids, then :func:`select_lambda`."""
    if beta0 is None:
        beta0 = initial_estimate(data)
    if lambda_grid is None:
        lambda_grid = default_lambda_grid(tau=config.tau, beta0=beta0,
                                          count=lambda_count)
    if b_candidates is None and config.score.kind == TUKEY:
        b_candidates = candidate_b_grid(b_min_efficiency)
    return select_lambda(data, lambda_grid, b_candidates, config, beta0=beta0)
