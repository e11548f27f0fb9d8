"""Smooth-threshold Fisher-scoring solver.

Implements the robust weighted estimating function, the threshold diagonal
that pins small coefficients to exact zero, the Fisher-scoring update on the
surviving coordinates, and the sandwich covariance of the estimator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import EstimationError
from .leverage_weights import (
    LeverageConfig,
    chi_square_quantile,
    robust_location_scale,
    row_weights,
)
from .residuals_scale import mad_phi, pearson_residuals
from .score_kernels import (
    ScoreFunction,
    gaussian_moments,
    psi,
    psi_prime,
    tukey_constant_for_efficiency,
)
from .working_correlation import (
    INDEPENDENCE,
    KINDS,
    CorrelationModel,
    build_R_i,
    estimate_ar1,
    estimate_exchangeable,
    estimate_unstructured,
    independence,
    robust_residual_transform,
)

#: Ridge added to the normal equations of the initial estimator; mandatory
#: when the covariate dimension reaches the number of stacked rows.
INITIAL_RIDGE = 1e-4
#: Ridge retried once when the inner Newton system is exactly singular.
INNER_RIDGE = 1e-8


@dataclass(frozen=True)
class FitConfig:
    """Solver configuration.

    ``lam`` is the threshold level (0 disables selection), ``tau`` the
    threshold exponent offset.  ``leverage`` of None disables covariate
    downweighting.
    """

    lam: float = 0.0
    tau: float = 1.0
    score: ScoreFunction = ScoreFunction.tukey()
    correlation: str = "unstructured"
    leverage: LeverageConfig | None = LeverageConfig()
    epsilon: float = 1e-8
    max_iter: int = 100

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.correlation not in KINDS:
            raise ValueError(f"unknown correlation kind {self.correlation!r}")
        if self.epsilon <= 0 or self.max_iter < 1:
            raise ValueError("epsilon must be positive and max_iter >= 1")


@dataclass
class FitResult:
    """Outcome of one solve.

    Coordinates outside ``active_set`` are exactly zero, and the covariance
    has structurally zero rows and columns there.  ``converged`` reports the
    stopping rule honestly; non-convergence is an outcome, not an error.
    """

    beta: np.ndarray
    delta: np.ndarray
    active_set: np.ndarray
    phi: float
    correlation: CorrelationModel
    covariance: np.ndarray
    iterations: int
    converged: bool
    config: FitConfig
    beta0: np.ndarray

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))


@dataclass
class EEComponents:
    """Estimating-equation building blocks, stacked by subject group.

    Under the identity link the per-subject derivative D_i is the covariate
    block itself, V_i = R_i * sqrt(phi), and h_i = W_i psi(e_i); the
    centering term is exactly zero because the score is odd and the
    reference residual distribution is symmetric.  ``gamma`` holds the
    diagonal of the expected derivative of h_i with respect to the mean,
    -kappa1 / sqrt(phi) * w_ij.
    """

    groups: list
    X_cols: list
    h: list
    gamma: list
    weights: list
    R: list
    phi: float
    kappa1: float
    columns: np.ndarray
    _subject_map: dict = field(default_factory=dict)

    def estimating_function(self) -> np.ndarray:
        """U = sum_i D_i' V_i^{-1} h_i restricted to the selected columns."""
        q = self.columns.size
        U = np.zeros(q)
        root = np.sqrt(self.phi)
        for Xc, h, R in zip(self.X_cols, self.h, self.R):
            Rinv_h = np.linalg.solve(R, h[..., None])[..., 0]
            U += np.einsum("nmp,nm->p", Xc, Rinv_h) / root
        return U

    def sensitivity(self) -> np.ndarray:
        """Bread matrix sum_i D_i' V_i^{-1} Gamma_i D_i (negative definite
        in the well-posed case)."""
        q = self.columns.size
        S = np.zeros((q, q))
        root = np.sqrt(self.phi)
        for Xc, gam, R in zip(self.X_cols, self.gamma, self.R):
            GX = gam[..., None] * Xc
            RinvGX = np.linalg.solve(R, GX)
            S += np.einsum("nmp,nmq->pq", Xc, RinvGX) / root
        return S

    def meat(self) -> np.ndarray:
        """Outer-product matrix sum_i D_i' V_i^{-1} h_i h_i' V_i^{-1} D_i."""
        q = self.columns.size
        H = np.zeros((q, q))
        root = np.sqrt(self.phi)
        for Xc, h, R in zip(self.X_cols, self.h, self.R):
            Rinv_h = np.linalg.solve(R, h[..., None])[..., 0]
            T = np.einsum("nmp,nm->np", Xc, Rinv_h) / root
            H += T.T @ T
        return H

    def subject(self, i: int) -> dict:
        """Per-subject pieces (for diagnostics and tests)."""
        g, r = self._subject_map[i]
        return {
            "D": self.X_cols[g][r],
            "h": self.h[g][r],
            "gamma_diag": self.gamma[g][r],
            "weights": self.weights[g][r],
            "R": self.R[g],
        }


def h_mu_derivative(score: ScoreFunction, e, weights, phi: float):
    """Exact per-observation derivative of h with respect to the mean.

    Gamma_i replaces psi'(e) by its Gaussian expectation kappa1.
    """
    return -np.asarray(weights, dtype=float) * psi_prime(score, e) / np.sqrt(phi)


def _weights_per_group(data, w_flat):
    if w_flat is None:
        return [np.ones_like(g.y) for g in data.groups]
    offsets = np.concatenate([[0], np.cumsum(data.m)])
    out = []
    for g in data.groups:
        m = len(g.times)
        out.append(
            np.stack([w_flat[offsets[i]:offsets[i] + m] for i in g.subject_idx])
        )
    return out


def assemble_components(data, beta, phi: float, correlation: CorrelationModel,
                        score: ScoreFunction, weights=None,
                        columns=None) -> EEComponents:
    """Build the estimating-equation components at the given state.

    ``weights`` is a flat per-observation vector in dataset row order (None
    for unit weights); ``columns`` restricts the derivative blocks to the
    given coefficient indices (None keeps all).
    """
    beta = np.asarray(beta, dtype=float)
    if columns is None:
        columns = np.arange(data.p)
    else:
        columns = np.asarray(columns, dtype=int)
    kappa1 = gaussian_moments(score).kappa1
    w_groups = _weights_per_group(data, weights)
    root = np.sqrt(phi)
    X_cols, h_list, gamma_list, R_list = [], [], [], []
    subject_map = {}
    for g_idx, (group, w2) in enumerate(zip(data.groups, w_groups)):
        eta = group.y - group.X @ beta
        e = eta / root
        pe = psi(score, e)
        h_list.append(w2 * pe)
        gamma_list.append(-(kappa1 / root) * w2)
        X_cols.append(group.X[:, :, columns])
        R_list.append(build_R_i(correlation, group.times))
        for r, i in enumerate(group.subject_idx):
            subject_map[int(i)] = (g_idx, r)
    return EEComponents(
        groups=data.groups,
        X_cols=X_cols,
        h=h_list,
        gamma=gamma_list,
        weights=w_groups,
        R=R_list,
        phi=phi,
        kappa1=kappa1,
        columns=columns,
        _subject_map=subject_map,
    )


def initial_estimate(data, ridge: float = INITIAL_RIDGE, max_iter: int = 50) -> np.ndarray:
    """Ridge-stabilized iteratively reweighted least squares start.

    Independence working correlation with biweight weights at 85% Gaussian
    efficiency; the ridge keeps the normal equations well-posed when the
    covariate dimension exceeds the number of subjects.  Deterministic.
    """
    X, y = data.stacked
    p = X.shape[1]
    eye = np.eye(p)
    try:
        beta = np.linalg.solve(X.T @ X + ridge * eye, X.T @ y)
    except np.linalg.LinAlgError as exc:
        raise EstimationError("initial normal equations singular after ridge") from exc
    b = tukey_constant_for_efficiency(0.85)
    for _ in range(max_iter):
        r = y - X @ beta
        med = np.median(r)
        s = 1.4826 * np.median(np.abs(r - med))
        if s == 0.0:
            break
        u = r / s
        t = (u / b) ** 2
        w = np.where(np.abs(u) < b, (1.0 - t) ** 2, 0.0)
        Xw = X * w[:, None]
        try:
            beta_new = np.linalg.solve(Xw.T @ X + ridge * eye, Xw.T @ y)
        except np.linalg.LinAlgError as exc:
            raise EstimationError("weighted normal equations singular after ridge") from exc
        if float(np.sum((beta_new - beta) ** 2)) < 1e-12:
            beta = beta_new
            break
        beta = beta_new
    return beta


def compute_delta(beta0, lam: float, tau: float = 1.0) -> np.ndarray:
    """Threshold diagonal min{1, lam / |beta0_j|^(1+tau)}.

    Coordinates with beta0_j = 0 get delta_j = 1 (the limiting value), so
    they are pinned to zero.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    beta0 = np.asarray(beta0, dtype=float)
    delta = np.ones_like(beta0)
    nz = beta0 != 0.0
    delta[nz] = np.minimum(1.0, lam / np.abs(beta0[nz]) ** (1.0 + tau))
    return delta


def _solve_linear(J, rhs):
    try:
        step = np.linalg.solve(J, rhs)
        if np.all(np.isfinite(step)):
            return step
    except np.linalg.LinAlgError:
        pass
    # J is negative definite in the well-posed case, so subtracting the
    # ridge strengthens definiteness; the opposite sign is the fallback.
    eye = np.eye(J.shape[0])
    for shift in (-INNER_RIDGE, INNER_RIDGE):
        try:
            step = np.linalg.solve(J + shift * eye, rhs)
            if np.all(np.isfinite(step)):
                return step
        except np.linalg.LinAlgError:
            continue
    raise EstimationError("inner Newton system singular even after ridge retry")


def compute_row_weights(data, leverage: LeverageConfig | None):
    """Per-observation leverage weights (flat, dataset row order)."""
    if leverage is None:
        return None
    X, _ = data.stacked
    ls = robust_location_scale(X)
    b0 = chi_square_quantile(data.p, leverage.quantile)
    return row_weights(X, ls, leverage, b0)


def _step2_state(data, beta, config):
    """Scale, transformed residuals, and working correlation at ``beta``."""
    resid = pearson_residuals(data, beta, 1.0)
    phi = mad_phi(resid.eta_flat())
    root = np.sqrt(phi)
    resid.e = [eta_i / root for eta_i in resid.eta]
    transformed = robust_residual_transform(resid, config.score)
    kind = config.correlation
    if kind == INDEPENDENCE:
        model = independence()
    elif kind == "exchangeable":
        model = estimate_exchangeable(transformed)
    elif kind == "ar1":
        model = estimate_ar1(transformed, data.time_index)
    else:
        model = estimate_unstructured(
            transformed, data.time_index, data.n_times, data.n
        )
    return phi, model


def solve(data, config: FitConfig, beta0=None, precomputed_weights=None) -> FitResult:
    """Run the full smooth-threshold fit.

    The threshold diagonal is computed once from the initial estimator and
    held fixed; the scale and working correlation are refreshed from the
    current iterate every pass.  Returns a result with ``converged=False``
    rather than raising when the iteration cap is hit.
    """
    p = data.p
    if beta0 is None:
        beta0 = initial_estimate(data)
    beta0 = np.asarray(beta0, dtype=float)
    delta = compute_delta(beta0, config.lam, config.tau)
    active = np.flatnonzero(delta < 1.0)
    if precomputed_weights is None:
        w_flat = compute_row_weights(data, config.leverage)
    else:
        w_flat = precomputed_weights

    beta = np.where(delta < 1.0, beta0, 0.0)
    iterations = 0
    converged = False
    phi, corr_model = _step2_state(data, beta, config)

    if active.size == 0:
        converged = True
    else:
        g = delta[active] / (1.0 - delta[active])
        for k in range(1, config.max_iter + 1):
            comps = assemble_components(
                data, beta, phi, corr_model, config.score, w_flat, columns=active
            )
            U = comps.estimating_function()
            S = comps.sensitivity()
            J = S + np.diag(g)
            rhs = U + g * beta[active]
            step = _solve_linear(J, rhs)
            beta_new = beta.copy()
            beta_new[active] -= step
            iterations = k
            done = float(np.sum((beta_new - beta) ** 2)) < config.epsilon
            beta = beta_new
            if done:
                converged = True
                break
            phi, corr_model = _step2_state(data, beta, config)

    result = FitResult(
        beta=beta,
        delta=delta,
        active_set=active,
        phi=phi,
        correlation=corr_model,
        covariance=np.zeros((p, p)),
        iterations=iterations,
        converged=converged,
        config=config,
        beta0=beta0,
    )
    if converged and active.size:
        result.covariance = sandwich_covariance(data, result, row_weights_flat=w_flat)
    return result


def sandwich_covariance(data, fit: FitResult, row_weights_flat=None) -> np.ndarray:
    """Robust covariance bread^-1 meat bread^-T of the fitted coefficients.

    Rows and columns outside the active set are structurally zero.  The
    transpose on the trailing inverse makes the result symmetric positive
    semidefinite even when leverage weights make the bread nonsymmetric; the
    two forms coincide for unit weights.
    """
    if not fit.converged:
        raise EstimationError("covariance requires a converged fit")
    p = data.p
    cov = np.zeros((p, p))
    A = fit.active_set
    if A.size == 0:
        return cov
    if row_weights_flat is None:
        row_weights_flat = compute_row_weights(data, fit.config.leverage)
    comps = assemble_components(
        data, fit.beta, fit.phi, fit.correlation, fit.config.score,
        row_weights_flat, columns=A,
    )
    S = comps.sensitivity()
    H = comps.meat()
    try:
        K = np.linalg.solve(S, H)
        cov_A = np.linalg.solve(S, K.T).T
    except np.linalg.LinAlgError as exc:
        raise EstimationError("bread matrix of the sandwich is singular") from exc
    cov_A = 0.5 * (cov_A + cov_A.T)
    cov[np.ix_(A, A)] = cov_A
    return cov
