"""Pearson residuals and the robust MAD estimate of the dispersion.

Only the identity link with constant variance is implemented; the marginal
model type carries the (link, variance) abstraction so other families can be
added without touching callers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegenerateScaleError

#: Scale constant used in the dispersion estimate, applied exactly as
#: printed in the source formula (the leverage module uses the conventional
#: 1.4826).
MAD_PHI_CONSTANT = 1.483


@dataclass(frozen=True)
class MarginalModel:
    """Mean/variance specification mu = g(x'beta), Var = phi * v(mu)."""

    link: str = "identity"
    variance: str = "constant"

    def __post_init__(self):
        if self.link != "identity" or self.variance != "constant":
            raise NotImplementedError(
                "only the identity link with constant variance is supported"
            )

    def mean(self, linear_predictor):
        return linear_predictor

    def variance_function(self, mu):
        return np.ones_like(np.asarray(mu, dtype=float))


@dataclass
class ResidualSet:
    """Per-subject residuals.

    ``e`` holds the standardized Pearson residuals (y - mu)/sqrt(phi) and
    ``eta`` the residuals scaled by the variance function only, which feed
    the MAD dispersion estimate.
    """

    e: list = field(default_factory=list)
    eta: list = field(default_factory=list)

    def eta_flat(self) -> np.ndarray:
        return np.concatenate(self.eta) if self.eta else np.empty(0)

    def e_flat(self) -> np.ndarray:
        return np.concatenate(self.e) if self.e else np.empty(0)


def pearson_residuals(data, beta, phi: float) -> ResidualSet:
    """Residuals of every subject at the given coefficients and dispersion."""
    if phi <= 0:
        raise ValueError("dispersion phi must be positive")
    beta = np.asarray(beta, dtype=float)
    root = np.sqrt(phi)
    out = ResidualSet()
    for X_i, y_i in zip(data.X, data.y):
        eta_i = y_i - X_i @ beta
        out.eta.append(eta_i)
        out.e.append(eta_i / root)
    return out


def mad_phi(eta) -> float:
    """Squared scaled median-absolute-deviation of the pooled residuals.

    Raises :class:`DegenerateScaleError` when more than half of the
    residuals coincide, since the estimating equations would otherwise
    divide by a zero scale.
    """
    eta = np.asarray(eta, dtype=float).ravel()
    if eta.size < 2:
        raise ValueError("need at least two residuals to estimate the scale")
    med = np.median(eta)
    mad = np.median(np.abs(eta - med))
    if mad == 0.0:
        raise DegenerateScaleError(
            "residual MAD is zero (more than half of the residuals are "
            "identical); the dispersion cannot be estimated"
        )
    return float((MAD_PHI_CONSTANT * mad) ** 2)
