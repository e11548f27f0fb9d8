"""Bounded score kernels, their derivatives, and Gaussian reference moments.

The redescending biweight kernel drives the robust estimating function; the
Huber and identity kernels back the comparator methods.  The Gaussian
moments kappa1 = E[psi'(Z)] and kappa2 = E[psi(Z)^2] feed the Fisher-scoring
sensitivity matrix and the asymptotic-efficiency map kappa1^2/kappa2 used to
pick the robustness constant.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.integrate import simpson

IDENTITY = "identity"
HUBER = "huber"
TUKEY = "tukey"

#: Huber corner giving ~95% Gaussian efficiency.
DEFAULT_HUBER_C = 1.345
#: Biweight rejection point giving ~95% Gaussian efficiency.
TUKEY_95 = 4.685
#: Biweight rejection point giving ~99% Gaussian efficiency; recommended
#: single-constant shortcut for large problems.
TUKEY_99 = 7.0414

_EFFICIENCY_TARGETS = (0.70, 0.75, 0.80, 0.85, 0.90, 0.95)
#: Nodes per smooth piece of the composite Simpson rule.
_SIMPSON_NODES = 4001


@dataclass(frozen=True)
class ScoreFunction:
    """A score kernel psi with its tuning constant.

    ``kind`` is one of "identity", "huber", "tukey".  ``constant`` is the
    Huber corner c or the biweight rejection point b; it must be positive
    and is ignored for the identity kernel.
    """

    kind: str
    constant: float = 0.0

    def __post_init__(self):
        if self.kind not in (IDENTITY, HUBER, TUKEY):
            raise ValueError(f"unknown score kind {self.kind!r}")
        if self.kind != IDENTITY and not self.constant > 0:
            raise ValueError(f"{self.kind} score requires a positive constant")

    @classmethod
    def identity(cls) -> "ScoreFunction":
        return cls(IDENTITY)

    @classmethod
    def huber(cls, c: float = DEFAULT_HUBER_C) -> "ScoreFunction":
        return cls(HUBER, c)

    @classmethod
    def tukey(cls, b: float = TUKEY_95) -> "ScoreFunction":
        return cls(TUKEY, b)


@dataclass(frozen=True)
class GaussianMoments:
    """Standard-normal moments of a score kernel.

    kappa1 = E[psi'(Z)], kappa2 = E[psi(Z)^2], efficiency = kappa1^2/kappa2.
    Efficiency is 1 exactly for the identity kernel and below 1 otherwise.
    """

    kappa1: float
    kappa2: float
    efficiency: float


def psi(score: ScoreFunction, u):
    """Evaluate the score kernel elementwise.

    Identity returns u; Huber clamps to [-c, c]; the biweight returns
    u*(1 - (u/b)^2)^2 inside |u| <= b and 0 beyond.
    """
    scalar = np.isscalar(u)
    u = np.asarray(u, dtype=float)
    if score.kind == IDENTITY:
        out = u.copy()
    elif score.kind == HUBER:
        c = score.constant
        out = np.clip(u, -c, c)
    else:
        b = score.constant
        t = (u / b) ** 2
        out = np.where(np.abs(u) <= b, u * (1.0 - t) ** 2, 0.0)
    return float(out) if scalar else out


def psi_prime(score: ScoreFunction, u):
    """Derivative of the score kernel.

    The Huber derivative at the corner |u| = c is defined as 0; the set has
    measure zero and does not affect any expectation.
    """
    scalar = np.isscalar(u)
    u = np.asarray(u, dtype=float)
    if score.kind == IDENTITY:
        out = np.ones_like(u)
    elif score.kind == HUBER:
        out = np.where(np.abs(u) < score.constant, 1.0, 0.0)
    else:
        b = score.constant
        t = (u / b) ** 2
        out = np.where(np.abs(u) < b, (1.0 - t) * (1.0 - 5.0 * t), 0.0)
    return float(out) if scalar else out


def _normal_pdf(u):
    return np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi)


def _simpson_piece(f, lo, hi, nodes=_SIMPSON_NODES):
    x = np.linspace(lo, hi, nodes)
    return simpson(f(x), x=x)


@lru_cache(maxsize=256)
def gaussian_moments(score: ScoreFunction) -> GaussianMoments:
    """Compute kappa1, kappa2, and efficiency under the standard normal.

    Deterministic composite Simpson quadrature over [-L, L] with
    L = max(8, constant), split at the kernel's non-smooth point |u| =
    constant so each piece is smooth and the absolute error stays below
    1e-10.  The identity kernel has exact moments (1, 1); quadrature with a
    truncated domain would report an efficiency marginally above 1.
    """
    if score.kind == IDENTITY:
        return GaussianMoments(1.0, 1.0, 1.0)
    c = score.constant
    upper = max(8.0, c)
    split = min(c, upper)
    # psi' vanishes beyond |u| = constant for both bounded kernels, so
    # kappa1 only integrates the inner piece.  Integrands are even.
    kappa1 = 2.0 * _simpson_piece(
        lambda x: psi_prime(score, x) * _normal_pdf(x), 0.0, split
    )
    kappa2 = 2.0 * _simpson_piece(
        lambda x: psi(score, x) ** 2 * _normal_pdf(x), 0.0, split
    )
    if score.kind == HUBER and upper > split:
        # Beyond the corner psi^2 is the constant c^2.
        kappa2 += 2.0 * _simpson_piece(
            lambda x: c**2 * _normal_pdf(x), split, upper
        )
    kappa1, kappa2 = float(kappa1), float(kappa2)
    return GaussianMoments(kappa1, kappa2, kappa1**2 / kappa2)


def tukey_efficiency(b: float) -> float:
    """Gaussian efficiency of the biweight kernel with rejection point b."""
    return gaussian_moments(ScoreFunction.tukey(b)).efficiency


@lru_cache(maxsize=64)
def tukey_constant_for_efficiency(target: float, tol: float = 1e-6) -> float:
    """Invert the efficiency map by bisection to ``tol`` on the constant."""
    if not 0.0 < target < 1.0:
        raise ValueError("efficiency target must lie in (0, 1)")
    lo, hi = 0.5, 40.0
    if tukey_efficiency(lo) > target or tukey_efficiency(hi) < target:
        raise ValueError(f"efficiency target {target} outside bracket")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if tukey_efficiency(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def candidate_b_grid(min_efficiency: float) -> list[float]:
    """Candidate biweight constants at the standard efficiency targets.

    Solves efficiency(b) = t for every target t in {0.70, ..., 0.95} with
    t >= min_efficiency.  Returns an ascending list; empty when no target
    qualifies.
    """
    if not 0.0 < min_efficiency < 1.0:
        raise ValueError("min_efficiency must lie in (0, 1)")
    targets = [t for t in _EFFICIENCY_TARGETS if t >= min_efficiency]
    return [tukey_constant_for_efficiency(t) for t in targets]
