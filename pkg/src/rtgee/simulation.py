"""Monte Carlo designs, contamination schemes, and performance metrics.

Replicates draw correlated covariates, exchangeable or AR(1) errors (normal
or heavy-tailed multivariate t with 3 degrees of freedom), optionally add
response and covariate outliers, then tune and fit each configured method.
Seeding is splittable (PCG64 seeded per replicate through a SeedSequence
spawn key) so parallel execution cannot change results.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataset import from_subject_arrays
from .exceptions import EstimationError
from .leverage_weights import LeverageConfig
from .score_kernels import DEFAULT_HUBER_C, ScoreFunction, candidate_b_grid
from .st_solver import FitConfig, initial_estimate
from .tuning import default_lambda_grid, select_lambda

#: Wald half-width multiplier for 95% intervals.
WALD_Z = 1.96
#: A cell whose failure fraction exceeds this is flagged invalid.
MAX_FAILURE_FRACTION = 0.10


@dataclass(frozen=True)
class Contamination:
    """Additive contamination on randomly chosen observation cells.

    ``y_mode`` is "gauss" (adds an independent N(10, 1) draw) or "const"
    (adds the constant 5); ``x_rate`` adds an independent t(3) draw to the
    first covariate.
    """

    y_rate: float = 0.0
    y_mode: str = "gauss"
    x_rate: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.y_rate <= 1.0 and 0.0 <= self.x_rate <= 1.0):
            raise ValueError("contamination rates must lie in [0, 1]")
        if self.y_mode not in ("gauss", "const"):
            raise ValueError("y_mode must be 'gauss' or 'const'")


#: The contamination scenarios exercised by the study designs.
CASES = {
    "case1": Contamination(),
    "case2": Contamination(y_rate=0.20),
    "case3": Contamination(y_rate=0.20, x_rate=0.10),
    "case2p": Contamination(y_rate=0.10),
    "case3p": Contamination(y_rate=0.10, x_rate=0.10),
    "case2pp": Contamination(y_rate=0.10, y_mode="const"),
    "case3pp": Contamination(y_rate=0.10, y_mode="const", x_rate=0.05),
}


@dataclass(frozen=True, eq=False)
class SimScenario:
    """One Monte Carlo cell.

    ``m`` is the fixed cluster size; None draws m_i uniformly from {2..5}
    with subjects occupying the leading grid positions.
    """

    n: int
    p: int
    beta_true: np.ndarray
    m: int | None = 10
    error_dist: str = "t3"
    true_corr: str = "exchangeable"
    alpha: float = 0.7
    covariate_rho: float = 0.5
    contamination: Contamination = Contamination()
    seed: int = 0

    def __post_init__(self):
        if self.error_dist not in ("normal", "t3"):
            raise ValueError("error_dist must be 'normal' or 't3'")
        if self.true_corr not in ("exchangeable", "ar1"):
            raise ValueError("true_corr must be 'exchangeable' or 'ar1'")
        object.__setattr__(self, "beta_true",
                           np.asarray(self.beta_true, dtype=float))
        if self.beta_true.shape != (self.p,):
            raise ValueError("beta_true must have length p")


def diverging_dims(n: int) -> tuple[int, int]:
    """Covariate dimension and signal size for the diverging-p design."""
    p_n = math.floor(4.0 * n ** 0.4) - 5
    s_n = math.floor(p_n / 5)
    return p_n, s_n


def beta_pattern(p: int, s: int) -> np.ndarray:
    """First s coefficients cycle through (0.7, 0.7, -0.4); the rest are 0."""
    beta = np.zeros(p)
    cycle = [0.7, 0.7, -0.4]
    for j in range(s):
        beta[j] = cycle[j % 3]
    return beta


def design_small_p(case: str = "case1", error: str = "t3", n: int = 100,
                   p: int = 20, m: int = 10, seed: int = 0,
                   true_corr: str = "exchangeable") -> SimScenario:
    """n > p design: fixed cluster size, three nonzero coefficients."""
    return SimScenario(n=n, p=p, beta_true=beta_pattern(p, 3), m=m,
                       error_dist=error, true_corr=true_corr,
                       contamination=CASES[case], seed=seed)


def design_diverging_p(case: str = "case1", error: str = "t3", n: int = 200,
                       seed: int = 0, true_corr: str = "exchangeable") -> SimScenario:
    """Diverging-p design with unbalanced cluster sizes in {2..5}."""
    p_n, s_n = diverging_dims(n)
    return SimScenario(n=n, p=p_n, beta_true=beta_pattern(p_n, s_n), m=None,
                       error_dist=error, true_corr=true_corr,
                       contamination=CASES[case], seed=seed)


def design_large_p(case: str = "case1", error: str = "t3", n: int = 100,
                   p: int = 300, m: int = 10, seed: int = 0,
                   true_corr: str = "exchangeable") -> SimScenario:
    """p > n design: three nonzero coefficients among many."""
    return SimScenario(n=n, p=p, beta_true=beta_pattern(p, 3), m=m,
                       error_dist=error, true_corr=true_corr,
                       contamination=CASES[case], seed=seed)


def replicate_rng(seed: int, rep: int) -> np.random.Generator:
    """Independent, reproducible stream for one replicate (PCG64)."""
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(rep,)))
    )


def gen_covariates(n_rows: int, p: int, rho: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Rows drawn from N(0, Sigma) with Sigma[k, l] = rho^|k-l|."""
    cov = rho ** np.abs(np.subtract.outer(np.arange(p), np.arange(p)))
    L = np.linalg.cholesky(cov)
    return rng.standard_normal((n_rows, p)) @ L.T


def _correlation_matrix(kind: str, alpha: float, m: int) -> np.ndarray:
    if kind == "exchangeable":
        R = np.full((m, m), alpha)
        np.fill_diagonal(R, 1.0)
        return R
    lag = np.abs(np.subtract.outer(np.arange(m), np.arange(m)))
    return alpha ** lag


def gen_errors(m_list, dist: str, corr: str, alpha: float,
               rng: np.random.Generator) -> list:
    """Per-subject error vectors with the requested scale-matrix structure.

    Multivariate t(3) vectors are built as correlated normals divided by
    sqrt(chi2_3 / 3), one mixing draw per subject.
    """
    m_list = np.asarray(m_list, dtype=int)
    chol = {m: np.linalg.cholesky(_correlation_matrix(corr, alpha, m))
            for m in sorted(set(m_list.tolist()))}
    out = [None] * len(m_list)
    for m in sorted(chol):
        idx = np.flatnonzero(m_list == m)
        z = rng.standard_normal((idx.size, m)) @ chol[m].T
        if dist == "t3":
            w = rng.chisquare(3.0, size=idx.size) / 3.0
            z = z / np.sqrt(w)[:, None]
        for row, i in enumerate(idx):
            out[i] = z[row]
    return out


def contaminate(y_rows: np.ndarray, X_rows: np.ndarray, spec: Contamination,
                rng: np.random.Generator):
    """Contaminated copies of the stacked responses and covariates.

    Cells are chosen uniformly without replacement at each stated rate
    (responses first, then covariates); contamination always adds to the
    clean value.
    """
    y_out = y_rows.copy()
    X_out = X_rows.copy()
    n_cells = y_rows.size
    k_y = int(round(spec.y_rate * n_cells))
    if k_y:
        sel = rng.choice(n_cells, size=k_y, replace=False)
        if spec.y_mode == "gauss":
            y_out[sel] += rng.normal(10.0, 1.0, size=k_y)
        else:
            y_out[sel] += 5.0
    k_x = int(round(spec.x_rate * n_cells))
    if k_x:
        sel = rng.choice(n_cells, size=k_x, replace=False)
        X_out[sel, 0] += rng.standard_t(3.0, size=k_x)
    return y_out, X_out


def make_replicate(scenario: SimScenario, rep: int):
    """Dataset for one replicate plus the clean design and true means."""
    rng = replicate_rng(scenario.seed, rep)
    n = scenario.n
    if scenario.m is None:
        m_list = rng.integers(2, 6, size=n)
    else:
        m_list = np.full(n, scenario.m)
    n_rows = int(m_list.sum())
    X_clean = gen_covariates(n_rows, scenario.p, scenario.covariate_rho, rng)
    eps = gen_errors(m_list, scenario.error_dist, scenario.true_corr,
                     scenario.alpha, rng)
    mu_clean = X_clean @ scenario.beta_true
    y_clean = mu_clean + np.concatenate(eps)
    y_cont, X_cont = contaminate(y_clean, X_clean, scenario.contamination, rng)

    offsets = np.concatenate([[0], np.cumsum(m_list)])
    y_subj = [y_cont[offsets[i]:offsets[i + 1]] for i in range(n)]
    X_subj = [X_cont[offsets[i]:offsets[i + 1]] for i in range(n)]
    times = [np.arange(m) for m in m_list]
    grid = list(range(int(m_list.max())))
    data = from_subject_arrays(y_subj, X_subj, time_index=times,
                               time_values=grid)
    return data, X_clean, mu_clean


@dataclass(frozen=True)
class MethodSpec:
    """A (score, working correlation) combination to benchmark.

    For the biweight score, ``constant`` fixes b (no search) while
    ``b_candidates`` requests the covariance-determinant search; leaving
    both unset searches the default efficiency-target grid.
    """

    name: str
    score_kind: str
    correlation: str
    constant: float | None = None
    b_candidates: tuple | None = None
    leverage: bool = False


def method_sgee(correlation: str = "unstructured") -> MethodSpec:
    return MethodSpec("sgee", "identity", correlation)


def method_rsgee(correlation: str = "unstructured",
                 c: float = DEFAULT_HUBER_C) -> MethodSpec:
    return MethodSpec("rsgee", "huber", correlation, constant=c)


def method_rtgee(correlation: str = "unstructured", b: float | None = None,
                 b_candidates=None) -> MethodSpec:
    if b_candidates is not None:
        b_candidates = tuple(float(v) for v in b_candidates)
    return MethodSpec("rtgee", "tukey", correlation, constant=b,
                      b_candidates=b_candidates, leverage=True)


def _method_setup(spec: MethodSpec, b_min_efficiency: float):
    """FitConfig plus the b-candidate list (None disables the search)."""
    leverage = LeverageConfig() if spec.leverage else None
    if spec.score_kind == "identity":
        return FitConfig(score=ScoreFunction.identity(),
                         correlation=spec.correlation, leverage=leverage), None
    if spec.score_kind == "huber":
        c = spec.constant if spec.constant is not None else DEFAULT_HUBER_C
        return FitConfig(score=ScoreFunction.huber(c),
                         correlation=spec.correlation, leverage=leverage), None
    if spec.constant is not None:
        return FitConfig(score=ScoreFunction.tukey(spec.constant),
                         correlation=spec.correlation, leverage=leverage), None
    cands = (list(spec.b_candidates) if spec.b_candidates is not None
             else candidate_b_grid(b_min_efficiency))
    return FitConfig(score=ScoreFunction.tukey(cands[-1]),
                     correlation=spec.correlation, leverage=leverage), cands


def run_replicate(scenario: SimScenario, methods, rep: int,
                  lambda_count: int = 30,
                  b_min_efficiency: float = 0.70) -> dict:
    """Generate, tune, and fit one replicate for every method."""
    data, X_clean, mu_clean = make_replicate(scenario, rep)
    beta0 = initial_estimate(data)
    grid = default_lambda_grid(tau=1.0, beta0=beta0, count=lambda_count)
    records = {}
    for spec in methods:
        config, b_cands = _method_setup(spec, b_min_efficiency)
        rec = {"replicate": rep, "method": spec.name,
               "correlation": spec.correlation, "converged": False}
        try:
            tuned = select_lambda(data, grid, b_cands, config, beta0=beta0)
        except EstimationError as exc:
            rec["error"] = str(exc)
            records[spec.name] = rec
            continue
        fit = tuned.best_fit
        mspe = float(np.sum((X_clean @ (fit.beta - scenario.beta_true)) ** 2)
                     / X_clean.shape[0])
        rec.update(
            converged=True,
            beta_hat=fit.beta,
            se=fit.standard_errors,
            active=fit.active_set.tolist(),
            lambda_opt=float(tuned.lambda_opt),
            b_opt=None if tuned.b_opt is None else float(tuned.b_opt),
            iterations=fit.iterations,
            mspe=mspe,
            path=[(e.lam, e.b_opt, e.rpwd, e.df, e.converged)
                  for e in tuned.path],
        )
        records[spec.name] = rec
    return records


@dataclass
class SimMetrics:
    """Aggregated cell metrics (non-converged replicates excluded)."""

    c_zeros: float
    ic_nonzeros: float
    cf: float
    bias: np.ndarray
    sd: np.ndarray
    ci_coverage: np.ndarray
    amspe: float
    mmspe: float
    amse: float
    relative_efficiency: float | None
    nonconverged: int
    replicates_used: int
    valid: bool


def _aggregate(records: list, scenario: SimScenario) -> SimMetrics:
    p = scenario.p
    true_nonzero = scenario.beta_true != 0.0
    ok = [r for r in records if r["converged"]]
    nonconverged = len(records) - len(ok)
    if not ok:
        raise EstimationError("every replicate failed to converge")
    betas = np.stack([r["beta_hat"] for r in ok])
    ses = np.stack([r["se"] for r in ok])
    active = np.zeros((len(ok), p), dtype=bool)
    for row, r in enumerate(ok):
        active[row, r["active"]] = True
    c_zeros = float(np.mean(np.sum(~active[:, ~true_nonzero], axis=1)))
    ic_nonzeros = float(np.mean(np.sum(~active[:, true_nonzero], axis=1)))
    cf = float(np.mean(np.all(active == true_nonzero, axis=1)))
    bias = betas.mean(axis=0) - scenario.beta_true
    sd = betas.std(axis=0, ddof=1) if len(ok) > 1 else np.zeros(p)
    cover = np.abs(betas - scenario.beta_true) <= WALD_Z * ses
    mspe = np.array([r["mspe"] for r in ok])
    amse = float(np.mean(np.sum((betas - scenario.beta_true) ** 2, axis=1)))
    return SimMetrics(
        c_zeros=c_zeros,
        ic_nonzeros=ic_nonzeros,
        cf=cf,
        bias=bias,
        sd=sd,
        ci_coverage=cover.mean(axis=0),
        amspe=float(np.mean(mspe)),
        mmspe=float(np.median(mspe)),
        amse=amse,
        relative_efficiency=None,
        nonconverged=nonconverged,
        replicates_used=len(ok),
        valid=nonconverged <= MAX_FAILURE_FRACTION * len(records),
    )


def _replicate_task(args):
    scenario, methods, rep, lambda_count, b_min_efficiency = args
    return rep, run_replicate(scenario, methods, rep,
                              lambda_count=lambda_count,
                              b_min_efficiency=b_min_efficiency)


def run_cell(scenario: SimScenario, methods, replicates: int,
             lambda_count: int = 30, b_min_efficiency: float = 0.70,
             workers: int = 1):
    """Run a Monte Carlo cell and aggregate per-method metrics.

    Returns (metrics_by_method, per_replicate_records).  Aggregation is by
    replicate index, so worker count never changes the result.
    """
    tasks = [(scenario, methods, rep, lambda_count, b_min_efficiency)
             for rep in range(replicates)]
    results = [None] * replicates
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rep, recs in pool.map(_replicate_task, tasks, chunksize=1):
                results[rep] = recs
    else:
        for task in tasks:
            rep, recs = _replicate_task(task)
            results[rep] = recs

    metrics = {}
    for spec in methods:
        metrics[spec.name] = _aggregate([r[spec.name] for r in results],
                                        scenario)
    # Relative efficiency against the non-robust reference with the same
    # working correlation, when present.
    for spec in methods:
        ref = next((m for m in methods if m.score_kind == "identity"
                    and m.correlation == spec.correlation), None)
        if ref is not None:
            metrics[spec.name].relative_efficiency = (
                metrics[ref.name].amse / metrics[spec.name].amse
            )
    return metrics, results
