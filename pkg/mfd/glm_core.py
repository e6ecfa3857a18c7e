"""Weighted Poisson GLM (log link) with offsets, fitted by IRLS.

Design construction covers the two working models of the MFD substitution
estimator: the initial full ``X*G*Z`` expansion and the targeting model
(site indicators plus four clever covariates, offset by the initial fit).

Stopping rule: relative deviance change < 1e-8 or max |score| < 1e-8 * n,
at most 100 iterations, with step-halving whenever the deviance would rise.
The linear predictor is clamped to [-30, 30] before exponentiation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy import linalg
from scipy.special import xlogy

from .core.errors import ConvergenceError, EstimationError, PositivityError, log_and_raise
from .core.logging import get_logger
from .trial_data import TrialDataset


log = get_logger(__name__)

ETA_CLAMP = 30.0
MAX_ITER = 100
DEV_TOL = 1e-8
SCORE_TOL = 1e-8
RANK_TOL = 1e-7
MAX_HALVINGS = 30
SEPARATION_TOL = 1e-6

DesignKind = Literal["initial", "targeting", "custom"]


@dataclass(frozen=True)
class DesignMatrix:
    matrix: np.ndarray
    labels: tuple[str, ...]
    weights: np.ndarray
    offset: np.ndarray
    kind: DesignKind = "custom"

    def __post_init__(self) -> None:
        n, p = self.matrix.shape
        if len(self.labels) != p:
            raise ValueError(f"expected {p} column labels, got {len(self.labels)}")
        if len(set(self.labels)) != p:
            raise ValueError("column labels must be unique")
        if self.weights.shape != (n,) or self.offset.shape != (n,):
            raise ValueError("weights and offset must have one entry per row")
        if not (np.all(np.isfinite(self.matrix)) and np.all(np.isfinite(self.offset))):
            raise ValueError("design matrix and offset must be finite")
        if np.any(self.weights <= 0) or not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be positive and finite")

    @classmethod
    def from_columns(
        cls,
        matrix: np.ndarray,
        labels: tuple[str, ...] | list[str],
        weights: np.ndarray | None = None,
        offset: np.ndarray | None = None,
        kind: DesignKind = "custom",
    ) -> "DesignMatrix":
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        n = matrix.shape[0]
        return cls(
            matrix=matrix,
            labels=tuple(labels),
            weights=np.ones(n) if weights is None else np.asarray(weights, dtype=float),
            offset=np.zeros(n) if offset is None else np.asarray(offset, dtype=float),
            kind=kind,
        )

    @property
    def n(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def p(self) -> int:
        return int(self.matrix.shape[1])


@dataclass
class GlmFit:
    """Result of :func:`fit_poisson_glm`.

    ``beta`` has one entry per design column; aliased (dropped) columns carry
    a zero coefficient so full-width design rows can still be predicted.
    ``base`` links a targeting fit to the initial fit supplying its offsets.
    """

    beta: np.ndarray
    labels: tuple[str, ...]
    deviance: float
    converged: bool
    iterations: int
    fisher_information: np.ndarray
    dropped: tuple[str, ...] = ()
    separation: bool = False
    deviance_trace: list[float] = field(default_factory=list)
    kind: DesignKind = "custom"
    base: "GlmFit | None" = None

    @property
    def coef(self) -> dict[str, float]:
        return dict(zip(self.labels, (float(b) for b in self.beta)))

    def require_converged(self) -> None:
        if not self.converged:
            log_and_raise(log, ConvergenceError(f"{self.kind} GLM did not converge after {self.iterations} iterations"))


def _cell_columns(ds: TrialDataset, z: int | None, g: int | None) -> tuple[np.ndarray, np.ndarray]:
    """Observed G and Z, or constant columns at a counterfactual cell."""
    gv = ds.g if g is None else np.full(ds.n, g)
    zv = ds.z if z is None else np.full(ds.n, z)
    return gv.astype(float), zv.astype(float)


def initial_design_rows(ds: TrialDataset, z: int | None = None, g: int | None = None) -> np.ndarray:
    """Rows of the ``X*G*Z`` expansion, optionally at a counterfactual (z, g) cell.

    Column order: 1, x_1..x_d, g, z, x_k*g, x_k*z, g*z, x_k*g*z.
    """
    n = ds.n
    gv, zv = _cell_columns(ds, z, g)
    x = ds.x
    gz = gv * zv
    blocks = [
        np.ones((n, 1)),
        x,
        gv[:, None],
        zv[:, None],
        x * gv[:, None],
        x * zv[:, None],
        gz[:, None],
        x * gz[:, None],
    ]
    return np.hstack(blocks)


def initial_design_labels(ds: TrialDataset) -> tuple[str, ...]:
    xs = list(ds.covariate_names)
    return tuple(
        ["(intercept)"]
        + xs
        + ["g", "z"]
        + [f"{x}:g" for x in xs]
        + [f"{x}:z" for x in xs]
        + ["g:z"]
        + [f"{x}:g:z" for x in xs]
    )


def build_design_initial(ds: TrialDataset) -> DesignMatrix:
    """Step 1 design: full X*G*Z expansion, unit weights, zero offsets (4*(d+1) columns)."""
    return DesignMatrix.from_columns(initial_design_rows(ds), initial_design_labels(ds), kind="initial")


def site_weights(ds: TrialDataset) -> np.ndarray:
    """w = n / I_j per row."""
    return (ds.n / ds.site_sizes)[ds.site]


def _checked_prevalence(ds: TrialDataset) -> np.ndarray:
    prev = ds.site_prevalence
    bad = (prev <= 0.0) | (prev >= 1.0)
    if np.any(bad):
        sites = [ds.site_labels[j] for j in np.flatnonzero(bad)]
        log_and_raise(log, PositivityError(f"prevalence of G is 0 or 1 at sites {sites}"))
    return prev


def clever_covariates(ds: TrialDataset, z: int | None = None, g: int | None = None) -> np.ndarray:
    """Columns w*Z*G/p_g, w*Z*(1-G)/(1-p_g), w*(1-Z)*G/p_g, w*(1-Z)*(1-G)/(1-p_g)."""
    gv, zv = _cell_columns(ds, z, g)
    w = site_weights(ds)
    pg = _checked_prevalence(ds)[ds.site]
    return np.column_stack(
        [
            w * zv * gv / pg,
            w * zv * (1.0 - gv) / (1.0 - pg),
            w * (1.0 - zv) * gv / pg,
            w * (1.0 - zv) * (1.0 - gv) / (1.0 - pg),
        ]
    )


def site_indicators(ds: TrialDataset) -> np.ndarray:
    s = np.zeros((ds.n, ds.n_sites))
    s[np.arange(ds.n), ds.site] = 1.0
    return s


def targeting_design_labels(ds: TrialDataset) -> tuple[str, ...]:
    return tuple(f"site[{label}]" for label in ds.site_labels) + ("h_11", "h_10", "h_01", "h_00")


def build_design_targeting(ds: TrialDataset, fit0: GlmFit) -> DesignMatrix:
    """Step 2 design: offset log mu_hat_0, full site indicator set, four clever covariates."""
    fit0.require_converged()
    offset = linear_predictor(fit0, initial_design_rows(ds))
    matrix = np.hstack([site_indicators(ds), clever_covariates(ds)])
    return DesignMatrix.from_columns(matrix, targeting_design_labels(ds), offset=offset, kind="targeting")


def linear_predictor(fit: GlmFit, rows: np.ndarray, offset: np.ndarray | float = 0.0) -> np.ndarray:
    return np.clip(offset + rows @ fit.beta, -ETA_CLAMP, ETA_CLAMP)


def predict_mean(fit: GlmFit, row: np.ndarray, offset: np.ndarray | float = 0.0) -> np.ndarray | float:
    """exp(offset + row . beta), with the linear predictor clamped to [-30, 30]."""
    row = np.asarray(row, dtype=float)
    mu = np.exp(linear_predictor(fit, row, offset))
    return float(mu) if np.ndim(mu) == 0 else mu


def poisson_deviance(y: np.ndarray, mu: np.ndarray, weights: np.ndarray) -> float:
    return float(2.0 * np.sum(weights * (xlogy(y, y) - xlogy(y, mu) - (y - mu))))


def _aliased_columns(matrix: np.ndarray) -> np.ndarray:
    """Boolean mask of columns linearly dependent on earlier columns (last-in dropping)."""
    n, p = matrix.shape
    aliased = np.zeros(p, dtype=bool)
    norms = np.linalg.norm(matrix, axis=0)
    # Column-scale so the tolerance is relative per column.
    scaled = matrix / np.where(norms > 0, norms, 1.0)
    kept: list[int] = []
    for j in range(p):
        if norms[j] == 0 or len(kept) + 1 > n:
            aliased[j] = True
            continue
        r = np.linalg.qr(scaled[:, kept + [j]], mode="r")
        if abs(r[-1, -1]) <= RANK_TOL:
            aliased[j] = True
        else:
            kept.append(j)
    return aliased


def _irls_step(
    X: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    off: np.ndarray,
    beta: np.ndarray,
    eta: np.ndarray,
    mu: np.ndarray,
    dev_old: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, float, int]:
    working = eta - off + (y - mu) / mu
    sw = np.sqrt(w * mu)
    beta_new, *_ = linalg.lstsq(X * sw[:, None], working * sw, lapack_driver="gelsy")
    eta_new = np.clip(off + X @ beta_new, -ETA_CLAMP, ETA_CLAMP)
    mu_new = np.exp(eta_new)
    dev = poisson_deviance(y, mu_new, w)
    halvings = 0
    while np.isfinite(dev_old) and dev > dev_old and halvings < MAX_HALVINGS:
        beta_new = 0.5 * (beta_new + beta)
        eta_new = np.clip(off + X @ beta_new, -ETA_CLAMP, ETA_CLAMP)
        mu_new = np.exp(eta_new)
        dev = poisson_deviance(y, mu_new, w)
        halvings += 1
    return beta_new, eta_new, mu_new, dev, halvings


def fit_poisson_glm(dm: DesignMatrix, y: np.ndarray, max_iter: int = MAX_ITER) -> GlmFit:
    """Maximize the weighted Poisson log-likelihood by IRLS.

    Weights act as frequency weights on each subject's log-likelihood term.
    Aliased columns are dropped last-in and reported in ``dropped``.
    A non-converged fit is returned with ``converged=False``; callers check.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (dm.n,):
        raise ValueError("outcome length differs from design rows")
    if np.any(y < 0) or not np.all(np.isfinite(y)):
        raise ValueError("Poisson outcome must be nonnegative and finite")

    aliased = _aliased_columns(dm.matrix)
    keep = ~aliased
    X = dm.matrix[:, keep]
    w = dm.weights
    off = dm.offset
    n, p = X.shape
    dropped = tuple(label for label, a in zip(dm.labels, aliased) if a)
    if dropped:
        log.bind(kind=dm.kind, dropped=list(dropped)).info("dropping aliased design columns")

    beta = np.zeros(p)
    mu = y + 0.1
    eta = np.log(mu)
    dev = np.inf
    trace: list[float] = []
    converged = False
    iterations = 0

    for it in range(1, max_iter + 1):
        iterations = it
        beta, eta, mu, dev_new, halvings = _irls_step(X, y, w, off, beta, eta, mu, dev)
        if halvings:
            log.bind(kind=dm.kind, iteration=it).debug("step-halving applied {} times", halvings)
        rel_change = abs(dev_new - dev) / (abs(dev_new) + 0.1) if np.isfinite(dev) else np.inf
        dev = dev_new
        trace.append(dev)
        max_score = float(np.max(np.abs(X.T @ (w * (y - mu))))) if p else 0.0
        if rel_change < DEV_TOL or max_score < SCORE_TOL * n:
            converged = True
            break

    if converged and p:
        # one more Newton step takes the coefficients to machine precision
        beta_p, eta_p, mu_p, dev_p, _ = _irls_step(X, y, w, off, beta, eta, mu, dev)
        if dev_p <= dev:
            beta, eta, mu, dev = beta_p, eta_p, mu_p, dev_p
            trace.append(dev)

    separation = bool(np.any(np.abs(eta) >= ETA_CLAMP) or np.any(mu < SEPARATION_TOL * max(float(np.mean(y)), 1e-12)))
    if separation:
        log.bind(kind=dm.kind).warning("fitted means near 0 or infinity; possible separation")
    if not converged:
        log.bind(kind=dm.kind, iterations=iterations).warning("IRLS did not converge")

    full_beta = np.zeros(dm.p)
    full_beta[keep] = beta
    info = (X * (w * mu)[:, None]).T @ X
    full_info = np.zeros((dm.p, dm.p))
    full_info[np.ix_(keep, keep)] = info

    return GlmFit(
        beta=full_beta,
        labels=dm.labels,
        deviance=float(dev),
        converged=converged,
        iterations=iterations,
        fisher_information=full_info,
        dropped=dropped,
        separation=separation,
        deviance_trace=trace,
        kind=dm.kind,
    )


def fit_initial(ds: TrialDataset) -> GlmFit:
    """Algorithm step 1: Poisson regression of f(Y) on X*G*Z."""
    return fit_poisson_glm(build_design_initial(ds), ds.f_y)


def fit_targeting(ds: TrialDataset, fit0: GlmFit) -> GlmFit:
    """Algorithm step 2: offset + site indicators + clever covariates."""
    dm = build_design_targeting(ds, fit0)
    fit1 = fit_poisson_glm(dm, ds.f_y)
    fit1.base = fit0
    return fit1


def predict_cell(fit: GlmFit, ds: TrialDataset, z: int, g: int) -> np.ndarray:
    """mu_hat(z, g, X_ij) for every subject: the counterfactual cell prediction.

    For a targeting fit, the initial model evaluated at (z, g, X) feeds the offset.
    """
    if fit.kind == "initial":
        return predict_mean(fit, initial_design_rows(ds, z=z, g=g))
    if fit.kind == "targeting":
        if fit.base is None:
            raise EstimationError("targeting fit has no initial fit attached")
        offset = linear_predictor(fit.base, initial_design_rows(ds, z=z, g=g))
        rows = np.hstack([site_indicators(ds), clever_covariates(ds, z=z, g=g)])
        return predict_mean(fit, rows, offset)
    raise EstimationError(f"cannot form cell predictions from a {fit.kind!r} fit")


def fitted_means(fit: GlmFit, ds: TrialDataset) -> np.ndarray:
    """mu_hat at each subject's observed (Z, G, X)."""
    if fit.kind == "initial":
        return predict_mean(fit, initial_design_rows(ds))
    if fit.kind == "targeting" and fit.base is not None:
        offset = linear_predictor(fit.base, initial_design_rows(ds))
        rows = np.hstack([site_indicators(ds), clever_covariates(ds)])
        return predict_mean(fit, rows, offset)
    raise EstimationError(f"cannot form fitted means from a {fit.kind!r} fit")
