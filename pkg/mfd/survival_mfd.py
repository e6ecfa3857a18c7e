"""Time-to-first-fever MFD estimation under proportional hazards.

The any-cause first-fever hazard is modelled as
``lambda(t) exp{alpha + omega z + gamma g + iota z*g + beta' X}`` and fitted by
maximum partial likelihood (Breslow ties, Newton-Raphson with step-halving).
Vaccine efficacy is recovered from (omega, gamma, iota) and its variance from
the delta method on the inverse observed information.

The interaction coefficient is named ``iota`` so it does not collide with the
baseline hazard symbol.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .core.errors import DataValidationError, EstimationError, ParameterError, UndefinedEstimateError, log_and_raise
from .core.logging import get_logger
from .estimators import (
    DEFAULT_ALPHA,
    DEFAULT_ALPHA0,
    DEFAULT_ALPHA_TILDE,
    EfficacyEstimate,
    Flag,
    Method,
    bounded_estimate,
    wald_ci,
)
from .trial_data import CELLS, TrialDataset, require_positivity


log = get_logger(__name__)

MAX_ITER = 50
SCORE_TOL = 1e-9
MAX_HALVINGS = 30
WEAK_FACTOR_GUARD = 1e-6
CORE_LABELS = ("z", "g", "z:g")


@dataclass
class CoxFit:
    coef: np.ndarray
    labels: tuple[str, ...]
    info: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    n_events: int
    monotone_likelihood: bool = False
    score: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def omega(self) -> float:
        return float(self.coef[0])

    @property
    def gamma(self) -> float:
        return float(self.coef[1])

    @property
    def iota(self) -> float:
        return float(self.coef[2])

    @property
    def beta_x(self) -> np.ndarray:
        return self.coef[3:]

    def covariance(self) -> np.ndarray:
        try:
            return np.linalg.inv(self.info)
        except np.linalg.LinAlgError as e:
            raise EstimationError("partial-likelihood information is singular") from e


def cox_design(ds: TrialDataset) -> tuple[np.ndarray, tuple[str, ...]]:
    z = ds.z.astype(float)
    g = ds.g.astype(float)
    matrix = np.column_stack([z, g, z * g, ds.x]) if ds.d else np.column_stack([z, g, z * g])
    return matrix, CORE_LABELS + ds.covariate_names


class _BreslowTerms:
    """Sorted data and tie structure reused across Newton iterations."""

    def __init__(self, time: np.ndarray, event: np.ndarray, X: np.ndarray) -> None:
        order = np.argsort(time, kind="stable")
        self.t = time[order]
        self.d = event[order].astype(bool)
        self.X = X[order]
        # first index of each subject's tie group: risk set = all j with t_j >= t_i
        self.start = np.searchsorted(self.t, self.t, side="left")

    def evaluate(self, beta: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        X = self.X
        eta = X @ beta
        shift = float(np.max(eta)) if eta.size else 0.0
        r = np.exp(eta - shift)
        s0 = np.cumsum(r[::-1])[::-1]
        s1 = np.cumsum((r[:, None] * X)[::-1], axis=0)[::-1]
        s2 = np.cumsum((r[:, None, None] * X[:, :, None] * X[:, None, :])[::-1], axis=0)[::-1]
        idx = self.start[self.d]
        s0e, s1e, s2e = s0[idx], s1[idx], s2[idx]
        xbar = s1e / s0e[:, None]
        loglik = float(np.sum(eta[self.d] - shift - np.log(s0e)))
        score = np.sum(X[self.d] - xbar, axis=0)
        info = np.sum(s2e / s0e[:, None, None] - xbar[:, :, None] * xbar[:, None, :], axis=0)
        return loglik, score, info


def fit_cox(ds: TrialDataset, max_iter: int = MAX_ITER, tol: float = SCORE_TOL) -> CoxFit:
    """Maximum partial likelihood with Breslow ties, Newton-Raphson with step-halving.

    Converged when ||score|| < tol * max(1, events).
    """
    if ds.outcome_kind != "survival":
        raise DataValidationError("fit_cox needs a survival dataset")
    n_events = int(np.sum(ds.event))
    if n_events == 0:
        log_and_raise(log, DataValidationError("no events observed; partial likelihood is flat"))
    require_positivity(ds)

    X, labels = cox_design(ds)
    terms = _BreslowTerms(ds.time, ds.event, X)
    cell_events = {
        (z, g): int(np.sum(ds.event[(ds.z == z) & (ds.g == g)])) for z, g in CELLS
    }
    monotone = any(v == 0 for v in cell_events.values())
    if monotone:
        log.bind(cell_events={f"z{z}g{g}": v for (z, g), v in cell_events.items()}).warning(
            "a (z, g) cell has no events; partial likelihood is monotone"
        )

    beta = np.zeros(X.shape[1])
    loglik, score, info = terms.evaluate(beta)
    converged = False
    iterations = 0
    threshold = tol * max(1, n_events)
    for it in range(1, max_iter + 1):
        if float(np.linalg.norm(score)) < threshold:
            converged = True
            break
        iterations = it
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, score, rcond=None)[0]
        new_beta = beta + step
        new_ll, new_score, new_info = terms.evaluate(new_beta)
        halvings = 0
        while (not np.isfinite(new_ll) or new_ll < loglik) and halvings < MAX_HALVINGS:
            step = 0.5 * step
            new_beta = beta + step
            new_ll, new_score, new_info = terms.evaluate(new_beta)
            halvings += 1
        if halvings:
            log.bind(iteration=it).debug("cox step-halving applied {} times", halvings)
        beta, loglik, score, info = new_beta, new_ll, new_score, new_info
    else:
        converged = float(np.linalg.norm(score)) < threshold

    if not converged:
        log.bind(iterations=iterations, score_norm=float(np.linalg.norm(score))).warning("cox fit did not converge")
    return CoxFit(
        coef=beta,
        labels=labels,
        info=info,
        loglik=loglik,
        converged=converged,
        iterations=iterations,
        n_events=n_events,
        monotone_likelihood=monotone,
        score=score,
    )


def tau_from_coefficients(omega: float, gamma: float, iota: float) -> float:
    """1 - (e^{omega+gamma+iota} - e^omega) / (e^gamma - 1)."""
    denom = np.expm1(gamma)
    if denom == 0.0:
        log_and_raise(log, UndefinedEstimateError("gamma = 0: the Mendelian factor carries no information"))
    return float(1.0 - (np.exp(omega + gamma + iota) - np.exp(omega)) / denom)


def tau_gradient(omega: float, gamma: float, iota: float) -> np.ndarray:
    """Analytic d tau / d(omega, gamma, iota)."""
    denom = np.expm1(gamma)
    num = np.exp(omega + gamma + iota) - np.exp(omega)
    d_omega = -num / denom
    d_gamma = -(np.exp(omega + gamma + iota) * denom - num * np.exp(gamma)) / denom**2
    d_iota = -np.exp(omega + gamma + iota) / denom
    return np.array([d_omega, d_gamma, d_iota])


def cox_mfd_tau(fit: CoxFit) -> float:
    return tau_from_coefficients(fit.omega, fit.gamma, fit.iota)


def cox_weak_factor(fit: CoxFit) -> bool:
    return abs(np.expm1(fit.gamma)) < WEAK_FACTOR_GUARD


def cox_mfd_variance(fit: CoxFit) -> float:
    """grad' I^{-1}[(omega, gamma, iota)] grad."""
    cov = fit.covariance()[:3, :3]
    grad = tau_gradient(fit.omega, fit.gamma, fit.iota)
    return float(max(grad @ cov @ grad, 0.0))


def cox_naive_tau(fit: CoxFit) -> float:
    """1 - e^omega; consistent for a convex combination of tau and the spillover efficacy."""
    return float(1.0 - np.exp(fit.omega))


def cox_naive_variance(fit: CoxFit) -> float:
    return float(np.exp(2.0 * fit.omega) * fit.covariance()[0, 0])


def _fit_flags(fit: CoxFit) -> set[Flag]:
    return set() if fit.converged else {Flag.NONCONVERGED_GLM}


def cox_mfd_estimate(fit: CoxFit, alpha: float = DEFAULT_ALPHA) -> EfficacyEstimate:
    flags = _fit_flags(fit)
    if cox_weak_factor(fit):
        flags.add(Flag.WEAK_DENOMINATOR)
        log.bind(gamma=fit.gamma).warning("weak Mendelian factor in Cox fit")
    tau = cox_mfd_tau(fit)
    var = cox_mfd_variance(fit)
    return EfficacyEstimate(
        method=Method.COX_MFD, tau_hat=tau, se=float(np.sqrt(var)), ci=wald_ci(tau, var, alpha),
        alpha=alpha, flags=frozenset(flags),
    )


def cox_naive_estimate(fit: CoxFit, alpha: float = DEFAULT_ALPHA) -> EfficacyEstimate:
    tau = cox_naive_tau(fit)
    var = cox_naive_variance(fit)
    return EfficacyEstimate(
        method=Method.COX_NAIVE, tau_hat=tau, se=float(np.sqrt(var)), ci=wald_ci(tau, var, alpha),
        alpha=alpha, flags=frozenset(_fit_flags(fit)),
    )


def cox_bounded(
    mfd_est: EfficacyEstimate,
    naive_est: EfficacyEstimate,
    alpha: float = DEFAULT_ALPHA,
    alpha0: float = DEFAULT_ALPHA0,
    alpha_tilde: float = DEFAULT_ALPHA_TILDE,
) -> EfficacyEstimate:
    return bounded_estimate(mfd_est, naive_est, alpha, alpha0, alpha_tilde, method=Method.COX_BOUNDED)


_SURVIVAL_METHODS = {
    "mfd": Method.COX_MFD,
    "naive": Method.COX_NAIVE,
    "bounded": Method.COX_BOUNDED,
    Method.COX_MFD: Method.COX_MFD,
    Method.COX_NAIVE: Method.COX_NAIVE,
    Method.COX_BOUNDED: Method.COX_BOUNDED,
}


def estimate_survival(
    ds: TrialDataset,
    estimators=("mfd", "naive", "bounded"),
    alpha: float = DEFAULT_ALPHA,
    alpha0: float = DEFAULT_ALPHA0,
    alpha_tilde: float = DEFAULT_ALPHA_TILDE,
) -> dict[Method, EfficacyEstimate]:
    """Run the Cox-based estimators; plain names map to their cox_* counterparts."""
    wanted = []
    for m in estimators:
        if m not in _SURVIVAL_METHODS:
            raise ParameterError(f"{m} is not available for survival outcomes")
        wanted.append(_SURVIVAL_METHODS[m])
    fit = fit_cox(ds)
    if not fit.converged:
        raise EstimationError(f"cox fit did not converge after {fit.iterations} iterations")
    mfd = cox_mfd_estimate(fit, alpha)
    naive = cox_naive_estimate(fit, alpha)
    out: dict[Method, EfficacyEstimate] = {}
    for m in wanted:
        if m == Method.COX_MFD:
            out[m] = mfd
        elif m == Method.COX_NAIVE:
            out[m] = naive
        else:
            out[m] = cox_bounded(mfd, naive, alpha, alpha0, alpha_tilde)
    return out


def hazard_reparameterize(kappa: float, phi: float, tau: float, nu: float, eta: float = 0.0) -> tuple[float, float, float, float]:
    """Map (kappa, phi, tau, nu, eta) to Cox coefficients (alpha, omega, gamma, iota).

    Solves exp(alpha) = kappa + phi, exp(alpha + omega) = kappa(1-tau) + phi(1-eta),
    exp(alpha + gamma) = kappa(1-nu) + phi and
    exp(alpha + omega + gamma + iota) = kappa(1-tau)(1-nu) + phi(1-eta).
    """
    h00 = kappa + phi
    h10 = kappa * (1.0 - tau) + phi * (1.0 - eta)
    h01 = kappa * (1.0 - nu) + phi
    h11 = kappa * (1.0 - tau) * (1.0 - nu) + phi * (1.0 - eta)
    alpha = np.log(h00)
    omega = np.log(h10) - alpha
    gamma = np.log(h01) - alpha
    iota = np.log(h11) - alpha - omega - gamma
    return float(alpha), float(omega), float(gamma), float(iota)


class SurvivalScenario(BaseModel):
    """Generative settings for exponential first-fever times with administrative censoring."""

    model_config = ConfigDict(extra="forbid")

    baseline_rate: float = Field(1.0, gt=0)
    kappa: float = Field(1.2, gt=0)
    phi: float = Field(0.3, ge=0)
    tau: float = Field(0.5, lt=1)
    nu: float = Field(0.5, lt=1)
    eta: float = Field(0.0, lt=1)
    beta_x: float = 0.1
    horizon: float = Field(1.0, gt=0)
    p_g: float = Field(0.2, gt=0, lt=1)
    n: int = Field(2000, ge=8)
    d: int = Field(1, ge=0)

    @model_validator(mode="after")
    def _rates_positive(self) -> "SurvivalScenario":
        if self.kappa * (1 - self.tau) * (1 - self.nu) <= 0:
            raise ValueError("malaria hazard must stay positive in every cell")
        return self


def simulate_survival_trial(scenario: SurvivalScenario, seed: int | np.random.SeedSequence) -> TrialDataset:
    """Latent exponential malaria and non-malaria first-fever times, censored at the horizon.

    The two latent times are conditionally independent given X and share the
    baseline hazard and covariate effect. Arms alternate so each holds n/2 subjects.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss)
    n = scenario.n
    z = np.arange(n) % 2
    g = (rng.random(n) < scenario.p_g).astype(int)
    x = rng.standard_normal((n, scenario.d))
    lin = scenario.beta_x * x.sum(axis=1) if scenario.d else np.zeros(n)
    base = scenario.baseline_rate * np.exp(lin)
    rate_m = base * scenario.kappa * (1 - scenario.tau) ** z * (1 - scenario.nu) ** g
    rate_nm = base * scenario.phi * (1 - scenario.eta) ** z
    t_m = rng.exponential(1.0, n) / rate_m
    e_nm = rng.exponential(1.0, n)
    t_nm = np.where(rate_nm > 0, e_nm / np.where(rate_nm > 0, rate_nm, 1.0), np.inf)
    t_first = np.minimum(t_m, t_nm)
    event = (t_first <= scenario.horizon).astype(int)
    time = np.minimum(t_first, scenario.horizon)
    return TrialDataset.from_arrays(["1"] * n, z, g, x, time=time, event=event)
