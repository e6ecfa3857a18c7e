"""Cross-sectional vaccine-efficacy estimators and their inference.

The MFD substitution estimator runs in four steps:

1. Poisson regression of f(Y) on the full X*G*Z expansion (``mu_hat_0``).
2. With more than one site, a targeting regression offset by ``log mu_hat_0``
   on site indicators and four clever covariates (``mu_hat_1``); skipped for J=1.
3. Cell means mu_zg averaged with equal site weight 1/J * 1/I_j.
4. tau_hat = 1 - (mu_11 - mu_10) / (mu_01 - mu_00).

The naive, s-corrected and bounded estimators reuse the same fits. Variances
come from plug-in influence values; the MFD variance uses the unprojected
influence function and is therefore conservative.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import sys
from enum import Enum

if sys.version_info >= (3, 11):
    from enum import StrEnum
else:  # Python 3.10 compatibility: same str()/format() behaviour as enum.StrEnum
    class StrEnum(str, Enum):
        def __str__(self) -> str:
            return str(self.value)

        def __format__(self, spec: str) -> str:
            return format(str(self.value), spec)
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm

from .core.errors import ParameterError, UndefinedEstimateError, log_and_raise
from .core.logging import get_logger
from .glm_core import GlmFit, fit_initial, fit_targeting, initial_design_rows, predict_cell, predict_mean
from .trial_data import CELLS, TrialDataset, require_positivity


log = get_logger(__name__)

DENOMINATOR_GUARD = 1e-8
DEFAULT_ALPHA = 0.05
DEFAULT_ALPHA0 = 0.001
DEFAULT_ALPHA_TILDE = 0.001
DEFAULT_P_Z = 0.5


class Method(StrEnum):
    MFD = "mfd"
    NAIVE = "naive"
    S_CORRECTED = "s_corrected"
    BOUNDED = "bounded"
    COX_MFD = "cox_mfd"
    COX_NAIVE = "cox_naive"
    COX_BOUNDED = "cox_bounded"


class Flag(StrEnum):
    WEAK_DENOMINATOR = "weak_denominator"
    NONCONVERGED_GLM = "nonconverged_glm"
    CLIPPED_AT_BOUND = "clipped_at_bound"
    COLLAPSED_INTERVAL = "collapsed_interval"


@dataclass(frozen=True)
class MuEstimates:
    mu_11: float
    mu_10: float
    mu_01: float
    mu_00: float

    @property
    def mu1(self) -> float:
        return self.mu_11 - self.mu_10

    @property
    def mu0(self) -> float:
        return self.mu_01 - self.mu_00

    @property
    def mu_zg(self) -> dict[tuple[int, int], float]:
        return {(1, 1): self.mu_11, (1, 0): self.mu_10, (0, 1): self.mu_01, (0, 0): self.mu_00}

    @classmethod
    def from_cells(cls, cells: dict[tuple[int, int], float]) -> "MuEstimates":
        return cls(mu_11=cells[(1, 1)], mu_10=cells[(1, 0)], mu_01=cells[(0, 1)], mu_00=cells[(0, 0)])


@dataclass(frozen=True)
class InfluenceValues:
    """Per-subject influence values phi_zg, columns ordered (11, 10, 01, 00).

    ``subject_weight`` is the equal-site weight 1/(J * I_j) of each subject.
    """

    phi: np.ndarray
    subject_weight: np.ndarray

    def cell(self, z: int, g: int) -> np.ndarray:
        return self.phi[:, CELLS.index((z, g))]

    @property
    def phi_1(self) -> np.ndarray:
        return self.cell(1, 1) - self.cell(1, 0)

    @property
    def phi_0(self) -> np.ndarray:
        return self.cell(0, 1) - self.cell(0, 0)

    def weighted_mean(self) -> np.ndarray:
        """Equally-site-weighted empirical mean of each phi_zg column."""
        return self.subject_weight @ self.phi


@dataclass(frozen=True)
class EfficacyEstimate:
    method: Method
    tau_hat: float
    se: float
    ci: tuple[float, float]
    alpha: float = DEFAULT_ALPHA
    flags: frozenset[Flag] = field(default_factory=frozenset)

    @property
    def var(self) -> float:
        return self.se**2

    @property
    def ci_lower(self) -> float:
        return self.ci[0]

    @property
    def ci_upper(self) -> float:
        return self.ci[1]

    def lower_bound(self, alpha: float) -> float:
        """One-sided L_alpha = tau_hat - Phi^{-1}(1 - alpha) * se."""
        return lower_bound(self.tau_hat, self.var, alpha)

    def upper_bound(self, alpha: float) -> float:
        return upper_bound(self.tau_hat, self.var, alpha)

    def covers(self, value: float) -> bool:
        return self.ci[0] <= value <= self.ci[1]

    def to_row(self) -> dict:
        return {
            "method": str(self.method),
            "tau_hat": self.tau_hat,
            "se": self.se,
            "ci_lower": self.ci[0],
            "ci_upper": self.ci[1],
            "flags": ";".join(sorted(str(f) for f in self.flags)),
        }


@dataclass
class WorkingModel:
    """Initial fit and, when targeting ran, the targeted fit built on it."""

    fit0: GlmFit
    fit1: GlmFit | None = None

    @property
    def targeted(self) -> bool:
        return self.fit1 is not None

    @property
    def outcome_fit(self) -> GlmFit:
        return self.fit1 if self.fit1 is not None else self.fit0

    @property
    def converged(self) -> bool:
        return self.fit0.converged and (self.fit1 is None or self.fit1.converged)


def subject_weights(ds: TrialDataset) -> np.ndarray:
    """Equal-site weight 1/(J * I_j) per subject; sums to one."""
    return (1.0 / (ds.n_sites * ds.site_sizes))[ds.site]


def fit_working_model(ds: TrialDataset, target: bool | None = None) -> WorkingModel:
    """Algorithm steps 1-2. Targeting runs iff there is more than one site, unless forced."""
    require_positivity(ds)
    fit0 = fit_initial(ds)
    if target is None:
        target = ds.n_sites > 1
    if not target:
        return WorkingModel(fit0=fit0)
    if not fit0.converged:
        return WorkingModel(fit0=fit0)
    return WorkingModel(fit0=fit0, fit1=fit_targeting(ds, fit0))


def estimate_mu(ds: TrialDataset, fit1: GlmFit, allow_nonconverged: bool = False) -> MuEstimates:
    """mu_zg(P_n): counterfactual cell predictions averaged with equal site weight."""
    if not allow_nonconverged:
        fit1.require_converged()
        if fit1.base is not None:
            fit1.base.require_converged()
    v = subject_weights(ds)
    return MuEstimates.from_cells({(z, g): float(v @ predict_cell(fit1, ds, z, g)) for z, g in CELLS})


def mfd_tau(mu: MuEstimates) -> float:
    """tau_hat = 1 - mu1 / mu0."""
    if mu.mu0 == 0.0:
        log_and_raise(log, UndefinedEstimateError("mu_01 - mu_00 is exactly zero; efficacy undefined"))
    return 1.0 - mu.mu1 / mu.mu0


def weak_denominator(denominator: float, scale: float) -> bool:
    return abs(denominator) < DENOMINATOR_GUARD * abs(scale)


def identification_check(mu: MuEstimates) -> list[str]:
    """Sanity checks on the fitted 2x2 table; returns human-readable warnings."""
    warnings: list[str] = []
    if mu.mu0 >= 0:
        warnings.append(
            f"Mendelian factor is not protective in the placebo arm (mu_01 - mu_00 = {mu.mu0:.4g} >= 0)"
        )
    if any(v <= 0 for v in mu.mu_zg.values()):
        warnings.append("nonpositive cell mean")
    for w in warnings:
        log.warning(w)
    return warnings


def _naive_margins(ds: TrialDataset, fit0: GlmFit) -> tuple[np.ndarray, np.ndarray, float, float]:
    v = subject_weights(ds)
    pred1 = predict_mean(fit0, initial_design_rows(ds, z=1))
    pred0 = predict_mean(fit0, initial_design_rows(ds, z=0))
    return pred1, pred0, float(v @ pred1), float(v @ pred0)


def naive_tau(ds: TrialDataset, fit0: GlmFit) -> float:
    """tau_hat_0 = 1 - P_n mu_hat_0(1, G, X) / P_n mu_hat_0(0, G, X), G at its observed value."""
    _, _, m1, m0 = _naive_margins(ds, fit0)
    if m0 == 0.0:
        log_and_raise(log, UndefinedEstimateError("placebo marginal mean is zero; naive efficacy undefined"))
    return 1.0 - m1 / m0


def naive_influence(ds: TrialDataset, fit0: GlmFit, p_z: float = DEFAULT_P_Z) -> np.ndarray:
    """Influence values of tau_hat_0, treating G as a covariate, via the delta method."""
    pred1, pred0, m1, m0 = _naive_margins(ds, fit0)
    y = ds.f_y
    z = ds.z.astype(float)
    psi1 = z * (y - pred1) / p_z + pred1 - m1
    psi0 = (1.0 - z) * (y - pred0) / (1.0 - p_z) + pred0 - m0
    return psi0 * m1 / m0**2 - psi1 / m0


def influence_values(
    ds: TrialDataset, fit1: GlmFit, mu: MuEstimates, p_z: float = DEFAULT_P_Z
) -> InfluenceValues:
    """phi_zg(P_n)(O) = 1(Z=z)1(G=g)(f(Y) - mu_hat(z,g,X)) / (q_j(g) p(z)) + mu_hat(z,g,X) - mu_zg."""
    if not 0.0 < p_z < 1.0:
        raise ParameterError(f"p(Z=1) must lie in (0, 1), got {p_z}")
    prev = ds.site_prevalence
    if np.any((prev <= 0) | (prev >= 1)):
        require_positivity(ds)
    q1 = prev[ds.site]
    y = ds.f_y
    cols = []
    for z, g in CELLS:
        pred = predict_cell(fit1, ds, z, g)
        indicator = ((ds.z == z) & (ds.g == g)).astype(float)
        q = q1 if g == 1 else 1.0 - q1
        pz = p_z if z == 1 else 1.0 - p_z
        cols.append(indicator * (y - pred) / (q * pz) + pred - mu.mu_zg[(z, g)])
    return InfluenceValues(phi=np.column_stack(cols), subject_weight=subject_weights(ds))


def variance_mfd(iv: InfluenceValues, mu: MuEstimates) -> float:
    """Plug-in variance of tau_hat from {phi_0 * mu1 / mu0^2 - phi_1 / mu0}.

    With equal site sizes the subject weight is 1/n and this is the familiar
    (1/n^2) * sum of squares.
    """
    if mu.mu0 == 0.0:
        log_and_raise(log, UndefinedEstimateError("variance undefined for mu0 = 0"))
    psi = iv.phi_0 * mu.mu1 / mu.mu0**2 - iv.phi_1 / mu.mu0
    return float(np.sum((iv.subject_weight * psi) ** 2))


def variance_from_influence(psi: np.ndarray, subject_weight: np.ndarray) -> float:
    centered = psi - subject_weight @ psi
    return float(np.sum((subject_weight * centered) ** 2))


def _quantile(alpha: float) -> float:
    return float(norm.ppf(1.0 - alpha))


def lower_bound(tau: float, var: float, alpha: float) -> float:
    if alpha <= 0.0:
        return -np.inf
    return tau - _quantile(alpha) * np.sqrt(var)


def upper_bound(tau: float, var: float, alpha: float) -> float:
    if alpha <= 0.0:
        return np.inf
    return tau + _quantile(alpha) * np.sqrt(var)


def wald_ci(tau: float, var: float, alpha: float = DEFAULT_ALPHA, two_sided: bool = True) -> tuple[float, float]:
    """Two-sided (alpha/2 each side) or one-sided (L_alpha, U_alpha) Wald bounds."""
    if var < 0:
        raise ParameterError("variance must be nonnegative")
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must lie in (0, 1), got {alpha}")
    a = alpha / 2.0 if two_sided else alpha
    return lower_bound(tau, var, a), upper_bound(tau, var, a)


def bounded_tau(tau_mfd: float, naive: EfficacyEstimate, alpha_tilde: float = DEFAULT_ALPHA_TILDE) -> float:
    """min(1, max(tau_hat, L_{0, alpha_tilde})). Assumes spillover efficacy <= tau."""
    if not 0.0 <= alpha_tilde < 1.0:
        raise ParameterError(f"alpha_tilde must lie in [0, 1), got {alpha_tilde}")
    return float(min(1.0, max(tau_mfd, naive.lower_bound(alpha_tilde))))


def bounded_ci(
    mfd: EfficacyEstimate,
    naive: EfficacyEstimate,
    alpha: float = DEFAULT_ALPHA,
    alpha0: float = DEFAULT_ALPHA0,
) -> tuple[float, float]:
    """[max(L_{alpha/2 - alpha0}, L_{0, alpha0}), min(1, U_{alpha/2})].

    When the naive lower bound sits above the MFD upper bound the interval is
    empty; it is then collapsed onto min(1, L_{0, alpha0}), which is also the
    bounded point estimate when alpha_tilde = alpha0.
    """
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must lie in (0, 1), got {alpha}")
    if not 0.0 <= alpha0 <= alpha / 2.0:
        raise ParameterError(f"alpha0 must lie in [0, alpha/2] = [0, {alpha / 2}], got {alpha0}")
    lower = max(mfd.lower_bound(alpha / 2.0 - alpha0), naive.lower_bound(alpha0))
    upper = min(1.0, mfd.upper_bound(alpha / 2.0))
    if lower > upper:
        log.bind(lower=lower, upper=upper).warning("naive lower bound exceeds MFD upper bound; collapsing interval")
        lower = upper = min(1.0, lower)
    return float(lower), float(upper)


def _interval_empty(mfd: EfficacyEstimate, naive: EfficacyEstimate, alpha: float, alpha0: float) -> bool:
    return naive.lower_bound(alpha0) > min(1.0, mfd.upper_bound(alpha / 2.0))


def bounded_estimate(
    mfd: EfficacyEstimate,
    naive: EfficacyEstimate,
    alpha: float = DEFAULT_ALPHA,
    alpha0: float = DEFAULT_ALPHA0,
    alpha_tilde: float = DEFAULT_ALPHA_TILDE,
    method: Method = Method.BOUNDED,
) -> EfficacyEstimate:
    """Bounded estimate and interval; ``se`` is carried over from the MFD estimate."""
    tau_b = bounded_tau(mfd.tau_hat, naive, alpha_tilde)
    flags = set(mfd.flags)
    if tau_b != mfd.tau_hat:
        flags.add(Flag.CLIPPED_AT_BOUND)
    ci = bounded_ci(mfd, naive, alpha, alpha0)
    if _interval_empty(mfd, naive, alpha, alpha0):
        flags.add(Flag.COLLAPSED_INTERVAL)
    return EfficacyEstimate(
        method=method,
        tau_hat=tau_b,
        se=mfd.se,
        ci=ci,
        alpha=alpha,
        flags=frozenset(flags),
    )


def s_corrected(
    naive: EfficacyEstimate,
    s: float | Sequence[float],
    alpha: float = DEFAULT_ALPHA,
    beta: float = 0.0,
) -> EfficacyEstimate:
    """Naive estimate divided by the case specificity s (consistent when eta = 0).

    With an interval C_beta = (lo, hi) the CI is the union over s in C_beta of
    level 1 - alpha - beta intervals; endpoints are monotone in s so the union
    is read off at lo and hi. The point estimate then uses the midpoint of C_beta.
    """
    if isinstance(s, (int, float)):
        lo = hi = float(s)
    else:
        lo, hi = (float(v) for v in s)
    if not (0.0 < lo <= hi <= 1.0):
        log_and_raise(log, ParameterError(f"specificity must lie in (0, 1] with lo <= hi, got ({lo}, {hi})"))
    level = alpha + (beta if hi > lo else 0.0)
    if not 0.0 < level < 1.0:
        raise ParameterError(f"alpha + beta must lie in (0, 1), got {level}")
    low, up = wald_ci(naive.tau_hat, naive.var, level)
    mid = 0.5 * (lo + hi)
    return EfficacyEstimate(
        method=Method.S_CORRECTED,
        tau_hat=naive.tau_hat / mid,
        se=naive.se / mid,
        ci=(min(low / lo, low / hi), max(up / lo, up / hi)),
        alpha=alpha,
        flags=naive.flags,
    )


def mfd_estimate(
    ds: TrialDataset,
    model: WorkingModel,
    alpha: float = DEFAULT_ALPHA,
    p_z: float = DEFAULT_P_Z,
    allow_nonconverged: bool = False,
) -> EfficacyEstimate:
    fit = model.outcome_fit
    flags: set[Flag] = set()
    if not model.converged:
        flags.add(Flag.NONCONVERGED_GLM)
    mu = estimate_mu(ds, fit, allow_nonconverged=allow_nonconverged)
    identification_check(mu)
    if weak_denominator(mu.mu0, float(np.mean(ds.f_y))):
        flags.add(Flag.WEAK_DENOMINATOR)
        log.bind(mu0=mu.mu0).warning("weak denominator in MFD estimate")
    tau = mfd_tau(mu)
    iv = influence_values(ds, fit, mu, p_z=p_z)
    var = variance_mfd(iv, mu)
    return EfficacyEstimate(
        method=Method.MFD,
        tau_hat=tau,
        se=float(np.sqrt(var)),
        ci=wald_ci(tau, var, alpha),
        alpha=alpha,
        flags=frozenset(flags),
    )


def naive_estimate(
    ds: TrialDataset,
    model: WorkingModel,
    alpha: float = DEFAULT_ALPHA,
    p_z: float = DEFAULT_P_Z,
    allow_nonconverged: bool = False,
) -> EfficacyEstimate:
    fit0 = model.fit0
    if not allow_nonconverged:
        fit0.require_converged()
    flags = frozenset() if fit0.converged else frozenset({Flag.NONCONVERGED_GLM})
    tau = naive_tau(ds, fit0)
    var = variance_from_influence(naive_influence(ds, fit0, p_z), subject_weights(ds))
    return EfficacyEstimate(
        method=Method.NAIVE,
        tau_hat=tau,
        se=float(np.sqrt(var)),
        ci=wald_ci(tau, var, alpha),
        alpha=alpha,
        flags=flags,
    )


def estimate_count(
    ds: TrialDataset,
    estimators: Iterable[str | Method] = (Method.MFD, Method.NAIVE, Method.BOUNDED),
    *,
    s: float | None = None,
    s_interval: tuple[float, float] | None = None,
    alpha: float = DEFAULT_ALPHA,
    alpha0: float = DEFAULT_ALPHA0,
    alpha_tilde: float = DEFAULT_ALPHA_TILDE,
    beta: float = 0.0,
    p_z: float = DEFAULT_P_Z,
    target: bool | None = None,
    allow_nonconverged: bool = False,
) -> dict[Method, EfficacyEstimate]:
    """Run the requested count-outcome estimators on one dataset."""
    try:
        wanted = [Method(m) for m in estimators]
    except ValueError as e:
        raise ParameterError(str(e)) from e
    if Method.S_CORRECTED in wanted and s is None and s_interval is None:
        raise ParameterError("s_corrected requires s or s_interval")
    model = fit_working_model(ds, target=target)
    log.bind(n=ds.n, sites=ds.n_sites, targeted=model.targeted, iterations=model.fit0.iterations).debug(
        "working model fitted"
    )

    out: dict[Method, EfficacyEstimate] = {}
    need_mfd = Method.MFD in wanted or Method.BOUNDED in wanted
    need_naive = Method.NAIVE in wanted or Method.BOUNDED in wanted or Method.S_CORRECTED in wanted
    mfd = mfd_estimate(ds, model, alpha, p_z, allow_nonconverged) if need_mfd else None
    naive = naive_estimate(ds, model, alpha, p_z, allow_nonconverged) if need_naive else None
    for m in wanted:
        if m == Method.MFD:
            out[m] = mfd
        elif m == Method.NAIVE:
            out[m] = naive
        elif m == Method.BOUNDED:
            out[m] = bounded_estimate(mfd, naive, alpha, alpha0, alpha_tilde)
        elif m == Method.S_CORRECTED:
            out[m] = s_corrected(naive, s_interval if s_interval is not None else s, alpha, beta)
        else:
            raise ParameterError(f"{m} is not a count-outcome estimator")
    return out

