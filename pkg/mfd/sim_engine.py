"""Monte Carlo study runner for the cross-sectional count design.

Each subject carries lognormal individual efficacies, a standard-normal
covariate with mean-one multiplicative effects, and a dependent pair of
negative-binomial counts (malaria, non-malaria) joined by a Gaussian copula.
Only the summed count reaches the estimators; the latent pair is retained on
:class:`SimulatedTrial` for calibration checks.

Replication ``k`` draws from ``SeedSequence(seed, spawn_key=(k,))`` so results
do not depend on how replications are scheduled across workers.
"""
from __future__ import annotations

import itertools
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:  # Python 3.10 compatibility: tomli is the tomllib backport
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from scipy.stats import nbinom, norm, trimboth

from .core.errors import EstimationError, MfdError, ParameterError, log_and_raise
from .core.logging import get_logger
from .estimators import (
    DEFAULT_ALPHA,
    DEFAULT_ALPHA0,
    DEFAULT_ALPHA_TILDE,
    DEFAULT_P_Z,
    EfficacyEstimate,
    Method,
    estimate_count,
)
from .trial_data import FLOAT_FORMAT, SubjectRecord, TrialDataset


log = get_logger(__name__)

QUANTILE_CAP = 1.0 - 1e-12
TRIM_FRACTION = 0.025
COUNT_METHODS = (Method.MFD, Method.NAIVE, Method.BOUNDED, Method.S_CORRECTED)
SUMMARY_COLUMNS = [
    "scenario",
    "estimator",
    "n",
    "J",
    "tau",
    "nu",
    "eta",
    "s",
    "prop_abs_bias",
    "bias",
    "rmse",
    "rmse_trimmed",
    "coverage",
    "power",
    "mean",
    "median",
    "n_rep",
    "n_failed",
]


class ScenarioConfig(BaseModel):
    """One simulation setting; scenario TOML files map onto these fields one-to-one."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = "scenario"
    n: int = Field(2000, ge=8)
    J: int = Field(1, ge=1)
    tau: float = Field(0.5, lt=1)
    nu: float = Field(0.5, lt=1)
    eta: float = Field(0.0, lt=1)
    s: float = Field(0.8, gt=0, le=1)
    p_g: float = Field(0.2, gt=0, lt=1)
    rho: float = Field(-0.1, gt=-1, lt=1)
    r: float = Field(10.0, gt=0)
    total_mean: float = Field(1.5, gt=0)
    effi_sd: float = Field(0.05, ge=0)
    noise_sd: float = Field(0.05, ge=0)
    covariate_effect_m: float = 0.05
    covariate_effect_nm: float = 0.075
    n_sim: int = Field(500, ge=1)
    seed: int = Field(20240501, ge=0)
    alpha: float = Field(DEFAULT_ALPHA, gt=0, lt=1)
    alpha0: float = Field(DEFAULT_ALPHA0, ge=0)
    alpha_tilde: float = Field(DEFAULT_ALPHA_TILDE, gt=0, lt=1)
    p_z: float = Field(DEFAULT_P_Z, gt=0, lt=1)
    estimators: tuple[Method, ...] = COUNT_METHODS

    @field_validator("estimators")
    @classmethod
    def _count_methods_only(cls, v: tuple[Method, ...]) -> tuple[Method, ...]:
        bad = [m for m in v if m not in COUNT_METHODS]
        if bad:
            raise ValueError(f"not count-outcome estimators: {', '.join(map(str, bad))}")
        if not v:
            raise ValueError("at least one estimator is required")
        return v

    @model_validator(mode="after")
    def _consistent(self) -> "ScenarioConfig":
        if self.alpha0 > self.alpha / 2:
            raise ValueError("alpha0 must not exceed alpha/2")
        if self.n < 8 * self.J:
            raise ValueError("need at least 8 subjects per site")
        return self

    @classmethod
    def from_file(cls, path: str | Path) -> "ScenarioConfig":
        p = Path(path)
        try:
            with p.open("rb") as f:
                raw = tomllib.load(f)
        except (OSError, tomllib.TOMLDecodeError) as e:
            raise ParameterError(f"cannot read scenario file {p}: {e}") from e
        raw.setdefault("name", p.stem)
        try:
            return cls.model_validate(raw)
        except ValidationError as e:
            raise ParameterError(f"invalid scenario {p}: {e}") from e


@dataclass
class SimulatedTrial:
    dataset: TrialDataset
    y_m: np.ndarray
    y_nm: np.ndarray
    mu_m: np.ndarray
    mu_nm: np.ndarray


@dataclass
class ReplicationResult:
    rep_index: int
    estimates: dict[Method, EfficacyEstimate] = field(default_factory=dict)
    failed: bool = False
    error: str = ""

    def rows(self) -> list[dict]:
        if self.failed:
            return [{"rep": self.rep_index, "method": "", "failed": True, "error": self.error}]
        return [{"rep": self.rep_index, **est.to_row(), "failed": False, "error": ""} for est in self.estimates.values()]


@dataclass
class SimSummary:
    config: ScenarioConfig
    summary: pd.DataFrame
    replications: pd.DataFrame
    n_failed: int

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        summary_path = out / "summary.csv"
        reps_path = out / "replications.csv"
        self.summary.to_csv(summary_path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        self.replications.to_csv(reps_path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        return summary_path, reps_path


def calibrate_rates(cfg: ScenarioConfig) -> tuple[float, float]:
    """(kappa, phi) giving placebo-arm mean ``total_mean`` and malaria fraction ``s``."""
    denom = 1.0 - cfg.p_g * cfg.nu
    if denom <= 0:
        raise ParameterError("1 - p_g * nu must be positive")
    return cfg.s * cfg.total_mean / denom, (1.0 - cfg.s) * cfg.total_mean


def _mean_one_lognormal(sd: float, size: int, rng: np.random.Generator) -> np.ndarray:
    return np.exp(sd * rng.standard_normal(size) - sd**2 / 2.0)


def _subject_means(
    cfg: ScenarioConfig, kappa: float, phi: float, z: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    size = z.shape[0]
    g = (rng.random(size) < cfg.p_g).astype(int)
    x = rng.standard_normal(size)
    keep_nu = (1.0 - cfg.nu) * _mean_one_lognormal(cfg.effi_sd, size, rng)
    keep_tau = (1.0 - cfg.tau) * _mean_one_lognormal(cfg.effi_sd, size, rng)
    bm, bnm = cfg.covariate_effect_m, cfg.covariate_effect_nm
    x_m = np.exp(bm * x - bm**2 / 2.0)
    x_nm = np.exp(bnm * x - bnm**2 / 2.0)
    eps_m = _mean_one_lognormal(cfg.noise_sd, size, rng)
    eps_nm = _mean_one_lognormal(cfg.noise_sd, size, rng)
    mu_m = kappa * keep_nu**g * keep_tau**z * x_m * eps_m
    mu_nm = phi * (1.0 - cfg.eta) ** z * x_nm * eps_nm
    return g, x, mu_m, mu_nm


def nb_copula_pair(
    mu_m: np.ndarray | float,
    mu_nm: np.ndarray | float,
    r: float,
    rho: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Negative-binomial pair (variance mu + mu^2/r) coupled by a Gaussian copula."""
    mu_m = np.atleast_1d(np.asarray(mu_m, dtype=float))
    mu_nm = np.atleast_1d(np.asarray(mu_nm, dtype=float))
    e1 = rng.standard_normal(mu_m.shape)
    e2 = rng.standard_normal(mu_m.shape)
    u1 = np.clip(norm.cdf(e1), 0.0, QUANTILE_CAP)
    u2 = np.clip(norm.cdf(rho * e1 + np.sqrt(1.0 - rho**2) * e2), 0.0, QUANTILE_CAP)
    return _nb_quantile(u1, mu_m, r), _nb_quantile(u2, mu_nm, r)


def _nb_quantile(u: np.ndarray, mu: np.ndarray, r: float) -> np.ndarray:
    positive = mu > 0
    safe_mu = np.where(positive, mu, 1.0)
    y = nbinom.ppf(u, n=r, p=r / (r + safe_mu))
    return np.where(positive, np.maximum(y, 0.0), 0.0).astype(np.int64)


def draw_subject(
    cfg: ScenarioConfig, kappa: float, phi: float, z: int, rng: np.random.Generator, site_id: str = "1"
) -> SubjectRecord:
    g, x, mu_m, mu_nm = _subject_means(cfg, kappa, phi, np.array([int(z)]), rng)
    y_m, y_nm = nb_copula_pair(mu_m, mu_nm, cfg.r, cfg.rho, rng)
    return SubjectRecord(
        site_id=site_id, z=int(z), g=int(g[0]), covariates=(float(x[0]),), y=int(y_m[0] + y_nm[0])
    )


def replication_rng(seed: int, rep_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rep_index,)))


def draw_trial(cfg: ScenarioConfig, kappa: float, phi: float, rep_index: int) -> SimulatedTrial:
    """Arms alternate (n/2 each); with J > 1 sites are filled round-robin by arm pair."""
    rng = replication_rng(cfg.seed, rep_index)
    idx = np.arange(cfg.n)
    z = idx % 2
    site = (idx // 2) % cfg.J + 1
    g, x, mu_m, mu_nm = _subject_means(cfg, kappa, phi, z, rng)
    y_m, y_nm = nb_copula_pair(mu_m, mu_nm, cfg.r, cfg.rho, rng)
    ds = TrialDataset.from_arrays(site.astype(str), z, g, x, y=y_m + y_nm)
    return SimulatedTrial(dataset=ds, y_m=y_m, y_nm=y_nm, mu_m=mu_m, mu_nm=mu_nm)


def empirical_specificity(trial: SimulatedTrial) -> float:
    """Share of placebo-arm fevers that are malaria-attributable."""
    placebo = trial.dataset.z == 0
    total = float(np.sum(trial.y_m[placebo] + trial.y_nm[placebo]))
    if total == 0:
        return float("nan")
    return float(np.sum(trial.y_m[placebo])) / total


def run_replication(cfg: ScenarioConfig, kappa: float, phi: float, rep_index: int) -> ReplicationResult:
    trial = draw_trial(cfg, kappa, phi, rep_index)
    try:
        estimates = estimate_count(
            trial.dataset,
            cfg.estimators,
            s=cfg.s,
            alpha=cfg.alpha,
            alpha0=cfg.alpha0,
            alpha_tilde=cfg.alpha_tilde,
            p_z=cfg.p_z,
        )
    except (MfdError, np.linalg.LinAlgError) as e:
        log.bind(scenario=cfg.name, rep=rep_index).warning("replication failed: {}", e)
        return ReplicationResult(rep_index=rep_index, failed=True, error=f"{type(e).__name__}: {e}")
    return ReplicationResult(rep_index=rep_index, estimates=estimates)


def _trimmed_rmse(err: np.ndarray) -> float:
    if err.size == 0:
        return float("nan")
    return float(np.sqrt(np.mean(trimboth(np.sort(err), TRIM_FRACTION) ** 2)))


def summarize(cfg: ScenarioConfig, replications: pd.DataFrame) -> pd.DataFrame:
    """Per-estimator bias, RMSE, coverage and power over successful replications."""
    failed_reps = int(replications.loc[replications["failed"], "rep"].nunique())
    ok = replications.loc[~replications["failed"]].copy()
    ok["err"] = ok["tau_hat"] - cfg.tau
    ok["covers"] = (ok["ci_lower"] <= cfg.tau) & (cfg.tau <= ok["ci_upper"])
    ok["rejects"] = (ok["ci_lower"] > 0.0) | (ok["ci_upper"] < 0.0)

    rows = []
    for method in cfg.estimators:
        grp = ok.loc[ok["method"] == str(method)]
        err = grp["err"].to_numpy(dtype=float)
        mean = float(grp["tau_hat"].mean()) if len(grp) else float("nan")
        bias = mean - cfg.tau
        rows.append(
            {
                "scenario": cfg.name,
                "estimator": str(method),
                "n": cfg.n,
                "J": cfg.J,
                "tau": cfg.tau,
                "nu": cfg.nu,
                "eta": cfg.eta,
                "s": cfg.s,
                "prop_abs_bias": abs(bias) / abs(cfg.tau) if cfg.tau != 0 else float("nan"),
                "bias": bias,
                "rmse": float(np.sqrt(np.mean(err**2))) if err.size else float("nan"),
                "rmse_trimmed": _trimmed_rmse(err),
                "coverage": float(grp["covers"].mean()) if len(grp) else float("nan"),
                "power": float(grp["rejects"].mean()) if len(grp) else float("nan"),
                "mean": mean,
                "median": float(grp["tau_hat"].median()) if len(grp) else float("nan"),
                "n_rep": int(len(grp)),
                "n_failed": failed_reps,
            }
        )
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def run_study(cfg: ScenarioConfig, jobs: int = 1) -> SimSummary:
    kappa, phi = calibrate_rates(cfg)
    log.bind(scenario=cfg.name, n=cfg.n, n_sim=cfg.n_sim, jobs=jobs).info(
        "starting study kappa={:.4f} phi={:.4f}", kappa, phi
    )
    results = Parallel(n_jobs=jobs)(delayed(run_replication)(cfg, kappa, phi, k) for k in range(cfg.n_sim))
    results = sorted(results, key=lambda res: res.rep_index)
    n_failed = sum(res.failed for res in results)
    if n_failed == len(results):
        log_and_raise(log, EstimationError(f"all {n_failed} replications failed for scenario {cfg.name}"))
    if n_failed:
        log.bind(scenario=cfg.name).warning("{} of {} replications failed", n_failed, len(results))

    reps = pd.DataFrame([row for res in results for row in res.rows()])
    for col in ("tau_hat", "se", "ci_lower", "ci_upper"):
        if col not in reps:
            reps[col] = np.nan
    reps.insert(0, "scenario", cfg.name)
    reps = reps[["scenario", "rep", "method", "tau_hat", "se", "ci_lower", "ci_upper", "flags", "failed", "error"]]
    summary = summarize(cfg, reps)
    log.bind(scenario=cfg.name).info("study finished with {} failed replications", n_failed)
    return SimSummary(config=cfg, summary=summary, replications=reps, n_failed=n_failed)


def study_grid(base: ScenarioConfig, **axes: Iterable) -> list[ScenarioConfig]:
    """Cartesian product of the given field values applied on top of ``base``.

    Example: ``study_grid(base, tau=[0.3, 0.5], n=[1000, 2000])`` yields four configs.
    """
    unknown = set(axes) - set(ScenarioConfig.model_fields)
    if unknown:
        raise ParameterError(f"unknown scenario fields: {', '.join(sorted(unknown))}")
    keys = list(axes)
    out = []
    for values in itertools.product(*(list(axes[k]) for k in keys)):
        update = dict(zip(keys, values))
        suffix = "-".join(f"{k}{v}" for k, v in update.items())
        data = {**base.model_dump(), **update, "name": f"{base.name}-{suffix}" if suffix else base.name}
        try:
            out.append(ScenarioConfig.model_validate(data))
        except ValidationError as e:
            raise ParameterError(f"invalid grid point {update}: {e}") from e
    return out
