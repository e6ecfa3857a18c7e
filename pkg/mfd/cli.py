"""Command-line front end: ``estimate``, ``simulate`` and ``report``.

Exit codes: 0 success, 2 usage or validation failure, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .core.config import get_settings
from .core.errors import DataValidationError, EstimationError, MfdError, ParameterError
from .core.logging import get_logger
from .estimators import DEFAULT_ALPHA, DEFAULT_ALPHA0, DEFAULT_ALPHA_TILDE, DEFAULT_P_Z, estimate_count
from .sim_engine import SUMMARY_COLUMNS, ScenarioConfig, run_study
from .survival_mfd import estimate_survival
from .trial_data import FLOAT_FORMAT, load_csv


log = get_logger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3

ESTIMATE_COLUMNS = ["method", "tau_hat", "se", "ci_lower", "ci_upper", "flags"]
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)
QUANTILE_COLUMNS = ["scenario", "estimator", "n_rep", "q05", "q25", "q50", "q75", "q95", "mean", "median"]


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    version: str
    inputs: dict[str, str] = field(default_factory=dict)
    env_overrides: dict[str, int] = field(default_factory=dict)
    created_utc: str = ""

    def write(self, out_dir: Path) -> Path:
        if not self.created_utc:
            self.created_utc = datetime.now(timezone.utc).isoformat(timespec="seconds").replace("+00:00", "Z")
        path = out_dir / "manifest.json"
        with path.open("w", encoding="utf-8") as f:
            json.dump(asdict(self), f, ensure_ascii=True, indent=2, default=str)
        return path


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _env_overrides() -> dict[str, int]:
    s = get_settings()
    return {k: v for k, v in (("MFD_SEED", s.MFD_SEED), ("MFD_JOBS", s.MFD_JOBS)) if v is not None}


def _out_dir(arg: str | None) -> Path:
    out = Path(arg or get_settings().MFD_OUTPUT_DIR)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_interval(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError as e:
        raise ParameterError(f"--s-interval expects 'lo,hi', got {text!r}") from e
    return lo, hi


def cmd_estimate(args: argparse.Namespace) -> int:
    estimators = [m.strip() for m in args.estimators.split(",") if m.strip()]
    if not estimators:
        raise ParameterError("--estimators is empty")
    if args.s is not None and args.s_interval is not None:
        raise ParameterError("give either --s or --s-interval, not both")
    s_interval = _parse_interval(args.s_interval) if args.s_interval else None
    if "s_corrected" in estimators and args.s is None and s_interval is None:
        raise ParameterError("s_corrected requires --s or --s-interval")

    ds = load_csv(args.input, args.outcome)
    if args.outcome == "count":
        results = estimate_count(
            ds,
            estimators,
            s=args.s,
            s_interval=s_interval,
            alpha=args.alpha,
            alpha0=args.alpha0,
            alpha_tilde=args.alpha_tilde,
            beta=args.beta,
            p_z=args.pz,
        )
    else:
        results = estimate_survival(ds, estimators, alpha=args.alpha, alpha0=args.alpha0, alpha_tilde=args.alpha_tilde)

    out = _out_dir(args.out)
    table = pd.DataFrame([est.to_row() for est in results.values()], columns=ESTIMATE_COLUMNS)
    table.to_csv(out / "estimates.csv", index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    RunManifest(
        command="estimate",
        config={
            "outcome": args.outcome,
            "estimators": estimators,
            "s": args.s,
            "s_interval": list(s_interval) if s_interval else None,
            "alpha": args.alpha,
            "alpha0": args.alpha0,
            "alpha_tilde": args.alpha_tilde,
            "beta": args.beta,
            "p_z": args.pz,
        },
        seed=None,
        version=get_settings().APP_VERSION,
        inputs={str(args.input): file_digest(args.input)},
        env_overrides=_env_overrides(),
    ).write(out)
    print(table.to_string(index=False))
    log.bind(out=str(out), n=ds.n).info("wrote {} estimates", len(table))
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    settings = get_settings()
    cfg = ScenarioConfig.from_file(args.config)
    update = {}
    if settings.MFD_SEED is not None:
        update["seed"] = settings.MFD_SEED
    if args.n_sim is not None:
        update["n_sim"] = args.n_sim
    if update:
        cfg = ScenarioConfig.model_validate({**cfg.model_dump(), **update})
    jobs = args.jobs if args.jobs is not None else (settings.MFD_JOBS or 1)
    if jobs == 0:
        raise ParameterError("--jobs must be nonzero")

    result = run_study(cfg, jobs=jobs)
    out = _out_dir(args.out)
    result.write(out)
    RunManifest(
        command="simulate",
        config=cfg.model_dump(mode="json"),
        seed=cfg.seed,
        version=settings.APP_VERSION,
        inputs={str(args.config): file_digest(args.config)},
        env_overrides={**_env_overrides(), "jobs": jobs},
    ).write(out)
    print(result.summary.to_string(index=False))
    return EXIT_OK


def _read_study(path: Path) -> tuple[pd.DataFrame, pd.DataFrame]:
    summary_path = path / "summary.csv"
    reps_path = path / "replications.csv"
    if not summary_path.is_file() or not reps_path.is_file():
        raise DataValidationError(f"{path} has no summary.csv/replications.csv")
    summary = pd.read_csv(summary_path)
    if list(summary.columns) != SUMMARY_COLUMNS:
        raise DataValidationError(f"{summary_path} does not match the study summary schema")
    reps = pd.read_csv(reps_path)
    missing = {"scenario", "method", "tau_hat", "failed"} - set(reps.columns)
    if missing:
        raise DataValidationError(f"{reps_path} lacks columns: {', '.join(sorted(missing))}")
    return summary, reps


def estimate_quantiles(reps: pd.DataFrame) -> pd.DataFrame:
    """Box-plot statistics of tau_hat per scenario and estimator over successful replications."""
    ok = reps.loc[~reps["failed"].astype(bool)]
    rows = []
    for (scenario, method), grp in ok.groupby(["scenario", "method"], sort=False):
        values = grp["tau_hat"].to_numpy(dtype=float)
        q = np.quantile(values, QUANTILES)
        rows.append(
            {
                "scenario": scenario,
                "estimator": method,
                "n_rep": int(values.size),
                **{col: float(v) for col, v in zip(QUANTILE_COLUMNS[3:8], q)},
                "mean": float(np.mean(values)),
                "median": float(np.median(values)),
            }
        )
    return pd.DataFrame(rows, columns=QUANTILE_COLUMNS)


def cmd_report(args: argparse.Namespace) -> int:
    dirs = [Path(p) for p in args.inputs]
    if not dirs:
        raise ParameterError("--inputs needs at least one study directory")
    summaries, reps = [], []
    for d in dirs:
        s, r = _read_study(d)
        summaries.append(s)
        reps.append(r)
    combined = pd.concat(summaries, ignore_index=True)
    quantiles = estimate_quantiles(pd.concat(reps, ignore_index=True))

    out = _out_dir(args.out)
    combined.to_csv(out / "combined_summary.csv", index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    quantiles.to_csv(out / "estimate_quantiles.csv", index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    RunManifest(
        command="report",
        config={"inputs": [str(d) for d in dirs]},
        seed=None,
        version=get_settings().APP_VERSION,
        inputs={str(d / "summary.csv"): file_digest(d / "summary.csv") for d in dirs},
        env_overrides=_env_overrides(),
    ).write(out)
    print(combined.to_string(index=False))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfd", description="Mendelian factorial design vaccine-efficacy tools")
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="Estimate vaccine efficacy from a trial CSV")
    est.add_argument("--input", required=True, help="Trial CSV (site,z,g,x1..xd,y or time,event)")
    est.add_argument("--outcome", choices=("count", "survival"), default="count")
    est.add_argument("--estimators", default="mfd,naive,bounded", help="Comma-separated estimator names")
    est.add_argument("--s", type=float, default=None, help="Known case specificity for s_corrected")
    est.add_argument("--s-interval", default=None, help="Specificity interval 'lo,hi' for s_corrected")
    est.add_argument(
        "--beta", type=float, default=0.0, help="Miss probability of --s-interval; CI level becomes 1 - alpha - beta"
    )
    est.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    est.add_argument("--alpha0", type=float, default=DEFAULT_ALPHA0)
    est.add_argument("--alpha-tilde", type=float, default=DEFAULT_ALPHA_TILDE)
    est.add_argument("--pz", type=float, default=DEFAULT_P_Z, help="Known randomization probability P(Z=1)")
    est.add_argument("--out", default=None, help="Output directory")
    est.set_defaults(func=cmd_estimate)

    sim = sub.add_parser("simulate", help="Run a Monte Carlo study from a scenario TOML file")
    sim.add_argument("--config", required=True)
    sim.add_argument("--out", default=None)
    sim.add_argument("--jobs", type=int, default=None, help="Parallel replication workers (-1 for all cores)")
    sim.add_argument("--n-sim", type=int, default=None, help="Override the scenario's replication count")
    sim.set_defaults(func=cmd_simulate)

    rep = sub.add_parser("report", help="Combine study outputs and compute estimate quantiles")
    rep.add_argument("--inputs", nargs="*", default=[], help="Study output directories")
    rep.add_argument("--out", default=None)
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (DataValidationError, ParameterError) as e:
        log.error("{} failed: {}", args.command, e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (EstimationError, MfdError) as e:
        log.error("{} failed: {}", args.command, e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
