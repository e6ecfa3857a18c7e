"""Trial data model, CSV ingestion and validation.

One row per subject. Count trials use the header ``site,z,g,x1,...,xd,y``
and time-to-event trials ``site,z,g,x1,...,xd,time,event``. Site ids are
arbitrary strings mapped to dense 0-based indices in order of first
appearance; that order fixes the site-indicator column order downstream.

Exports:
- load_csv(path, outcome_kind) -> TrialDataset
- write_csv(ds, path)
- validate(ds) -> ValidationReport
- cell_summaries(ds) -> CellSummary
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal, Sequence

import numpy as np
import pandas as pd

from .core.errors import DataValidationError, PositivityError, log_and_raise
from .core.logging import get_logger


log = get_logger(__name__)

OutcomeKind = Literal["count", "survival"]
OUTCOME_KINDS: tuple[str, ...] = ("count", "survival")
CELLS: tuple[tuple[int, int], ...] = ((1, 1), (1, 0), (0, 1), (0, 0))
FLOAT_FORMAT = "%.12g"


@dataclass(frozen=True)
class SubjectRecord:
    site_id: str
    z: int
    g: int
    covariates: tuple[float, ...]
    y: int | None = None
    time: float | None = None
    event: int | None = None


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TrialDataset:
    """Validated subject-level trial data held as column arrays.

    Arrays are read-only after construction so one dataset can be shared
    across threads and processes.
    """

    site_labels: tuple[str, ...]
    site: np.ndarray
    z: np.ndarray
    g: np.ndarray
    x: np.ndarray
    outcome_kind: OutcomeKind
    y: np.ndarray | None = None
    time: np.ndarray | None = None
    event: np.ndarray | None = None
    covariate_names: tuple[str, ...] = field(default=())

    @classmethod
    def from_arrays(
        cls,
        site: Sequence,
        z: Sequence,
        g: Sequence,
        x: np.ndarray | Sequence | None = None,
        *,
        y: Sequence | None = None,
        time: Sequence | None = None,
        event: Sequence | None = None,
    ) -> "TrialDataset":
        labels_raw = [str(s) for s in site]
        n = len(labels_raw)
        site_labels: list[str] = []
        index: dict[str, int] = {}
        for s in labels_raw:
            if s not in index:
                index[s] = len(site_labels)
                site_labels.append(s)
        site_idx = np.fromiter((index[s] for s in labels_raw), dtype=np.int64, count=n)

        z_arr = np.asarray(z, dtype=float).reshape(-1)
        g_arr = np.asarray(g, dtype=float).reshape(-1)
        if x is None:
            x_arr = np.zeros((n, 0), dtype=float)
        else:
            x_arr = np.asarray(x, dtype=float)
            if x_arr.ndim == 1:
                x_arr = x_arr.reshape(-1, 1)
        if z_arr.shape[0] != n or g_arr.shape[0] != n or x_arr.shape[0] != n:
            raise DataValidationError("site, z, g and covariate arrays differ in length")
        if n == 0:
            raise DataValidationError("dataset has no records")
        for name, arr in (("z", z_arr), ("g", g_arr)):
            if not np.all((arr == 0) | (arr == 1)):
                raise DataValidationError(f"{name} must be binary (0/1)")
        if not np.all(np.isfinite(x_arr)):
            raise DataValidationError("covariates must be finite")

        y_arr = t_arr = e_arr = None
        if y is not None:
            kind: OutcomeKind = "count"
            y_arr = np.asarray(y, dtype=float).reshape(-1)
            if y_arr.shape[0] != n:
                raise DataValidationError("outcome length differs from records")
            if not np.all(np.isfinite(y_arr)) or np.any(y_arr < 0) or np.any(y_arr != np.round(y_arr)):
                raise DataValidationError("count outcome must be a nonnegative integer")
            y_arr = _readonly(y_arr)
        elif time is not None and event is not None:
            kind = "survival"
            t_arr = np.asarray(time, dtype=float).reshape(-1)
            e_arr = np.asarray(event, dtype=float).reshape(-1)
            if t_arr.shape[0] != n or e_arr.shape[0] != n:
                raise DataValidationError("survival arrays differ in length from records")
            if not np.all(np.isfinite(t_arr)) or np.any(t_arr <= 0):
                raise DataValidationError("survival time must be positive")
            if not np.all((e_arr == 0) | (e_arr == 1)):
                raise DataValidationError("event must be binary (0/1)")
            t_arr = _readonly(t_arr)
            e_arr = _readonly(e_arr.astype(np.int8))
        else:
            raise DataValidationError("either y or (time, event) must be given")

        d = x_arr.shape[1]
        return cls(
            site_labels=tuple(site_labels),
            site=_readonly(site_idx),
            z=_readonly(z_arr.astype(np.int8)),
            g=_readonly(g_arr.astype(np.int8)),
            x=_readonly(np.ascontiguousarray(x_arr)),
            outcome_kind=kind,
            y=y_arr,
            time=t_arr,
            event=e_arr,
            covariate_names=tuple(f"x{k + 1}" for k in range(d)),
        )

    @property
    def n(self) -> int:
        return int(self.z.shape[0])

    @property
    def d(self) -> int:
        return int(self.x.shape[1])

    @property
    def n_sites(self) -> int:
        return len(self.site_labels)

    @property
    def site_sizes(self) -> np.ndarray:
        """I_j per site, in dense-index order."""
        return np.bincount(self.site, minlength=self.n_sites)

    @property
    def site_prevalence(self) -> np.ndarray:
        """Observed p_{j,n}(G=1) per site."""
        return np.bincount(self.site, weights=self.g, minlength=self.n_sites) / self.site_sizes

    @property
    def f_y(self) -> np.ndarray:
        if self.y is None:
            raise DataValidationError("dataset has no count outcome")
        return self.y

    def records(self) -> Iterator[SubjectRecord]:
        for i in range(self.n):
            yield SubjectRecord(
                site_id=self.site_labels[self.site[i]],
                z=int(self.z[i]),
                g=int(self.g[i]),
                covariates=tuple(float(v) for v in self.x[i]),
                y=int(self.y[i]) if self.y is not None else None,
                time=float(self.time[i]) if self.time is not None else None,
                event=int(self.event[i]) if self.event is not None else None,
            )

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(
            {
                "site": [self.site_labels[j] for j in self.site],
                "z": self.z.astype(int),
                "g": self.g.astype(int),
            }
        )
        for k, name in enumerate(self.covariate_names):
            df[name] = self.x[:, k]
        if self.outcome_kind == "count":
            df["y"] = self.f_y.astype(np.int64)
        else:
            df["time"] = self.time
            df["event"] = self.event.astype(int)
        return df


@dataclass
class SiteReport:
    site_id: str
    n: int
    prevalence: float
    z_fraction: float
    cell_counts: dict[tuple[int, int], int]

    @property
    def positivity(self) -> bool:
        return all(c > 0 for c in self.cell_counts.values())


@dataclass
class ValidationReport:
    sites: list[SiteReport]

    @property
    def empty_cells(self) -> list[tuple[str, int, int]]:
        return [(s.site_id, z, g) for s in self.sites for (z, g), c in s.cell_counts.items() if c == 0]

    @property
    def passed(self) -> bool:
        return all(s.positivity for s in self.sites)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for s in self.sites:
            row = {
                "site": s.site_id,
                "n": s.n,
                "prevalence": s.prevalence,
                "z_fraction": s.z_fraction,
                "positivity": s.positivity,
            }
            for (z, g), c in s.cell_counts.items():
                row[f"n_z{z}g{g}"] = c
            rows.append(row)
        return pd.DataFrame(rows)


@dataclass
class CellSummary:
    """Per-site, per-(z, g) cell statistics plus per-site prevalence.

    For count data ``cells`` has columns site, z, g, n, mean_y; for survival
    data it has site, z, g, n, events, person_time.
    """

    cells: pd.DataFrame
    prevalence: pd.Series


def validate(ds: TrialDataset) -> ValidationReport:
    """Report per-site positivity, prevalence and arm balance. Never raises."""
    counts = np.zeros((ds.n_sites, 2, 2), dtype=np.int64)
    np.add.at(counts, (ds.site, ds.z, ds.g), 1)
    sizes = ds.site_sizes
    prevalence = ds.site_prevalence
    z_frac = np.bincount(ds.site, weights=ds.z, minlength=ds.n_sites) / sizes
    sites = [
        SiteReport(
            site_id=label,
            n=int(sizes[j]),
            prevalence=float(prevalence[j]),
            z_fraction=float(z_frac[j]),
            cell_counts={(z, g): int(counts[j, z, g]) for z, g in CELLS},
        )
        for j, label in enumerate(ds.site_labels)
    ]
    report = ValidationReport(sites=sites)
    for site_id, z, g in report.empty_cells:
        log.bind(site=site_id, z=z, g=g).warning("empty (z, g) cell")
    return report


def require_positivity(ds: TrialDataset) -> ValidationReport:
    report = validate(ds)
    if not report.passed:
        cells = ", ".join(f"site={s} z={z} g={g}" for s, z, g in report.empty_cells)
        log_and_raise(log, PositivityError(f"positivity violated; empty cells: {cells}"))
    return report


def cell_summaries(ds: TrialDataset) -> CellSummary:
    require_positivity(ds)
    df = pd.DataFrame({"site": ds.site, "z": ds.z.astype(int), "g": ds.g.astype(int)})
    grouped_cols = ["site", "z", "g"]
    if ds.outcome_kind == "count":
        df["y"] = ds.f_y
        cells = df.groupby(grouped_cols)["y"].agg(n="size", mean_y="mean")
    else:
        df["event"] = ds.event
        df["time"] = ds.time
        cells = df.groupby(grouped_cols).agg(
            n=("event", "size"), events=("event", "sum"), person_time=("time", "sum")
        )
    cells = cells.reset_index()
    cells["site"] = [ds.site_labels[j] for j in cells["site"]]
    prevalence = pd.Series(ds.site_prevalence, index=list(ds.site_labels), name="prevalence")
    return CellSummary(cells=cells, prevalence=prevalence)


_PARSER_LINE = re.compile(r"line (\d+)")


def _expected_header(columns: list[str], outcome_kind: OutcomeKind) -> tuple[list[str], list[str]]:
    tail = ["y"] if outcome_kind == "count" else ["time", "event"]
    if columns[:3] != ["site", "z", "g"] or columns[-len(tail):] != tail:
        raise DataValidationError(
            f"header must be site,z,g,x1..xd,{','.join(tail)}; got {','.join(columns)}", line=1
        )
    covs = columns[3 : len(columns) - len(tail)]
    expected = [f"x{k + 1}" for k in range(len(covs))]
    if covs != expected:
        raise DataValidationError(f"covariate columns must be named {','.join(expected) or '(none)'}", line=1)
    return covs, tail


def _row_lines(path: Path, n_rows: int) -> np.ndarray:
    """1-based file line of each data row; blank lines are skipped by the reader."""
    with path.open(encoding="utf-8") as fh:
        filled = [i for i, line in enumerate(fh, start=1) if line.strip()]
    rows = np.asarray(filled[1:], dtype=int)
    if rows.size != n_rows:
        # quoted newlines or similar; fall back to header-on-line-1 numbering
        return np.arange(2, n_rows + 2)
    return rows


def _parse_numeric(df: pd.DataFrame, col: str, lines: np.ndarray) -> np.ndarray:
    raw = df[col].astype(str).str.strip()
    missing = raw == ""
    if missing.any():
        idx = int(np.flatnonzero(missing.to_numpy())[0])
        raise DataValidationError(f"missing value in column {col!r}", line=int(lines[idx]))
    values = pd.to_numeric(raw, errors="coerce")
    bad = values.isna() | ~np.isfinite(values.to_numpy(dtype=float, na_value=np.nan))
    if bad.any():
        idx = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataValidationError(f"non-numeric value {raw.iloc[idx]!r} in column {col!r}", line=int(lines[idx]))
    return values.to_numpy(dtype=float)


def _check_binary(values: np.ndarray, col: str, lines: np.ndarray) -> None:
    bad = ~((values == 0) | (values == 1))
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise DataValidationError(f"{col} must be 0 or 1, got {values[idx]:g}", line=int(lines[idx]))


def load_csv(path: str | Path, outcome_kind: OutcomeKind, check_positivity: bool = True) -> TrialDataset:
    """Read and validate a trial CSV. Row order is preserved."""
    if outcome_kind not in OUTCOME_KINDS:
        raise DataValidationError(f"outcome_kind must be one of {OUTCOME_KINDS}")
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"input file not found: {path}")
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8", skip_blank_lines=True)
    except pd.errors.ParserError as e:
        m = _PARSER_LINE.search(str(e))
        raise DataValidationError(f"malformed row: {e}", line=int(m.group(1)) if m else None) from e
    except pd.errors.EmptyDataError as e:
        raise DataValidationError("empty file") from e

    columns = [c.strip() for c in df.columns]
    df.columns = columns
    covs, _ = _expected_header(columns, outcome_kind)
    lines = _row_lines(path, len(df))

    sites = df["site"].astype(str).str.strip()
    if (sites == "").any():
        idx = int(np.flatnonzero((sites == "").to_numpy())[0])
        raise DataValidationError("missing site id", line=int(lines[idx]))
    z = _parse_numeric(df, "z", lines)
    _check_binary(z, "z", lines)
    g = _parse_numeric(df, "g", lines)
    _check_binary(g, "g", lines)
    x = np.column_stack([_parse_numeric(df, c, lines) for c in covs]) if covs else np.zeros((len(df), 0))

    if outcome_kind == "count":
        y = _parse_numeric(df, "y", lines)
        bad = (y < 0) | (y != np.round(y))
        if bad.any():
            idx = int(np.flatnonzero(bad)[0])
            raise DataValidationError(f"count must be a nonnegative integer, got {y[idx]:g}", line=int(lines[idx]))
        ds = TrialDataset.from_arrays(sites.tolist(), z, g, x, y=y)
    else:
        t = _parse_numeric(df, "time", lines)
        bad = t <= 0
        if bad.any():
            idx = int(np.flatnonzero(bad)[0])
            raise DataValidationError(f"time must be positive, got {t[idx]:g}", line=int(lines[idx]))
        e = _parse_numeric(df, "event", lines)
        _check_binary(e, "event", lines)
        ds = TrialDataset.from_arrays(sites.tolist(), z, g, x, time=t, event=e)

    log.bind(path=str(path), n=ds.n, sites=ds.n_sites, d=ds.d).debug("loaded trial csv")
    if check_positivity:
        require_positivity(ds)
    return ds


def write_csv(ds: TrialDataset, path: str | Path) -> Path:
    """Write ``ds`` in the ingestion schema; floats use 12 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ds.to_frame().to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n", encoding="utf-8")
    return path
