"""Returns panels: ingestion, covariance shrinkage, calibration, simulation,
and walk-forward splitting.

A panel is a date-indexed T x N matrix of simple per-period returns
(0.01 = 1%). Ingestion is strict: blank or unparseable cells and
non-monotone dates are rejected with the offending row number, never
imputed. Synthetic panels are drawn from a multivariate normal via a
Cholesky factor using numpy's seeded PCG64 generator (exact stream equality
across numpy versions is not a contract).
"""

from __future__ import annotations

import csv
import datetime as dt
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, DataError, DegenerateDataError

DATE_FMT = "%Y-%m-%d"


@dataclass
class ReturnsPanel:
    """Strictly-dated returns matrix: rows are days, columns are assets."""

    dates: list
    assets: list
    returns: np.ndarray

    def __post_init__(self):
        self.returns = np.asarray(self.returns, dtype=float)
        if self.returns.ndim != 2:
            raise DataError(f"returns must be 2-D, got shape {self.returns.shape}")
        if len(self.dates) != self.returns.shape[0]:
            raise DataError(
                f"{len(self.dates)} dates vs {self.returns.shape[0]} return rows"
            )
        if len(self.assets) != self.returns.shape[1]:
            raise DataError(
                f"{len(self.assets)} assets vs {self.returns.shape[1]} return columns"
            )
        for i in range(1, len(self.dates)):
            if self.dates[i] <= self.dates[i - 1]:
                raise DataError(
                    f"dates must be strictly increasing: {self.dates[i]} follows "
                    f"{self.dates[i - 1]}",
                    row=i,
                )
        if not np.isfinite(self.returns).all():
            bad = int(np.argwhere(~np.isfinite(self.returns))[0][0])
            raise DataError("non-finite return value", row=bad)

    @property
    def n_days(self) -> int:
        return self.returns.shape[0]

    @property
    def n_assets(self) -> int:
        return self.returns.shape[1]

    def slice_dates(self, start: dt.date, end: dt.date) -> "ReturnsPanel":
        """Rows with start <= date <= end."""
        idx = [i for i, d in enumerate(self.dates) if start <= d <= end]
        return ReturnsPanel(
            [self.dates[i] for i in idx], list(self.assets), self.returns[idx]
        )

    def index_range(self, start: dt.date, end: dt.date) -> tuple:
        """(first, last+1) row indices of the date interval; empty -> (0, 0)."""
        idx = [i for i, d in enumerate(self.dates) if start <= d <= end]
        if not idx:
            return (0, 0)
        return (idx[0], idx[-1] + 1)

    def years(self) -> list:
        seen = []
        for d in self.dates:
            if not seen or seen[-1] != d.year:
                seen.append(d.year)
        return sorted(set(seen))


@dataclass
class MvnCalibration:
    """Moments of a multivariate-normal daily-returns regime."""

    mu: np.ndarray
    sigma: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if self.mu.ndim != 1 or self.sigma.shape != (self.mu.size, self.mu.size):
            raise ContractError(
                f"mu {self.mu.shape} and sigma {self.sigma.shape} are inconsistent"
            )
        if not np.allclose(self.sigma, self.sigma.T, rtol=1e-10, atol=1e-14):
            raise ContractError("sigma must be symmetric")


@dataclass(frozen=True)
class WalkForwardSplit:
    """Contiguous, non-overlapping train < validation < test date intervals."""

    train: tuple
    val: tuple
    test: tuple
    label: str = ""


def load_panel(path: str) -> ReturnsPanel:
    """Read a returns CSV: header ``date,ASSET1,...``, ISO dates, decimal
    fractions. Any malformed cell rejects the file with its row number."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file: missing header") from None
        if not header or header[0].strip().lower() != "date":
            raise DataError(f"first header column must be 'date', got {header[:1]}")
        assets = [h.strip() for h in header[1:]]
        if not assets:
            raise DataError("header names no asset columns")
        dates, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(assets) + 1:
                raise DataError(
                    f"expected {len(assets) + 1} cells, got {len(row)}", row=lineno
                )
            try:
                date = dt.datetime.strptime(row[0].strip(), DATE_FMT).date()
            except ValueError:
                raise DataError(f"unparseable date '{row[0]}'", row=lineno) from None
            if dates and date <= dates[-1]:
                raise DataError(
                    f"date {date} does not increase past {dates[-1]}", row=lineno
                )
            values = []
            for col, cell in enumerate(row[1:], start=1):
                cell = cell.strip()
                if not cell:
                    raise DataError(f"blank cell in column {col}", row=lineno)
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"unparseable return '{cell}' in column {col}", row=lineno
                    ) from None
            if not np.isfinite(values).all():
                raise DataError("non-finite return value", row=lineno)
            dates.append(date)
            rows.append(values)
    if not rows:
        raise DataError("file has a header but no data rows")
    return ReturnsPanel(dates, assets, np.asarray(rows))


def shrink_covariance(sample_cov: np.ndarray, intensity: float) -> np.ndarray:
    """Linear shrinkage toward the scaled identity: (1-d)*S + d*(tr(S)/N)*I.

    Preserves the trace exactly and is positive definite for d > 0 whenever
    S is PSD with positive trace.
    """
    s = np.asarray(sample_cov, dtype=float)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ContractError(f"covariance must be square, got {s.shape}")
    if not np.allclose(s, s.T, rtol=1e-10, atol=1e-14):
        raise ContractError("covariance must be symmetric")
    if not (0.0 <= intensity <= 1.0):
        raise ContractError(f"shrinkage intensity must lie in [0, 1], got {intensity}")
    n = s.shape[0]
    target = (np.trace(s) / n) * np.eye(n)
    return (1.0 - intensity) * s + intensity * target


def calibrate(
    panel: ReturnsPanel,
    period: Optional[tuple] = None,
    delta: float = 0.1,
    label: str = "",
) -> MvnCalibration:
    """Sample mean and shrunk sample covariance of a date interval.

    ``period`` is an inclusive (start, end) date pair; None uses the whole
    panel. Covariance uses the usual ddof=1 sample estimator before
    shrinkage.
    """
    sub = panel if period is None else panel.slice_dates(*period)
    if sub.n_days < 2:
        raise DataError(
            f"period has {sub.n_days} rows; need at least 2 to estimate moments"
        )
    mu = sub.returns.mean(axis=0)
    cov = np.cov(sub.returns, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    sigma = shrink_covariance(cov, delta)
    try:
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise DegenerateDataError(
            "calibrated covariance 'sigma' is not positive definite "
            "(degenerate period); increase the shrinkage intensity delta "
            "or widen the period"
        ) from None
    return MvnCalibration(mu, sigma, label=label or (f"{period[0]}..{period[1]}" if period else "all"))


def business_dates(start: dt.date, count: int) -> list:
    """``count`` consecutive weekdays starting at the first weekday >= start."""
    out = []
    d = start
    while len(out) < count:
        if d.weekday() < 5:
            out.append(d)
        d += dt.timedelta(days=1)
    return out


def simulate_mvn(
    calib: MvnCalibration,
    days: int,
    seed: int,
    start: dt.date = dt.date(2001, 1, 1),
    assets: Optional[Sequence[str]] = None,
) -> ReturnsPanel:
    """Draw ``days`` i.i.d. multivariate-normal return rows.

    Sampling is mu + Z @ chol(sigma)^T with Z standard normal from
    numpy's default (PCG64) generator, so panels are deterministic per seed.
    """
    if days < 1:
        raise ContractError(f"days must be >= 1, got {days}")
    n = calib.mu.size
    try:
        chol = np.linalg.cholesky(calib.sigma)
    except np.linalg.LinAlgError:
        raise DegenerateDataError(
            "covariance 'sigma' is not positive definite; "
            "increase the shrinkage intensity delta"
        ) from None
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((days, n))
    returns = calib.mu[None, :] + z @ chol.T
    if assets is None:
        assets = [f"A{i:03d}" for i in range(n)]
    elif len(assets) != n:
        raise ContractError(f"{len(assets)} asset names for {n} columns")
    return ReturnsPanel(business_dates(start, days), list(assets), returns)


def walk_forward(
    panel: ReturnsPanel, first_train_end: int, step: int = 1
) -> list:
    """Expanding-window yearly splits: one per test year until the panel ends.

    The first split trains on everything through ``first_train_end``,
    validates on the next year and tests on the year after; each subsequent
    split rolls forward by ``step`` years with the training window growing.
    Returns an empty list (with a warning) if the panel span is too short.
    """
    if step < 1:
        raise ContractError(f"step must be >= 1, got {step}")
    years = panel.years()
    splits = []
    train_end_year = first_train_end
    while True:
        val_year = train_end_year + 1
        test_year = train_end_year + 2
        if test_year > years[-1]:
            break
        if val_year in years and test_year in years and train_end_year >= years[0]:
            splits.append(
                WalkForwardSplit(
                    train=(panel.dates[0], dt.date(train_end_year, 12, 31)),
                    val=(dt.date(val_year, 1, 1), dt.date(val_year, 12, 31)),
                    test=(dt.date(test_year, 1, 1), dt.date(test_year, 12, 31)),
                    label=str(test_year),
                )
            )
        train_end_year += step
    if not splits:
        warnings.warn(
            f"panel spans {years[0]}..{years[-1]}; no walk-forward split fits "
            f"first_train_end={first_train_end}",
            stacklevel=2,
        )
    return splits
