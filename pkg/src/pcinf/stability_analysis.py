"""
Stability of the influence structure over time: calendar periods, per-period
influence rankings, their Kendall tau similarity and its exponential decay.
"""

import json
import math
import warnings

import numpy as np
import pandas as pd

from dataclasses import dataclass
from logging import getLogger
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

from scipy.optimize import OptimizeWarning, curve_fit

from .common.errors import (
    ComputationError,
    ConfigError,
    Diagnostic,
    FitError,
    InputError,
    InsufficientDataError,
    UndefinedSimilarityError,
)
from .common.parallel import map_ordered
from .correlation_engine import INDEX_VARIANT, MIN_OBSERVATIONS, STATISTIC_D, STATISTIC_FISHER_Z
from .influence_metrics import (
    OUTGOING,
    InfluenceRanking,
    rank_by_influence,
    stream_stock_influence,
    total_influence,
)
from .market_data import ReturnPanel
from .significance import (
    DEFAULT_LEVEL,
    DEFAULT_MAX_TRIPLES,
    DEFAULT_REPLICATES,
    FISHER,
    SHUFFLE,
    critical_value,
    empirical_thresholds,
)

STAGE = "stability_analysis"

mylogger = getLogger(STAGE)

FREQUENCIES = ("Q", "M", "Y")
DEFAULT_MIN_DAYS = 20
MIN_RANKED_STOCKS = 3
MIN_FIT_INTERVALS = 4

SHORT_PERIOD = "E_SHORT_PERIOD"
SKIPPED_PERIOD = "E_SKIPPED_PERIOD"
FLAT_STOCK = "E_FLAT_STOCK"


@dataclass(frozen=True)
class Period:
    """
    a calendar period; ``first`` and ``stop`` index the panel rows
    """

    label: str
    start: str
    end: str
    first: int
    stop: int

    @property
    def days(self) -> int:
        return self.stop - self.first


@dataclass(frozen=True)
class QuarterCalendar:
    periods: Tuple[Period, ...]
    frequency: str = "Q"
    diagnostics: Tuple[Diagnostic, ...] = ()

    def __len__(self) -> int:
        return len(self.periods)

    def __iter__(self) -> Iterator[Period]:
        return iter(self.periods)

    @property
    def labels(self) -> Tuple[str, ...]:
        return tuple(p.label for p in self.periods)


def quarter_calendar(
    dates: Sequence[str], frequency: str = "Q", min_days: int = DEFAULT_MIN_DAYS
) -> QuarterCalendar:
    """
    splits ISO dates into calendar periods

    Periods with fewer than ``min_days`` trading days are dropped, which
    normally only happens to a partial first or last period.

    :param dates: ascending ISO dates
    :type dates: Sequence[str]
    :param frequency: ``Q`` (quarters), ``M`` (months) or ``Y`` (years)
    :type frequency: str
    :param min_days: minimal trading days per period, defaults to 20
    :type min_days: int
    :return: the calendar
    :rtype: QuarterCalendar
    """
    if frequency not in FREQUENCIES:
        raise ConfigError(f"Unsupported calendar frequency {frequency}", stage=STAGE)

    if not dates:
        return QuarterCalendar((), frequency)

    periods = pd.to_datetime(list(dates), format="%Y-%m-%d").to_period(frequency)

    result: List[Period] = []
    diagnostics: List[Diagnostic] = []

    first = 0
    for i in range(1, len(periods) + 1):
        if i < len(periods) and periods[i] == periods[first]:
            continue

        label = str(periods[first])
        if i - first >= min_days:
            result.append(Period(label, dates[first], dates[i - 1], first, i))
        else:
            detail = f"period {label} dropped: {i - first} trading day(s), {min_days} required"
            mylogger.info(detail, extra={"stage": STAGE})
            diagnostics.append(Diagnostic(STAGE, SHORT_PERIOD, detail))
        first = i

    return QuarterCalendar(tuple(result), frequency, tuple(diagnostics))


@dataclass(frozen=True)
class RankingOptions:
    """
    settings of the per-period pipeline
    """

    method: str = SHUFFLE
    level: float = DEFAULT_LEVEL
    replicates: int = DEFAULT_REPLICATES
    seed: int = 0
    segment_length: Optional[int] = None
    max_triples_per_replicate: int = DEFAULT_MAX_TRIPLES
    tails: int = 2
    filtered: bool = True
    direction: str = OUTGOING
    variant: str = INDEX_VARIANT


@dataclass(frozen=True)
class RankingSeries:
    rankings: Tuple[InfluenceRanking, ...]
    thresholds: Dict[str, float]
    diagnostics: Tuple[Diagnostic, ...] = ()

    @property
    def labels(self) -> Tuple[str, ...]:
        return tuple(r.period for r in self.rankings)


def period_threshold(panel: ReturnPanel, options: RankingOptions) -> Optional[float]:
    """
    the significance cutoff of a period, None when aggregating unfiltered
    """
    if not options.filtered:
        return None

    if options.method == FISHER:
        return critical_value(options.level, options.tails)

    table = empirical_thresholds(
        panel,
        levels=[options.level],
        replicates=options.replicates,
        seed=options.seed,
        max_triples_per_replicate=options.max_triples_per_replicate,
        segment_length=options.segment_length,
        variant=options.variant,
        jobs=1,
    )
    return table.threshold(options.level)


def rank_period(
    panel: ReturnPanel, period: Period, options: RankingOptions
) -> Tuple[Optional[InfluenceRanking], Optional[float], List[Diagnostic]]:
    """
    runs correlations, significance, aggregation and ranking for one period

    :return: the ranking (None if the period was skipped), the threshold and diagnostics
    """
    diagnostics: List[Diagnostic] = []
    window = panel.window(period.first, period.stop)

    flat = np.std(window.returns, axis=0) == 0.0
    if flat.any():
        for ticker in np.array(window.tickers)[flat]:
            detail = f"{ticker} has no price movement in {period.label}"
            diagnostics.append(Diagnostic(STAGE, FLAT_STOCK, detail))
        window = window.select([t for t, f in zip(window.tickers, flat) if not f])

    def skipped(reason: str):
        detail = f"period {period.label} skipped: {reason}"
        mylogger.warning(detail, extra={"stage": STAGE})
        diagnostics.append(Diagnostic(STAGE, SKIPPED_PERIOD, detail))
        return None, None, diagnostics

    if window.n_stocks < MIN_RANKED_STOCKS:
        return skipped(f"{window.n_stocks} stock(s) with price movement, {MIN_RANKED_STOCKS} required")

    if window.n_obs < MIN_OBSERVATIONS:
        return skipped(f"{window.n_obs} observation(s), {MIN_OBSERVATIONS} required")

    try:
        threshold = period_threshold(window, options)
        statistic = STATISTIC_FISHER_Z if options.method == FISHER else STATISTIC_D
        matrix = stream_stock_influence(window, threshold, statistic, options.variant, jobs=1)
    except ComputationError as e:
        return skipped(e.message)

    total = total_influence(matrix, options.direction)
    diagnostics.extend(total.diagnostics)

    if len(total.tickers) < MIN_RANKED_STOCKS:
        return skipped(f"{len(total.tickers)} stock(s) with influence entries, {MIN_RANKED_STOCKS} required")

    return rank_by_influence(total.as_dict(), period.label), threshold, diagnostics


def quarterly_rankings(
    panel: ReturnPanel,
    calendar: QuarterCalendar,
    options: Optional[RankingOptions] = None,
    jobs: Optional[int] = None,
) -> RankingSeries:
    """
    builds one influence ranking per calendar period

    Every period runs the whole pipeline on its own data, including its own
    significance thresholds. Periods are processed in parallel.

    :param panel: the return panel
    :type panel: ReturnPanel
    :param calendar: the periods
    :type calendar: QuarterCalendar
    :param options: pipeline settings
    :type options: Optional[RankingOptions]
    :param jobs: the number of workers
    :type jobs: Optional[int]
    :return: the rankings of all periods that were not skipped
    :rtype: RankingSeries
    """
    options = options or RankingOptions()

    results = map_ordered(lambda period: rank_period(panel, period, options), calendar.periods, jobs)

    rankings: List[InfluenceRanking] = []
    thresholds: Dict[str, float] = {}
    diagnostics: List[Diagnostic] = list(calendar.diagnostics)

    for period, (ranking, threshold, period_diagnostics) in zip(calendar.periods, results):
        diagnostics.extend(period_diagnostics)
        if ranking is None:
            continue
        rankings.append(ranking)
        if threshold is not None:
            thresholds[period.label] = threshold

    mylogger.info(
        "Ranked %d of %d period(s)", len(rankings), len(calendar), extra={"stage": STAGE}
    )

    return RankingSeries(tuple(rankings), thresholds, tuple(diagnostics))


def _merge_count(values: List[int], temp: List[int], left: int, mid: int, right: int) -> int:
    inversions = 0
    i, j, k = left, mid, left

    while i < mid and j < right:
        if values[i] <= values[j]:
            temp[k] = values[i]
            i += 1
        else:
            temp[k] = values[j]
            j += 1
            # every remaining element of the left run is greater
            inversions += mid - i
        k += 1

    temp[k : k + mid - i] = values[i:mid]
    k += mid - i
    temp[k : k + right - j] = values[j:right]
    values[left:right] = temp[left:right]

    return inversions


def count_inversions(sequence: Sequence[int]) -> int:
    """
    number of pairs i < j with sequence[i] > sequence[j], by bottom-up merge sort
    """
    values = list(sequence)
    temp = list(values)
    n = len(values)
    inversions = 0

    width = 1
    while width < n:
        for left in range(0, n - width, 2 * width):
            mid = left + width
            right = min(left + 2 * width, n)
            inversions += _merge_count(values, temp, left, mid, right)
        width *= 2

    return inversions


def kendall_tau(a: InfluenceRanking, b: InfluenceRanking) -> float:
    """
    Kendall tau-a of two rankings on their common tickers

    tau = (concordant - discordant) / (n(n-1)/2), where the discordant pairs
    are the inversions of b's order when listed in a's order.

    :raises UndefinedSimilarityError: if fewer than 2 tickers are common
    """
    positions = b.positions()
    order = [positions[t] for t in a.tickers if t in positions]
    n = len(order)

    if n < 2:
        raise UndefinedSimilarityError(
            f"rankings {a.period} and {b.period} share {n} ticker(s), 2 required", stage=STAGE
        )

    pairs = n * (n - 1) // 2
    discordant = count_inversions(order)
    return (pairs - 2 * discordant) / pairs


@dataclass(frozen=True)
class TauMatrix:
    """
    Kendall tau between periods; undefined entries are NaN
    """

    labels: Tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        q = len(self.labels)
        if self.values.shape != (q, q):
            raise ValueError(f"Expected {q}x{q} values")


def tau_matrix(rankings: Sequence[InfluenceRanking]) -> TauMatrix:
    """
    Kendall tau of every pair of rankings

    :raises InsufficientDataError: with fewer than 2 rankings
    """
    q = len(rankings)
    if q < 2:
        raise InsufficientDataError(f"insufficient quarters: {q} ranking(s), 2 required", stage=STAGE)

    values = np.eye(q)
    for i in range(q):
        for j in range(i + 1, q):
            try:
                tau = kendall_tau(rankings[i], rankings[j])
            except UndefinedSimilarityError as e:
                mylogger.warning(e.message, extra={"stage": STAGE})
                tau = math.nan
            values[i, j] = values[j, i] = tau

    return TauMatrix(tuple(r.period for r in rankings), values)


@dataclass(frozen=True)
class DecayFit:
    """
    tau(t) = tau0 * exp(-t / lam) with t in periods
    """

    tau0: float
    lam: float
    residual_rms: float
    points: Tuple[Tuple[int, float], ...]

    def fitted(self, intervals: np.ndarray) -> np.ndarray:
        return _exponential(np.asarray(intervals, dtype=float), self.tau0, self.lam)


def _exponential(t: np.ndarray, tau0: float, lam: float) -> np.ndarray:
    return tau0 * np.exp(-t / lam)


def decay_points(matrix: TauMatrix) -> List[Tuple[int, float]]:
    """
    mean tau of all period pairs t apart, for every t with a defined entry
    """
    q = len(matrix.labels)
    points = []
    for t in range(1, q):
        diagonal = np.diagonal(matrix.values, offset=t)
        defined = diagonal[~np.isnan(diagonal)]
        if len(defined):
            points.append((t, float(np.mean(defined))))
    return points


def fit_exponential_decay(intervals: Sequence[float], mean_tau: Sequence[float]) -> Tuple[float, float, float]:
    """
    least squares fit of tau0 * exp(-t / lam), started from a log-linear fit

    :raises FitError: if no mean tau is positive or the fit does not converge
    :return: tau0, lam and the residual RMS
    :rtype: Tuple[float, float, float]
    """
    t = np.asarray(intervals, dtype=float)
    tau = np.asarray(mean_tau, dtype=float)

    positive = tau > 0
    if not positive.any():
        raise FitError("decay fit failed: no interval with positive mean tau", stage=STAGE)

    if positive.sum() >= 2:
        slope, intercept = np.polyfit(t[positive], np.log(tau[positive]), 1)
        tau0_start = math.exp(intercept)
        lam_start = -1.0 / slope if slope < 0 else 10.0 * float(t.max())
    else:
        tau0_start = float(tau[positive][0])
        lam_start = float(t.max())

    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", OptimizeWarning)
            (tau0, lam), _ = curve_fit(_exponential, t, tau, p0=[tau0_start, lam_start], maxfev=10000)
    except (RuntimeError, ValueError) as e:
        raise FitError(f"decay fit failed: {e}", stage=STAGE) from e

    for warning in caught:
        mylogger.debug("decay fit: %s", warning.message, extra={"stage": STAGE})

    if not (math.isfinite(tau0) and math.isfinite(lam)) or lam <= 0:
        raise FitError(f"decay fit failed: lambda {lam}", stage=STAGE)

    residual_rms = float(np.sqrt(np.mean((tau - _exponential(t, tau0, lam)) ** 2)))
    return float(tau0), float(lam), residual_rms


def decay_fit(matrix: TauMatrix) -> DecayFit:
    """
    fits the exponential decay of the mean tau with the period interval

    :raises FitError: with fewer than 4 intervals or if the fit fails
    """
    points = decay_points(matrix)
    if len(points) < MIN_FIT_INTERVALS:
        raise FitError(
            f"decay fit needs {MIN_FIT_INTERVALS} intervals with defined tau but got {len(points)}", stage=STAGE
        )

    tau0, lam, residual_rms = fit_exponential_decay([p[0] for p in points], [p[1] for p in points])

    mylogger.info("Decay fit tau0=%.4f lambda=%.2f", tau0, lam, extra={"stage": STAGE})

    return DecayFit(tau0, lam, residual_rms, tuple(points))


def write_calendar(calendar: QuarterCalendar, path: str) -> None:
    """
    writes CSV ``period,start,end,days``
    """
    frame = pd.DataFrame(
        [(p.label, p.start, p.end, p.days) for p in calendar.periods],
        columns=["period", "start", "end", "days"],
    )
    frame.to_csv(path, index=False, lineterminator="\n")


def write_tau_matrix(matrix: TauMatrix, path: str) -> None:
    frame = pd.DataFrame(matrix.values, index=list(matrix.labels), columns=list(matrix.labels))
    frame.index.name = "period"
    frame.to_csv(path, float_format="%.17g", na_rep="", lineterminator="\n")


def write_decay_fit(fit: DecayFit, csv_path: str, json_path: str) -> None:
    """
    writes CSV ``interval,mean_tau,fitted_tau`` and JSON ``{tau0, lambda, residual_rms}``
    """
    intervals = np.array([p[0] for p in fit.points], dtype=float)
    frame = pd.DataFrame(
        {
            "interval": [p[0] for p in fit.points],
            "mean_tau": [p[1] for p in fit.points],
            "fitted_tau": fit.fitted(intervals),
        }
    )
    frame.to_csv(csv_path, index=False, float_format="%.17g", lineterminator="\n")

    with open(json_path, "w", encoding="utf-8") as fp:
        json.dump({"tau0": fit.tau0, "lambda": fit.lam, "residual_rms": fit.residual_rms}, fp, indent=2)
        fp.write("\n")


def write_quarterly_rankings(series: RankingSeries, path: str) -> None:
    """
    writes CSV ``period,rank,ticker,d_value``
    """
    rows = [
        (ranking.period, rank, ticker, value)
        for ranking in series.rankings
        for rank, (ticker, value) in enumerate(zip(ranking.tickers, ranking.d_values), 1)
    ]
    frame = pd.DataFrame(rows, columns=["period", "rank", "ticker", "d_value"])
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def read_quarterly_rankings(path: str) -> List[InfluenceRanking]:
    frame = pd.read_csv(path, dtype={"period": str, "ticker": str}, float_precision="round_trip")
    if frame.empty:
        raise InputError(f"{path} holds no rankings", stage=STAGE)

    rankings = []
    for period, group in frame.groupby("period", sort=False):
        group = group.sort_values("rank")
        rankings.append(
            InfluenceRanking(str(period), tuple(group["ticker"]), tuple(float(v) for v in group["d_value"]))
        )
    return rankings
