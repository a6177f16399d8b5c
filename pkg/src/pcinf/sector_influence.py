"""
Influence by economic sector: sector averages d^S_X of the influence matrix,
attribution coefficients beta^S_X, their validation against the sector
classification and the closeness of sectors.
"""

import numpy as np
import pandas as pd

from dataclasses import dataclass
from logging import getLogger
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

from .common.errors import ComputationError, SectorMapError
from .common.parallel import map_ordered
from .correlation_engine import STATISTIC_D, STATISTIC_FISHER_Z
from .influence_metrics import InfluenceMatrix, stream_stock_influence
from .market_data import ReturnPanel
from .significance import FISHER
from .stability_analysis import Period, RankingOptions, period_threshold

STAGE = "sector_influence"

mylogger = getLogger(STAGE)

UNDEFINED_TOLERANCE = 1e-12
MIN_CLOSENESS_STOCKS = 3

OK = "ok"
MIXED_SIGN = "mixed_sign"
UNDEFINED = "undefined"


@dataclass(frozen=True)
class SectorMap:
    """
    ticker -> sector label
    """

    mapping: Mapping[str, str]

    def __post_init__(self):
        if not self.mapping:
            raise SectorMapError("sector map is empty", stage=STAGE)
        object.__setattr__(self, "mapping", dict(self.mapping))

    @property
    def sectors(self) -> Tuple[str, ...]:
        return tuple(sorted(set(self.mapping.values())))

    def sector(self, ticker: str) -> str:
        try:
            return self.mapping[ticker]
        except KeyError:
            raise SectorMapError(f"sector of ticker {ticker} not found", stage=STAGE) from None

    def members(self, sector: str, tickers: Optional[Sequence[str]] = None) -> List[str]:
        universe = self.mapping.keys() if tickers is None else tickers
        return [t for t in universe if self.mapping.get(t) == sector]

    def covering(self, tickers: Sequence[str]) -> "SectorMap":
        """
        the map restricted to ``tickers``

        :raises SectorMapError: if a ticker has no sector
        """
        return SectorMap({t: self.sector(t) for t in tickers})


def load_sectors(path: str) -> SectorMap:
    """
    loads a CSV ``ticker,sector``

    :raises SectorMapError: if the file is malformed or assigns two sectors to a ticker
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise SectorMapError(f"invalid sector file {path}: {e}", stage=STAGE) from e

    missing = {"ticker", "sector"} - set(frame.columns)
    if missing:
        raise SectorMapError(f"sector file {path} lacks column(s) {', '.join(sorted(missing))}", stage=STAGE)

    mapping: Dict[str, str] = {}
    for ticker, sector in zip(frame["ticker"].str.strip(), frame["sector"].str.strip()):
        if not ticker or not sector:
            raise SectorMapError(f"sector file {path} has an empty ticker or sector", stage=STAGE)
        if mapping.get(ticker, sector) != sector:
            raise SectorMapError(f"ticker {ticker} is assigned to {mapping[ticker]} and {sector}", stage=STAGE)
        mapping[ticker] = sector

    return SectorMap(mapping)


@dataclass(frozen=True)
class SectorInfluence:
    """
    d^S_X: row X, column S. Absent entries are NaN; ``counts`` holds
    the number of stocks averaged.
    """

    tickers: Tuple[str, ...]
    sectors: Tuple[str, ...]
    values: np.ndarray
    counts: np.ndarray


def _membership(tickers: Sequence[str], sectors: SectorMap) -> Tuple[Tuple[str, ...], np.ndarray]:
    labels = sectors.sectors
    column = {s: i for i, s in enumerate(labels)}
    members = np.zeros((len(tickers), len(labels)))
    for i, ticker in enumerate(tickers):
        members[i, column[sectors.sector(ticker)]] = 1.0
    return labels, members


def sector_influence(matrix: InfluenceMatrix, sectors: SectorMap) -> SectorInfluence:
    """
    the mean of d(X:Z) over the stocks Z of each sector

    X itself is never part of its own sector's mean; absent entries of the
    matrix are left out. A sector without a present entry is absent.

    :param matrix: the influence matrix
    :type matrix: InfluenceMatrix
    :param sectors: the sector map, covering all tickers of the matrix
    :type sectors: SectorMap
    :raises SectorMapError: if a ticker has no sector
    :return: the sector influences
    :rtype: SectorInfluence
    """
    labels, members = _membership(matrix.tickers, sectors)

    values = matrix.values.copy()
    np.fill_diagonal(values, np.nan)
    present = ~np.isnan(values)

    sums = np.where(present, values, 0.0) @ members
    counts = (present.astype(float) @ members).astype(np.int64)

    result = np.full(sums.shape, np.nan)
    defined = counts > 0
    result[defined] = sums[defined] / counts[defined]

    return SectorInfluence(matrix.tickers, labels, result, counts)


@dataclass(frozen=True)
class SectorAttribution:
    """
    beta^S_X = d^S_X / sum_S d^S_X per stock, and the rectified variant
    normalised over max(d^S_X, 0). ``flags`` marks mixed signs and undefined attributions.
    """

    tickers: Tuple[str, ...]
    sectors: Tuple[str, ...]
    d_values: np.ndarray
    betas: np.ndarray
    rectified: np.ndarray
    flags: Tuple[str, ...]

    def rows(self) -> Iterator[Tuple[str, str, float, float, float, str]]:
        for i, ticker in enumerate(self.tickers):
            for s, sector in enumerate(self.sectors):
                yield (
                    ticker,
                    sector,
                    float(self.d_values[i, s]),
                    float(self.betas[i, s]),
                    float(self.rectified[i, s]),
                    self.flags[i],
                )

    def defined(self) -> np.ndarray:
        return np.array([flag != UNDEFINED for flag in self.flags])


def sector_betas(d_vectors: SectorInfluence) -> SectorAttribution:
    """
    normalises the sector influences of every stock into attribution coefficients

    The attribution is undefined when the sum of d^S_X is below 1e-12 times
    the largest |d^S_X| (or no sector is present). Mixed signs are flagged;
    their betas leave [0, 1].
    """
    n, s = d_vectors.values.shape
    betas = np.full((n, s), np.nan)
    rectified = np.full((n, s), np.nan)
    flags: List[str] = []

    for i in range(n):
        row = d_vectors.values[i]
        present = ~np.isnan(row)
        if not present.any():
            flags.append(UNDEFINED)
            continue

        values = row[present]
        total = values.sum()
        scale = np.abs(values).max()

        positive = np.maximum(values, 0.0)
        if positive.sum() > 0:
            rectified[i, present] = positive / positive.sum()

        if scale == 0.0 or abs(total) < UNDEFINED_TOLERANCE * scale:
            flags.append(UNDEFINED)
            continue

        betas[i, present] = values / total
        flags.append(MIXED_SIGN if (values > 0).any() and (values < 0).any() else OK)

    undefined = flags.count(UNDEFINED)
    if undefined:
        mylogger.warning("Attribution undefined for %d stock(s)", undefined, extra={"stage": STAGE})

    return SectorAttribution(d_vectors.tickers, d_vectors.sectors, d_vectors.values, betas, rectified, tuple(flags))


@dataclass(frozen=True)
class SectorRate:
    sector: str
    n_members: int
    rate: float
    baseline: float


def prediction_rate(
    betas: SectorAttribution, sectors: SectorMap, rectified: bool = False
) -> List[SectorRate]:
    """
    for each sector S with N_S members: the share of sector members among the
    N_S stocks with the largest beta^S_X, and the random baseline N_S / N

    Undefined betas rank last; ties are ordered by ticker.
    """
    tickers = betas.tickers
    n = len(tickers)
    values = betas.rectified if rectified else betas.betas

    rates = []
    for s, sector in enumerate(betas.sectors):
        members = set(sectors.members(sector, tickers))
        size = len(members)
        if size == 0:
            continue

        column = values[:, s]
        order = sorted(
            range(n),
            key=lambda i: (np.isnan(column[i]), -column[i] if not np.isnan(column[i]) else 0.0, tickers[i]),
        )
        top = [tickers[i] for i in order[:size]]
        hits = sum(1 for t in top if t in members)

        rates.append(SectorRate(sector, size, hits / size, size / n))

    return rates


@dataclass(frozen=True)
class SectorClosenessMatrix:
    sectors: Tuple[str, ...]
    values: np.ndarray


def sector_closeness(d_vectors: SectorInfluence) -> SectorClosenessMatrix:
    """
    Pearson correlation across stocks of the influence vectors of every
    pair of sectors, absent entries deleted pairwise

    Pairs with fewer than 3 common stocks or without variation are NaN.
    """
    frame = pd.DataFrame(d_vectors.values, columns=list(d_vectors.sectors))
    values = frame.corr(method="pearson", min_periods=MIN_CLOSENESS_STOCKS).to_numpy()
    values = np.clip(values, -1.0, 1.0)
    values = (values + values.T) / 2.0
    np.fill_diagonal(values, 1.0)

    return SectorClosenessMatrix(d_vectors.sectors, values)


def attribute_matrix(matrix: InfluenceMatrix, sectors: SectorMap) -> Tuple[SectorInfluence, SectorAttribution]:
    d_vectors = sector_influence(matrix, sectors.covering(matrix.tickers))
    return d_vectors, sector_betas(d_vectors)


def rolling_sector_attribution(
    panel: ReturnPanel,
    sectors: SectorMap,
    window: int,
    step: Optional[int] = None,
    options: Optional[RankingOptions] = None,
    jobs: Optional[int] = None,
) -> List[Tuple[Period, SectorAttribution]]:
    """
    sector attribution over moving windows of ``window`` trading days, ``step`` days apart

    Each window gets its own significance threshold. Windows which cannot be
    computed are skipped with a warning.

    :raises SectorMapError: if a ticker has no sector
    """
    step = step or window
    if window < 1 or step < 1:
        raise ValueError(f"Expected positive window and step but got {window} and {step}")

    sectors = sectors.covering(panel.tickers)
    options = options or RankingOptions()
    statistic = STATISTIC_FISHER_Z if options.method == FISHER else STATISTIC_D

    periods = [
        Period(f"{panel.dates[start]}/{panel.dates[start + window - 1]}", panel.dates[start],
               panel.dates[start + window - 1], start, start + window)
        for start in range(0, panel.n_obs - window + 1, step)
    ]

    def attribute(period: Period) -> Optional[SectorAttribution]:
        sub = panel.window(period.first, period.stop)
        try:
            threshold = period_threshold(sub, options)
            matrix = stream_stock_influence(sub, threshold, statistic, options.variant, jobs=1)
        except ComputationError as e:
            mylogger.warning("window %s skipped: %s", period.label, e.message, extra={"stage": STAGE})
            return None
        return sector_betas(sector_influence(matrix, sectors))

    results = map_ordered(attribute, periods, jobs)
    return [(period, result) for period, result in zip(periods, results) if result is not None]


def _attribution_frame(attribution: SectorAttribution) -> pd.DataFrame:
    return pd.DataFrame(
        list(attribution.rows()),
        columns=["ticker", "sector", "d_value", "beta", "beta_rectified", "flag"],
    )


def write_attribution(attribution: SectorAttribution, path: str) -> None:
    """
    writes CSV ``ticker,sector,d_value,beta,beta_rectified,flag``
    """
    _attribution_frame(attribution).to_csv(path, index=False, float_format="%.17g", na_rep="", lineterminator="\n")


def write_rolling_attribution(windows: Sequence[Tuple[Period, SectorAttribution]], path: str) -> None:
    """
    writes CSV ``window,start,end,ticker,sector,d_value,beta,beta_rectified,flag``
    """
    frames = []
    for period, attribution in windows:
        frame = _attribution_frame(attribution)
        frame.insert(0, "end", period.end)
        frame.insert(0, "start", period.start)
        frame.insert(0, "window", period.label)
        frames.append(frame)

    columns = ["window", "start", "end", "ticker", "sector", "d_value", "beta", "beta_rectified", "flag"]
    result = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=columns)
    result.to_csv(path, index=False, float_format="%.17g", na_rep="", lineterminator="\n")


def write_closeness(closeness: SectorClosenessMatrix, path: str) -> None:
    frame = pd.DataFrame(closeness.values, index=list(closeness.sectors), columns=list(closeness.sectors))
    frame.index.name = "sector"
    frame.to_csv(path, float_format="%.17g", na_rep="", lineterminator="\n")


def write_prediction_rates(rates: Sequence[SectorRate], path: str) -> None:
    """
    writes CSV ``sector,n_members,rate,baseline``
    """
    frame = pd.DataFrame(
        [(r.sector, r.n_members, r.rate, r.baseline) for r in rates],
        columns=["sector", "n_members", "rate", "baseline"],
    )
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
