"""
Aggregation of triple influences into the stock-to-stock influence d(X:Z),
the total influence d(X) and influence rankings.
"""

import math

import numpy as np
import pandas as pd

from dataclasses import dataclass
from logging import getLogger
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from .common.errors import Diagnostic, DomainError, InputError
from .correlation_engine import (
    DENSE,
    INDEX_VARIANT,
    STATISTIC_D,
    STATISTIC_FISHER_Z,
    InfluenceTensor,
    TripleKernel,
    base_matrix,
    fisher_z_scores,
)
from .market_data import ReturnPanel

STAGE = "influence_metrics"

mylogger = getLogger(STAGE)

FILTERED = "filtered"
UNFILTERED = "unfiltered"
AGGREGATION_MODES = (FILTERED, UNFILTERED)

OUTGOING = "outgoing"
INCOMING = "incoming"
DIRECTIONS = (OUTGOING, INCOMING)

FULL_PERIOD = "full"

NO_INFLUENCE = "E_NO_INFLUENCE"


@dataclass(frozen=True)
class InfluenceMatrix:
    """
    d(X:Z) with X the row and Z the column.

    Absent entries and the diagonal are NaN; ``counts`` holds the number of
    triples averaged into each entry.
    """

    tickers: Tuple[str, ...]
    values: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        n = len(self.tickers)
        if self.values.shape != (n, n) or self.counts.shape != (n, n):
            raise ValueError(f"Expected {n}x{n} values and counts")

    def entry(self, x: str, z: str) -> Optional[float]:
        """
        d(x:z) or None if absent
        """
        value = self.values[self.tickers.index(x), self.tickers.index(z)]
        return None if np.isnan(value) else float(value)


class InfluenceAccumulator(object):
    """
    Accumulates the sums and counts of d(X,Y:Z) per (X, Z) and (Y, Z).

    Blocks can be added in any grouping; they must be added in the same order
    to get bit identical sums.
    """

    def __init__(self, tickers: Sequence[str]) -> None:
        self.tickers = tuple(tickers)
        n = len(self.tickers)
        self.n = n
        self.sums = np.zeros(n * n)
        self.counts = np.zeros(n * n, dtype=np.int64)

    def add(self, x: np.ndarray, y: np.ndarray, z: np.ndarray, d: np.ndarray) -> None:
        if len(d) == 0:
            return

        x = np.asarray(x, dtype=np.int64)
        y = np.asarray(y, dtype=np.int64)
        z = np.asarray(z, dtype=np.int64)

        cells = np.concatenate([x * self.n + z, y * self.n + z])
        weights = np.concatenate([d, d])
        size = self.n * self.n

        self.sums += np.bincount(cells, weights=weights, minlength=size)
        self.counts += np.bincount(cells, minlength=size)

    def add_tensor(self, tensor: InfluenceTensor) -> None:
        self.add(tensor.x, tensor.y, tensor.z, tensor.d)

    def matrix(self) -> InfluenceMatrix:
        n = self.n
        sums = self.sums.reshape(n, n)
        counts = self.counts.reshape(n, n)

        values = np.full((n, n), np.nan)
        present = counts > 0
        values[present] = sums[present] / counts[present]
        np.fill_diagonal(values, np.nan)

        return InfluenceMatrix(self.tickers, values, counts.copy())


def stock_influence(tensor: InfluenceTensor, mode: str = FILTERED) -> InfluenceMatrix:
    """
    d(X:Z), the mean of d(X,Y:Z) over all Y != X, Z

    In ``filtered`` mode the mean runs over the entries of the tensor, which is
    expected to be significance filtered. ``unfiltered`` mode requires a dense tensor.

    :param tensor: the influence tensor
    :type tensor: InfluenceTensor
    :param mode: ``filtered`` or ``unfiltered``, defaults to ``filtered``
    :type mode: str
    :raises InputError: if ``unfiltered`` is requested for a filtered tensor
    :return: the influence matrix
    :rtype: InfluenceMatrix
    """
    if mode not in AGGREGATION_MODES:
        raise InputError(f"Unsupported aggregation mode {mode}", stage=STAGE)

    if mode == UNFILTERED and tensor.storage_mode != DENSE:
        raise InputError("Unfiltered aggregation requires a dense tensor", stage=STAGE)

    accumulator = InfluenceAccumulator(tensor.tickers)
    accumulator.add_tensor(tensor)
    return accumulator.matrix()


def stream_stock_influence(
    panel: ReturnPanel,
    threshold: Optional[float] = None,
    statistic: str = STATISTIC_D,
    variant: str = INDEX_VARIANT,
    jobs: Optional[int] = None,
) -> InfluenceMatrix:
    """
    d(X:Z) straight from the triple kernel without storing a tensor

    :param panel: the return panel
    :type panel: ReturnPanel
    :param threshold: significance cutoff on the statistic, None aggregates all triples
    :type threshold: Optional[float]
    :param statistic: ``d`` or ``fisher_z``
    :type statistic: str
    :param variant: ``index`` or ``star``
    :type variant: str
    :param jobs: the number of workers
    :type jobs: Optional[int]
    :return: the influence matrix
    :rtype: InfluenceMatrix
    """
    kernel = TripleKernel(base_matrix(panel, variant))
    accumulator = InfluenceAccumulator(panel.tickers)

    for block in kernel.blocks(jobs):
        d = block.d
        if threshold is None or threshold <= 0.0:
            keep = np.ones(len(d), dtype=bool)
        elif statistic == STATISTIC_FISHER_Z:
            keep = np.abs(fisher_z_scores(block.base, block.conditioned, panel.n_obs)) > threshold
        else:
            keep = np.abs(d) > threshold

        accumulator.add(block.x[keep], block.y[keep], np.full(int(keep.sum()), block.z), d[keep])

    return accumulator.matrix()


@dataclass(frozen=True)
class TotalInfluence:
    """
    d(X) per stock; stocks without any present entry are left out
    """

    tickers: Tuple[str, ...]
    values: np.ndarray
    direction: str = OUTGOING
    diagnostics: Tuple[Diagnostic, ...] = ()

    def as_dict(self) -> Dict[str, float]:
        return {t: float(v) for t, v in zip(self.tickers, self.values)}


def total_influence(matrix: InfluenceMatrix, direction: str = OUTGOING) -> TotalInfluence:
    """
    averages d(X:Z) per stock

    ``outgoing`` averages the column of a conditioning stock W over all targets X,
    which measures the influence of W on the other stocks. ``incoming`` averages
    the row, i.e. the influence of all other stocks on X.

    :param matrix: the influence matrix
    :type matrix: InfluenceMatrix
    :param direction: ``outgoing`` or ``incoming``, defaults to ``outgoing``
    :type direction: str
    :return: the total influence of every stock with at least one present entry
    :rtype: TotalInfluence
    """
    if direction not in DIRECTIONS:
        raise InputError(f"Unsupported direction {direction}", stage=STAGE)

    values = matrix.values if direction == INCOMING else matrix.values.T
    present = ~np.isnan(values)
    counts = present.sum(axis=1)
    sums = np.where(present, values, 0.0).sum(axis=1)

    tickers: List[str] = []
    totals: List[float] = []
    diagnostics: List[Diagnostic] = []

    for i, ticker in enumerate(matrix.tickers):
        if counts[i] == 0:
            detail = f"{ticker} excluded from ranking: no {direction} influence entries"
            mylogger.warning(detail, extra={"stage": STAGE})
            diagnostics.append(Diagnostic(STAGE, NO_INFLUENCE, detail))
            continue
        tickers.append(ticker)
        totals.append(sums[i] / counts[i])

    return TotalInfluence(tuple(tickers), np.array(totals), direction, tuple(diagnostics))


@dataclass(frozen=True)
class InfluenceRanking:
    period: str
    tickers: Tuple[str, ...]
    d_values: Tuple[float, ...]

    def __post_init__(self):
        if len(self.tickers) != len(self.d_values):
            raise ValueError("Expected one value per ticker")
        if len(set(self.tickers)) != len(self.tickers):
            raise ValueError(f"Duplicate tickers in ranking {self.period}")
        if any(a < b for a, b in zip(self.d_values, self.d_values[1:])):
            raise ValueError(f"Ranking {self.period} is not in descending order")

    def __len__(self) -> int:
        return len(self.tickers)

    def positions(self) -> Dict[str, int]:
        """
        ticker -> rank, starting at 1
        """
        return {ticker: rank for rank, ticker in enumerate(self.tickers, 1)}


def rank_by_influence(d_values: Mapping[str, float], period_label: str = FULL_PERIOD) -> InfluenceRanking:
    """
    orders stocks by descending d(X); ties are ordered by ticker

    :param d_values: ticker -> d(X)
    :type d_values: Mapping[str, float]
    :param period_label: the period, defaults to "full"
    :type period_label: str
    :raises DomainError: if a value is not finite
    :return: the ranking
    :rtype: InfluenceRanking
    """
    for ticker, value in d_values.items():
        if not math.isfinite(value):
            raise DomainError(f"Influence of {ticker} is not finite: {value}", stage=STAGE)

    ordered = sorted(d_values.items(), key=lambda item: (-item[1], item[0]))
    return InfluenceRanking(
        period=period_label,
        tickers=tuple(t for t, _ in ordered),
        d_values=tuple(float(v) for _, v in ordered),
    )


def write_influence_matrix(matrix: InfluenceMatrix, path: str, counts_path: Optional[str] = None) -> None:
    """
    writes d(X:Z) as CSV with a ticker header row and column, absent entries empty
    """
    frame = pd.DataFrame(matrix.values, index=list(matrix.tickers), columns=list(matrix.tickers))
    frame.index.name = "ticker"
    frame.to_csv(path, float_format="%.17g", na_rep="", lineterminator="\n")

    if counts_path:
        counts = pd.DataFrame(matrix.counts, index=list(matrix.tickers), columns=list(matrix.tickers))
        counts.index.name = "ticker"
        counts.to_csv(counts_path, lineterminator="\n")


def read_influence_matrix(path: str, counts_path: Optional[str] = None) -> InfluenceMatrix:
    """
    reads a matrix written by :func:`write_influence_matrix`

    Without a counts file, present entries get a count of 1.
    """
    frame = pd.read_csv(path, index_col=0, float_precision="round_trip", keep_default_na=False, na_values=[""])
    tickers = tuple(str(t) for t in frame.columns)
    values = frame.to_numpy(dtype=float)

    if counts_path:
        counts = pd.read_csv(counts_path, index_col=0).to_numpy(dtype=np.int64)
    else:
        counts = (~np.isnan(values)).astype(np.int64)

    return InfluenceMatrix(tickers, values, counts)


def write_ranking(ranking: InfluenceRanking, path: str) -> None:
    """
    writes CSV ``rank,ticker,d_value``
    """
    frame = pd.DataFrame(
        {
            "rank": range(1, len(ranking) + 1),
            "ticker": list(ranking.tickers),
            "d_value": list(ranking.d_values),
        }
    )
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def read_ranking(path: str, period_label: str = FULL_PERIOD) -> InfluenceRanking:
    frame = pd.read_csv(path, dtype={"ticker": str}, float_precision="round_trip").sort_values("rank")
    return InfluenceRanking(
        period=period_label,
        tickers=tuple(frame["ticker"]),
        d_values=tuple(float(v) for v in frame["d_value"]),
    )
