import io
import os
import re
import json

import numpy as np
import pandas as pd

from dataclasses import dataclass, asdict, field
from logging import getLogger
from typing import IO, Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .common.errors import (
    InsufficientDataError,
    MissingTickerError,
    NoLiquidStocksError,
    PriceParseError,
)

STAGE = "market_data"

mylogger = getLogger(STAGE)

PriceSource = Union[str, "os.PathLike[str]", IO[str]]

REQUIRED_COLUMNS = ("date", "ticker", "adj_close")

DEFAULT_MAX_FLAT_FRACTION = 0.06


def _frozen(values: np.ndarray, dtype=float) -> np.ndarray:
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class IngestRecord:
    """
    one entry of the ingest log
    """

    ticker: str
    action: str
    """one of ``forward_filled``, ``dropped``, ``rejected``, ``illiquid``"""

    detail: str


@dataclass(frozen=True)
class PricePanel:
    """
    Aligned daily adjusted closing prices (T dates x N tickers).

    Missing interior observations are forward-filled at ingestion and flagged in ``filled``.
    """

    tickers: Tuple[str, ...]
    dates: Tuple[str, ...]
    prices: np.ndarray
    volumes: Optional[np.ndarray] = None
    filled: Optional[np.ndarray] = None
    ingest_log: Tuple[IngestRecord, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "tickers", tuple(self.tickers))
        object.__setattr__(self, "dates", tuple(self.dates))
        object.__setattr__(self, "ingest_log", tuple(self.ingest_log))

        prices = _frozen(self.prices)
        shape = (len(self.dates), len(self.tickers))

        if prices.shape != shape:
            raise ValueError(f"Expected prices of shape {shape} but got {prices.shape}")

        if not np.all(prices > 0):
            raise ValueError("Expected all prices to be strictly positive")

        if any(a >= b for a, b in zip(self.dates, self.dates[1:])):
            raise ValueError("Expected strictly increasing dates")

        if len(set(self.tickers)) != len(self.tickers):
            raise ValueError("Expected unique tickers")

        object.__setattr__(self, "prices", prices)

        if self.volumes is not None:
            volumes = _frozen(self.volumes)
            if volumes.shape != shape:
                raise ValueError(f"Expected volumes of shape {shape} but got {volumes.shape}")
            object.__setattr__(self, "volumes", volumes)

        filled = np.zeros(shape, dtype=bool) if self.filled is None else self.filled
        filled = _frozen(filled, dtype=bool)
        if filled.shape != shape:
            raise ValueError(f"Expected fill flags of shape {shape} but got {filled.shape}")
        object.__setattr__(self, "filled", filled)

    def select(self, tickers: Sequence[str], records: Iterable[IngestRecord] = ()) -> "PricePanel":
        """
        returns a panel with the given tickers in the given order

        :param tickers: the tickers to keep
        :type tickers: Sequence[str]
        :param records: ingest records to append to the log
        :type records: Iterable[IngestRecord]
        :return: the new panel
        :rtype: PricePanel
        """
        columns = [self.tickers.index(t) for t in tickers]
        assert self.filled is not None
        return PricePanel(
            tickers=tuple(tickers),
            dates=self.dates,
            prices=self.prices[:, columns],
            volumes=None if self.volumes is None else self.volumes[:, columns],
            filled=self.filled[:, columns],
            ingest_log=(*self.ingest_log, *records),
        )


@dataclass(frozen=True)
class ReturnPanel:
    """
    Daily log returns of the stocks and of the market index.

    ``returns`` has shape (T-1) x N, ``index_returns`` has length T-1 and the same date alignment.
    """

    tickers: Tuple[str, ...]
    dates: Tuple[str, ...]
    returns: np.ndarray
    index_returns: np.ndarray
    index_ticker: str = "INDEX"

    def __post_init__(self):
        object.__setattr__(self, "tickers", tuple(self.tickers))
        object.__setattr__(self, "dates", tuple(self.dates))

        returns = _frozen(self.returns)
        index_returns = _frozen(self.index_returns)

        if returns.ndim != 2 or returns.shape != (len(self.dates), len(self.tickers)):
            raise ValueError(
                f"Expected returns of shape {(len(self.dates), len(self.tickers))} but got {returns.shape}"
            )

        if index_returns.shape != (len(self.dates),):
            raise ValueError(f"Expected index returns of length {len(self.dates)} but got {index_returns.shape}")

        object.__setattr__(self, "returns", returns)
        object.__setattr__(self, "index_returns", index_returns)

    @property
    def n_obs(self) -> int:
        return len(self.dates)

    @property
    def n_stocks(self) -> int:
        return len(self.tickers)

    def window(self, start: int, stop: int) -> "ReturnPanel":
        """
        returns the rows ``start:stop`` as a new panel
        """
        return ReturnPanel(
            tickers=self.tickers,
            dates=self.dates[start:stop],
            returns=self.returns[start:stop],
            index_returns=self.index_returns[start:stop],
            index_ticker=self.index_ticker,
        )

    def select(self, tickers: Sequence[str]) -> "ReturnPanel":
        """
        returns a panel with the given stock tickers in the given order
        """
        columns = [self.tickers.index(t) for t in tickers]
        return ReturnPanel(
            tickers=tuple(tickers),
            dates=self.dates,
            returns=self.returns[:, columns],
            index_returns=self.index_returns,
            index_ticker=self.index_ticker,
        )

    def with_values(self, returns: np.ndarray, index_returns: np.ndarray) -> "ReturnPanel":
        """
        returns a panel with the same labels but different values
        """
        return ReturnPanel(
            tickers=self.tickers,
            dates=self.dates,
            returns=returns,
            index_returns=index_returns,
            index_ticker=self.index_ticker,
        )


@dataclass(frozen=True)
class LiquidityReport:
    ticker: str
    flat_fraction: float
    retained: bool


def _parse_error_line(message: str) -> Optional[int]:
    found = re.search(r"line (\d+)", message)
    return int(found.group(1)) if found else None


def _read_frame(source: PriceSource) -> pd.DataFrame:
    try:
        frame = pd.read_csv(source, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise PriceParseError("empty price file", line=1, stage=STAGE)
    except pd.errors.ParserError as e:
        raise PriceParseError(str(e).strip(), line=_parse_error_line(str(e)), stage=STAGE)
    except UnicodeDecodeError as e:
        raise PriceParseError(f"price file is not UTF-8: {str(e)}", stage=STAGE)

    frame.columns = [str(c).strip().lower() for c in frame.columns]
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise PriceParseError(f"missing column(s) {', '.join(missing)}", line=1, stage=STAGE)

    return frame


def _first_bad_line(bad: pd.Series) -> int:
    return int(bad.to_numpy().nonzero()[0][0]) + 2


def _parse_rows(frame: pd.DataFrame) -> pd.DataFrame:
    """
    turns the raw string frame into typed columns, raising parse errors with line numbers
    """
    tickers = frame["ticker"].str.strip()
    if (tickers == "").any():
        line = _first_bad_line(tickers == "")
        raise PriceParseError("empty ticker", line=line, stage=STAGE)

    dates = pd.to_datetime(frame["date"].str.strip(), format="%Y-%m-%d", errors="coerce")
    if dates.isna().any():
        line = _first_bad_line(dates.isna())
        raise PriceParseError(f"malformed date '{frame['date'].iloc[line - 2]}'", line=line, stage=STAGE)

    prices = pd.to_numeric(frame["adj_close"].str.strip(), errors="coerce")
    bad_prices = prices.isna() | ~np.isfinite(prices.fillna(0.0))
    if bad_prices.any():
        line = _first_bad_line(bad_prices)
        raise PriceParseError(f"malformed price '{frame['adj_close'].iloc[line - 2]}'", line=line, stage=STAGE)

    rows = pd.DataFrame(
        {
            "date": dates.dt.strftime("%Y-%m-%d"),
            "ticker": tickers,
            "price": prices.astype(float),
            "line": frame.index.to_numpy() + 2,
        }
    )

    if "volume" in frame.columns:
        raw = frame["volume"].str.strip()
        volumes = pd.to_numeric(raw.where(raw != "", None), errors="coerce")
        bad_volumes = (volumes.isna() & (raw != "")) | (volumes < 0)
        if bad_volumes.any():
            line = _first_bad_line(bad_volumes)
            raise PriceParseError(f"malformed volume '{raw.iloc[line - 2]}'", line=line, stage=STAGE)
        rows["volume"] = volumes.astype(float)

    duplicated = rows.duplicated(subset=["date", "ticker"])
    if duplicated.any():
        line = _first_bad_line(duplicated)
        raise PriceParseError(
            f"duplicate observation for {rows['ticker'].iloc[line - 2]} on {rows['date'].iloc[line - 2]}",
            line=line,
            stage=STAGE,
        )

    return rows


def load_prices(source: PriceSource) -> PricePanel:
    """
    loads a long format price file ``date,ticker,adj_close[,volume]``

    - the calendar is the union of all dates
    - interior gaps are forward-filled and flagged
    - tickers missing their first observation are dropped
    - tickers with a non-positive price are rejected

    :param source: a path or a text stream
    :type source: PriceSource
    :raises PriceParseError: if a row is malformed
    :raises InsufficientDataError: if there are fewer than 2 distinct dates or no usable tickers
    :return: the price panel
    :rtype: PricePanel
    """
    rows = _parse_rows(_read_frame(source))
    records: List[IngestRecord] = []

    if rows["date"].nunique() < 2:
        raise InsufficientDataError("price file contains fewer than 2 distinct dates", stage=STAGE)

    non_positive = rows[rows["price"] <= 0]
    rejected = list(pd.unique(non_positive["ticker"]))
    for ticker in rejected:
        first = non_positive[non_positive["ticker"] == ticker].iloc[0]
        detail = f"non-positive price {first['price']} on {first['date']} (line {first['line']})"
        mylogger.warning("Rejecting %s: %s", ticker, detail, extra={"stage": STAGE})
        records.append(IngestRecord(ticker, "rejected", detail))

    rows = rows[~rows["ticker"].isin(rejected)]
    calendar = sorted(pd.unique(rows["date"]))

    if len(calendar) < 2:
        raise InsufficientDataError("fewer than 2 distinct dates after rejecting tickers", stage=STAGE)

    order = list(pd.unique(rows["ticker"]))
    prices = rows.pivot(index="date", columns="ticker", values="price").reindex(index=calendar, columns=order)

    has_volume = "volume" in rows.columns and rows["volume"].notna().any()
    volumes = (
        rows.pivot(index="date", columns="ticker", values="volume").reindex(index=calendar, columns=order)
        if has_volume
        else None
    )

    kept: List[str] = []
    for ticker in order:
        column = prices[ticker]
        if pd.isna(column.iloc[0]):
            detail = f"missing first observation on {calendar[0]}"
            mylogger.warning("Dropping %s: %s", ticker, detail, extra={"stage": STAGE})
            records.append(IngestRecord(ticker, "dropped", detail))
            continue

        gaps = column.isna()
        if gaps.any():
            filled_dates = [d for d, g in zip(calendar, gaps) if g]
            detail = f"forward-filled {len(filled_dates)} day(s): {', '.join(filled_dates)}"
            mylogger.info("%s: %s", ticker, detail, extra={"stage": STAGE})
            records.append(IngestRecord(ticker, "forward_filled", detail))

        kept.append(ticker)

    if not kept:
        raise InsufficientDataError("no ticker has a complete price history", stage=STAGE)

    prices = prices[kept]
    filled = prices.isna().to_numpy()
    values = prices.ffill().to_numpy()

    volume_values = None
    if volumes is not None:
        volumes = volumes[kept]
        # a forward-filled day did not trade
        volume_values = volumes.where(~prices.isna(), 0.0).to_numpy()

    mylogger.info(
        "Loaded %d ticker(s) over %d date(s)", len(kept), len(calendar), extra={"stage": STAGE}
    )

    return PricePanel(
        tickers=tuple(kept),
        dates=tuple(calendar),
        prices=values,
        volumes=volume_values,
        filled=filled,
        ingest_log=tuple(records),
    )


def flat_fractions(panel: PricePanel, zero_volume_is_flat: bool = False) -> np.ndarray:
    """
    returns the fraction of days without price movement for each ticker

    :param panel: the price panel
    :type panel: PricePanel
    :param zero_volume_is_flat: if True, days without volume count as flat as well
    :type zero_volume_is_flat: bool
    :return: the fractions in [0, 1]
    :rtype: np.ndarray
    """
    prices = panel.prices
    flat = prices[1:] == prices[:-1]

    if zero_volume_is_flat and panel.volumes is not None:
        flat = flat | (panel.volumes[1:] == 0)

    return flat.mean(axis=0)


def filter_illiquid(
    panel: PricePanel,
    max_flat_fraction: float = DEFAULT_MAX_FLAT_FRACTION,
    zero_volume_is_flat: bool = False,
) -> Tuple[PricePanel, List[LiquidityReport]]:
    """
    removes tickers without price movement on more than ``max_flat_fraction`` of the days

    :param panel: the price panel
    :type panel: PricePanel
    :param max_flat_fraction: the cutoff in [0, 1], defaults to 0.06
    :type max_flat_fraction: float
    :param zero_volume_is_flat: if True, days without volume count as flat as well
    :type zero_volume_is_flat: bool
    :raises ValueError: if the cutoff is not within [0, 1]
    :raises NoLiquidStocksError: if no ticker survives
    :return: the filtered panel and a report for every input ticker
    :rtype: Tuple[PricePanel, List[LiquidityReport]]
    """
    if not 0.0 <= max_flat_fraction <= 1.0:
        raise ValueError(f"Expected max_flat_fraction within [0, 1] but was {max_flat_fraction}")

    fractions = flat_fractions(panel, zero_volume_is_flat)
    reports = [
        LiquidityReport(ticker, float(fraction), bool(fraction <= max_flat_fraction))
        for ticker, fraction in zip(panel.tickers, fractions)
    ]

    retained = [r.ticker for r in reports if r.retained]
    if not retained:
        raise NoLiquidStocksError("no liquid stocks", stage=STAGE)

    records = [
        IngestRecord(r.ticker, "illiquid", f"flat on {r.flat_fraction:.4f} of days > {max_flat_fraction}")
        for r in reports
        if not r.retained
    ]

    mylogger.info(
        "Liquidity filter retained %d of %d ticker(s)", len(retained), len(reports), extra={"stage": STAGE}
    )

    return panel.select(retained, records), reports


def log_returns(panel: PricePanel, index_ticker: str) -> ReturnPanel:
    """
    computes daily log returns ln(P(t+1)/P(t)) and separates the index

    :param panel: the price panel
    :type panel: PricePanel
    :param index_ticker: the ticker of the market index in the panel
    :type index_ticker: str
    :raises MissingTickerError: if the index ticker is not in the panel
    :raises InsufficientDataError: if the panel holds no stock besides the index
    :return: the return panel
    :rtype: ReturnPanel
    """
    if index_ticker not in panel.tickers:
        raise MissingTickerError(index_ticker, "index ticker", stage=STAGE)

    prices = panel.prices
    returns = np.log(prices[1:] / prices[:-1])

    index_column = panel.tickers.index(index_ticker)
    stock_columns = [i for i in range(len(panel.tickers)) if i != index_column]

    if not stock_columns:
        raise InsufficientDataError("panel contains no stock besides the index", stage=STAGE)

    return ReturnPanel(
        tickers=tuple(panel.tickers[i] for i in stock_columns),
        dates=panel.dates[1:],
        returns=returns[:, stock_columns],
        index_returns=returns[:, index_column],
        index_ticker=index_ticker,
    )


def prices_from_returns(returns: np.ndarray, initial: np.ndarray) -> np.ndarray:
    """
    reconstructs prices from log returns and initial prices

    :param returns: (T-1) x N log returns
    :type returns: np.ndarray
    :param initial: N initial prices P(0)
    :type initial: np.ndarray
    :return: T x N prices
    :rtype: np.ndarray
    """
    growth = np.exp(np.cumsum(returns, axis=0))
    initial = np.asarray(initial, dtype=float)
    return np.vstack([initial, initial * growth])


def write_ingest_log(records: Iterable[IngestRecord], path: str) -> None:
    """
    writes the ingest log as line-delimited JSON ``{ticker, action, detail}``
    """
    with open(path, "w", encoding="utf-8") as fp:
        for record in records:
            fp.write(json.dumps(asdict(record)) + "\n")


def write_liquidity_reports(reports: Iterable[LiquidityReport], path: str) -> None:
    frame = pd.DataFrame(
        [(r.ticker, r.flat_fraction, str(r.retained).lower()) for r in reports],
        columns=["ticker", "flat_fraction", "retained"],
    )
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


PANEL_CSV = "returns.csv"
PANEL_META = "panel.json"


def write_return_panel(panel: ReturnPanel, directory: str) -> List[str]:
    """
    writes a return panel as wide CSV (``date``, stock columns, index column last)
    plus a JSON sidecar naming the index column

    :return: the paths written
    :rtype: List[str]
    """
    os.makedirs(directory, exist_ok=True)

    frame = pd.DataFrame(panel.returns, columns=list(panel.tickers))
    frame.insert(0, "date", list(panel.dates))
    frame[panel.index_ticker] = panel.index_returns

    csv_path = os.path.join(directory, PANEL_CSV)
    frame.to_csv(csv_path, index=False, float_format="%.17g", lineterminator="\n")

    meta_path = os.path.join(directory, PANEL_META)
    with open(meta_path, "w", encoding="utf-8") as fp:
        json.dump({"index_ticker": panel.index_ticker, "tickers": list(panel.tickers)}, fp, indent=2)
        fp.write("\n")

    return [csv_path, meta_path]


def read_return_panel(directory: str) -> ReturnPanel:
    """
    reads a return panel written by :func:`write_return_panel`

    :raises FileNotFoundError: if the panel files do not exist
    """
    with open(os.path.join(directory, PANEL_META), "r", encoding="utf-8") as fp:
        meta: Dict = json.load(fp)

    frame = pd.read_csv(
        os.path.join(directory, PANEL_CSV),
        dtype={"date": str},
        float_precision="round_trip",
    )

    index_ticker = meta["index_ticker"]
    tickers = list(meta["tickers"])

    return ReturnPanel(
        tickers=tuple(tickers),
        dates=tuple(frame["date"]),
        returns=frame[tickers].to_numpy(dtype=float),
        index_returns=frame[index_ticker].to_numpy(dtype=float),
        index_ticker=index_ticker,
    )


def write_price_csv(panel: PricePanel, stream: Optional[IO[str]] = None) -> str:
    """
    writes a price panel in the long input format; returns the text if no stream is given
    """
    out = stream or io.StringIO()
    out.write("date,ticker,adj_close,volume\n" if panel.volumes is not None else "date,ticker,adj_close\n")
    for t, date in enumerate(panel.dates):
        for i, ticker in enumerate(panel.tickers):
            line = f"{date},{ticker},{float(panel.prices[t, i])!r}"
            if panel.volumes is not None:
                volume = panel.volumes[t, i]
                line += "," if np.isnan(volume) else f",{int(volume)}"
            out.write(line + "\n")
    return "" if stream is not None else out.getvalue()  # type: ignore
