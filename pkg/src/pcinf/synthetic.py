"""
Synthetic markets with known structure, used as fixtures and for
desk-scale validation.

All generators are deterministic in their seed.
"""

import numpy as np
import pandas as pd

from typing import List, Optional, Sequence, Tuple

from .market_data import PricePanel, ReturnPanel, prices_from_returns
from .sector_influence import SectorMap

INDEX_TICKER = "INDEX"
START_DATE = "2000-01-03"

# daily return scale
SCALE = 0.01

SECTOR_NAMES = (
    "Energy",
    "Materials",
    "Industrials",
    "Consumer Discretionary",
    "Consumer Staples",
    "Health Care",
    "Financials",
    "Information Technology",
    "Communication Services",
    "Utilities",
    "Real Estate",
)


def trading_dates(count: int, start: str = START_DATE) -> Tuple[str, ...]:
    """
    ``count`` consecutive business days as ISO dates
    """
    return tuple(d.strftime("%Y-%m-%d") for d in pd.bdate_range(start=start, periods=count))


def _tickers(n: int, prefix: str = "S") -> Tuple[str, ...]:
    width = len(str(n - 1))
    return tuple(f"{prefix}{i:0{width}d}" for i in range(n))


def _innovations(rng: np.random.Generator, shape, df: Optional[float]) -> np.ndarray:
    if df is None:
        return rng.standard_normal(shape)
    # unit variance Student t
    return rng.standard_t(df, shape) * np.sqrt((df - 2.0) / df)


def _panel(
    tickers: Sequence[str], returns: np.ndarray, index_returns: np.ndarray, start: str = START_DATE
) -> ReturnPanel:
    return ReturnPanel(
        tickers=tuple(tickers),
        dates=trading_dates(len(index_returns), start),
        returns=returns * SCALE,
        index_returns=index_returns * SCALE,
        index_ticker=INDEX_TICKER,
    )


def iid_panel(n_stocks: int, n_obs: int, seed: int = 0) -> ReturnPanel:
    """
    independent Gaussian returns, index included
    """
    rng = np.random.default_rng(seed)
    values = rng.standard_normal((n_obs, n_stocks + 1))
    return _panel(_tickers(n_stocks), values[:, :n_stocks], values[:, n_stocks])


def factor_panel(
    n_stocks: int,
    n_obs: int,
    seed: int = 0,
    n_factors: int = 3,
    factor_scale: float = 0.5,
    market_scale: float = 1.0,
    noise_scale: float = 1.0,
    df: Optional[float] = None,
    regime_length: Optional[int] = None,
) -> ReturnPanel:
    """
    a market factor with positive loadings plus ``n_factors`` latent factors

    The index is the market factor. With ``regime_length`` all loadings are
    drawn anew every ``regime_length`` days, otherwise they are fixed.
    ``df`` switches the innovations to Student t with that many degrees of freedom.
    """
    rng = np.random.default_rng(seed)

    market = _innovations(rng, n_obs, df) * market_scale
    factors = _innovations(rng, (n_obs, n_factors), df)
    noise = _innovations(rng, (n_obs, n_stocks), df) * noise_scale

    length = regime_length or n_obs
    returns = np.empty((n_obs, n_stocks))
    for start in range(0, n_obs, length):
        stop = min(start + length, n_obs)
        beta = rng.uniform(0.5, 1.5, n_stocks)
        loadings = rng.normal(0.0, factor_scale, (n_factors, n_stocks))
        returns[start:stop] = market[start:stop, None] * beta + factors[start:stop] @ loadings

    return _panel(_tickers(n_stocks), returns + noise, market)


def one_factor_panel(n_stocks: int, n_obs: int, seed: int = 0, noise_scale: float = 1.0) -> ReturnPanel:
    """
    stocks driven by the index with positive loadings and independent noise
    """
    return factor_panel(n_stocks, n_obs, seed, n_factors=0, noise_scale=noise_scale)


def competitor_cooperator_panel(
    n_obs: int = 1000, seed: int = 0, market_scale: float = 2.0, noise_scale: float = 0.5
) -> ReturnPanel:
    """
    X and Z cooperate, Y competes with both; all load positively on the index

    X = m + z + e, Y = m - z + e, Z = m + z + e. Conditioning on Z lifts
    the negative index-conditioned correlation of X and Y towards zero,
    so d(X,Y:Z) < 0 while the index free d*(X,Y:Z) > 0.
    """
    rng = np.random.default_rng(seed)
    m = rng.standard_normal(n_obs) * market_scale
    z = rng.standard_normal(n_obs)
    e = rng.standard_normal((n_obs, 3)) * noise_scale

    returns = np.column_stack([m + z, m - z, m + z]) + e
    return _panel(("X", "Y", "Z"), returns, m)


def block_factor_panel(
    n_sectors: int = 8,
    per_sector: int = 25,
    n_obs: int = 1000,
    seed: int = 0,
    snr: float = 1.0,
    linked: Sequence[Tuple[int, int]] = (),
    link_scale: float = 1.0,
) -> Tuple[ReturnPanel, SectorMap]:
    """
    a market with one factor per sector

    ``snr`` is the variance of the sector factor relative to the idiosyncratic noise.
    Each pair in ``linked`` adds a factor shared by the two sectors.

    :return: the panel and the true sector map
    :rtype: Tuple[ReturnPanel, SectorMap]
    """
    rng = np.random.default_rng(seed)
    n = n_sectors * per_sector

    market = rng.standard_normal(n_obs)
    sector_factors = rng.standard_normal((n_obs, n_sectors)) * np.sqrt(snr)
    noise = rng.standard_normal((n_obs, n))

    sector_of = np.repeat(np.arange(n_sectors), per_sector)
    beta = rng.uniform(0.5, 1.5, n)
    returns = market[:, None] * beta + sector_factors[:, sector_of] + noise

    for a, b in linked:
        shared = rng.standard_normal(n_obs) * link_scale
        members = (sector_of == a) | (sector_of == b)
        returns[:, members] += shared[:, None]

    names = [SECTOR_NAMES[s % len(SECTOR_NAMES)] + ("" if s < len(SECTOR_NAMES) else f" {s}") for s in range(n_sectors)]
    tickers = _tickers(n)
    sectors = SectorMap({t: names[s] for t, s in zip(tickers, sector_of)})

    return _panel(tickers, returns, market), sectors


def price_panel(
    panel: ReturnPanel,
    illiquid: int = 0,
    flat_fraction: float = 0.1,
    seed: int = 0,
    initial: float = 100.0,
) -> PricePanel:
    """
    prices and volumes of a return panel, index included as a ticker

    ``illiquid`` additional tickers stand still on ``flat_fraction`` of the days.
    """
    rng = np.random.default_rng(seed)

    returns: List[np.ndarray] = [panel.returns]
    tickers = list(panel.tickers)

    if illiquid:
        extra = rng.standard_normal((panel.n_obs, illiquid)) * SCALE
        flat = rng.random((panel.n_obs, illiquid)) < flat_fraction
        extra[flat] = 0.0
        returns.append(extra)
        tickers.extend(_tickers(illiquid, "ILQ"))

    returns.append(panel.index_returns[:, None])
    tickers.append(panel.index_ticker)

    values = np.hstack(returns)
    prices = prices_from_returns(values, np.full(values.shape[1], initial))

    volumes = rng.integers(1_000, 1_000_000, prices.shape).astype(float)

    dates = trading_dates(panel.n_obs + 1, START_DATE)
    return PricePanel(tickers=tuple(tickers), dates=dates, prices=prices, volumes=volumes)
