import io
import math
import os
import json
import tempfile
import unittest

import numpy as np

from logging import FATAL, getLogger

from pcinf.common.errors import (
    InsufficientDataError,
    MissingTickerError,
    NoLiquidStocksError,
    PriceParseError,
)
from pcinf.market_data import (
    PricePanel,
    filter_illiquid,
    flat_fractions,
    load_prices,
    log_returns,
    prices_from_returns,
    read_return_panel,
    write_ingest_log,
    write_price_csv,
    write_return_panel,
)
from pcinf.synthetic import iid_panel, price_panel


class MarketDataTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        getLogger("market_data").setLevel(FATAL)

    def load(self, text: str) -> PricePanel:
        return load_prices(io.StringIO(text))

    def panel(self, prices, volumes=None) -> PricePanel:
        prices = np.asarray(prices, dtype=float)
        tickers = tuple(f"T{i}" for i in range(prices.shape[1]))
        dates = tuple(f"2020-01-{d + 1:02d}" for d in range(prices.shape[0]))
        return PricePanel(tickers=tickers, dates=dates, prices=prices, volumes=volumes)

    def test_complete_panel(self):
        rows = ["date,ticker,adj_close"]
        for d in range(5):
            for t, base in (("A", 10.0), ("B", 20.0), ("C", 30.0)):
                rows.append(f"2020-01-{d + 6:02d},{t},{base + d}")

        panel = self.load("\n".join(rows) + "\n")

        self.assertEqual(("A", "B", "C"), panel.tickers)
        self.assertEqual(5, len(panel.dates))
        self.assertEqual((5, 3), panel.prices.shape)
        self.assertEqual(12.0, panel.prices[2, 0])
        self.assertFalse(panel.filled.any())
        self.assertEqual((), panel.ingest_log)

    def test_gap_is_forward_filled(self):
        text = """date,ticker,adj_close
2020-01-06,A,10
2020-01-06,B,20
2020-01-07,A,11
2020-01-07,B,21
2020-01-08,B,22
2020-01-09,A,13
2020-01-09,B,23
"""
        panel = self.load(text)

        self.assertEqual(11.0, panel.prices[2, 0])
        self.assertTrue(panel.filled[2, 0])
        self.assertEqual(1, int(panel.filled.sum()))

        records = [r for r in panel.ingest_log if r.ticker == "A"]
        self.assertEqual(1, len(records))
        self.assertEqual("forward_filled", records[0].action)
        self.assertIn("2020-01-08", records[0].detail)

    def test_missing_first_observation_drops_ticker(self):
        text = """date,ticker,adj_close
2020-01-06,A,10
2020-01-07,A,11
2020-01-07,B,21
"""
        panel = self.load(text)

        self.assertEqual(("A",), panel.tickers)
        self.assertEqual("dropped", panel.ingest_log[0].action)

    def test_non_positive_price_rejects_ticker(self):
        text = """date,ticker,adj_close
2020-01-06,A,10
2020-01-06,B,0.00
2020-01-07,A,11
2020-01-07,B,21
"""
        panel = self.load(text)

        self.assertEqual(("A",), panel.tickers)
        self.assertEqual("rejected", panel.ingest_log[0].action)
        self.assertEqual("B", panel.ingest_log[0].ticker)

    def test_malformed_row_reports_line(self):
        text = """date,ticker,adj_close
2020-01-06,A,10
2020-01-07,A,abc
"""
        with self.assertRaises(PriceParseError) as context:
            self.load(text)

        self.assertEqual(3, context.exception.line)
        self.assertIn("line 3", str(context.exception))

    def test_malformed_date(self):
        with self.assertRaises(PriceParseError) as context:
            self.load("date,ticker,adj_close\n2020-01-06,A,10\n06.01.2020,A,11\n")
        self.assertEqual(3, context.exception.line)

    def test_missing_column(self):
        with self.assertRaises(PriceParseError):
            self.load("date,ticker\n2020-01-06,A\n")

    def test_duplicate_row(self):
        with self.assertRaises(PriceParseError) as context:
            self.load("date,ticker,adj_close\n2020-01-06,A,10\n2020-01-06,A,11\n")
        self.assertEqual(3, context.exception.line)

    def test_fewer_than_two_dates(self):
        with self.assertRaises(InsufficientDataError):
            self.load("date,ticker,adj_close\n2020-01-06,A,10\n2020-01-06,B,11\n")

    def test_flat_fraction(self):
        prices = np.ones((11, 2))
        prices[:, 1] = np.arange(1, 12)
        prices[5, 0] = 2.0

        fractions = flat_fractions(self.panel(prices))

        self.assertAlmostEqual(0.8, fractions[0])
        self.assertEqual(0.0, fractions[1])

    def test_zero_volume_counts_as_flat(self):
        prices = np.column_stack([np.arange(1, 12)] * 2).astype(float)
        volumes = np.full((11, 2), 100.0)
        volumes[3, 1] = 0.0

        fractions = flat_fractions(self.panel(prices, volumes), zero_volume_is_flat=True)

        self.assertEqual(0.0, fractions[0])
        self.assertAlmostEqual(0.1, fractions[1])

    def test_no_flat_days_keeps_panel(self):
        panel = self.panel(np.column_stack([np.arange(1, 12)] * 3).astype(float))
        filtered, reports = filter_illiquid(panel)

        self.assertEqual(panel.tickers, filtered.tickers)
        self.assertTrue(all(r.retained for r in reports))

    def test_ticker_flat_on_ten_percent_is_dropped(self):
        prices = np.column_stack([np.arange(1, 22)] * 2).astype(float)
        # 2 of 20 returns are zero
        prices[5, 1] = prices[4, 1]
        prices[6:, 1] -= 1.0
        prices[10, 1] = prices[9, 1]
        prices[11:, 1] -= 1.0

        panel = self.panel(prices)
        self.assertAlmostEqual(0.1, flat_fractions(panel)[1])

        filtered, reports = filter_illiquid(panel, 0.06)

        self.assertEqual(("T0",), filtered.tickers)
        self.assertFalse(reports[1].retained)
        self.assertEqual("illiquid", filtered.ingest_log[-1].action)

    def test_filter_is_idempotent(self):
        panel = price_panel(iid_panel(6, 200, seed=4), illiquid=3, flat_fraction=0.2, seed=5)

        once, first = filter_illiquid(panel, 0.06)
        twice, second = filter_illiquid(once, 0.06)

        self.assertLess(len(once.tickers), len(panel.tickers))
        self.assertEqual(once.tickers, twice.tickers)
        self.assertTrue(all(r.retained for r in second))
        np.testing.assert_array_equal(once.prices, twice.prices)
        self.assertEqual([r.flat_fraction for r in first if r.retained], [r.flat_fraction for r in second])

    def test_no_liquid_stocks(self):
        with self.assertRaises(NoLiquidStocksError) as context:
            filter_illiquid(self.panel(np.ones((5, 2))))
        self.assertEqual("no liquid stocks", context.exception.message)

    def test_invalid_cutoff(self):
        with self.assertRaises(ValueError):
            filter_illiquid(self.panel(np.ones((5, 2))), 1.5)

    def test_log_returns(self):
        prices = np.array([[1.0, 5.0, 100.0], [2.0, 5.0, 101.0], [2.0, 5.0, 99.0]])
        returns = log_returns(self.panel(prices), "T2")

        self.assertEqual(("T0", "T1"), returns.tickers)
        self.assertEqual(2, returns.n_obs)
        self.assertAlmostEqual(math.log(2.0), returns.returns[0, 0], places=12)
        self.assertAlmostEqual(0.693147, returns.returns[0, 0], places=6)
        self.assertEqual(0.0, returns.returns[1, 0])
        self.assertTrue(np.all(returns.returns[:, 1] == 0.0))
        self.assertAlmostEqual(math.log(101.0 / 100.0), returns.index_returns[0], places=12)

    def test_missing_index(self):
        with self.assertRaises(MissingTickerError):
            log_returns(self.panel(np.ones((3, 2))), "INDEX")

    def test_only_index(self):
        with self.assertRaises(InsufficientDataError):
            log_returns(self.panel(np.ones((3, 1))), "T0")

    def test_prices_round_trip_through_returns(self):
        returns = iid_panel(4, 30, seed=3)
        prices = price_panel(returns)
        recovered = log_returns(prices, returns.index_ticker)

        self.assertEqual(returns.tickers, recovered.tickers)
        np.testing.assert_allclose(returns.returns, recovered.returns, atol=1e-12)

    def test_price_csv_is_loadable(self):
        prices = price_panel(iid_panel(3, 20, seed=1), illiquid=1)
        loaded = self.load(write_price_csv(prices))

        self.assertEqual(prices.tickers, loaded.tickers)
        np.testing.assert_allclose(prices.prices, loaded.prices, rtol=1e-14)

    def test_prices_from_returns(self):
        prices = prices_from_returns(np.array([[math.log(2.0)], [0.0]]), np.array([10.0]))
        np.testing.assert_allclose([[10.0], [20.0], [20.0]], prices)

    def test_write_and_read_return_panel(self):
        panel = iid_panel(3, 15, seed=7)
        with tempfile.TemporaryDirectory() as directory:
            write_return_panel(panel, directory)
            restored = read_return_panel(directory)

        self.assertEqual(panel.tickers, restored.tickers)
        self.assertEqual(panel.dates, restored.dates)
        np.testing.assert_array_equal(panel.returns, restored.returns)
        np.testing.assert_array_equal(panel.index_returns, restored.index_returns)

    def test_write_ingest_log(self):
        panel = self.load("date,ticker,adj_close\n2020-01-06,A,10\n2020-01-06,B,-1\n2020-01-07,A,11\n")
        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, "ingest_log.jsonl")
            write_ingest_log(panel.ingest_log, path)
            with open(path, "r", encoding="utf-8") as fp:
                records = [json.loads(line) for line in fp]

        self.assertEqual(1, len(records))
        self.assertEqual({"ticker", "action", "detail"}, set(records[0]))
