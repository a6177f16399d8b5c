import contextlib
import io
import json
import os
import tempfile
import unittest

import numpy as np

from typing import Dict, List, Mapping, Optional, Tuple

from pcinf.cli import run
from pcinf.common.exit_codes import EX_INPUT, EX_OK
from pcinf.market_data import PricePanel, prices_from_returns, write_price_csv
from pcinf.synthetic import block_factor_panel, factor_panel, price_panel, trading_dates

CONFIG = """
run:
    loglevel: CRITICAL
significance:
    replicates: 2
    seed: 7
    max_triples_per_replicate: 20000
calendar:
    min_days: 20
"""


class CliTest(unittest.TestCase):
    def setUp(self) -> None:
        self.directory = tempfile.TemporaryDirectory()
        self.addCleanup(self.directory.cleanup)
        base = self.directory.name

        self.config = os.path.join(base, "pcinf.yml")
        with open(self.config, "w", encoding="utf-8") as fp:
            fp.write(CONFIG)

        panel = factor_panel(8, 400, seed=1, factor_scale=1.0)
        self.prices = os.path.join(base, "prices.csv")
        with open(self.prices, "w", encoding="utf-8") as fp:
            write_price_csv(price_panel(panel, illiquid=1, flat_fraction=0.3, seed=2), fp)

        self.sectors = os.path.join(base, "sectors.csv")
        with open(self.sectors, "w", encoding="utf-8") as fp:
            fp.write("ticker,sector\n")
            for i, ticker in enumerate(panel.tickers):
                fp.write(f"{ticker},{'Energy' if i < 4 else 'Financials'}\n")

    def pcinf(self, *args: str, config: Optional[str] = None) -> Tuple[int, str]:
        stderr = io.StringIO()
        with contextlib.redirect_stderr(stderr):
            code = run([*args, "--config", config or self.config])
        return code, stderr.getvalue()

    def failure(self, output: str) -> Dict[str, str]:
        return json.loads(output.strip().splitlines()[-1])

    def pipeline(self, out: str, jobs: str) -> None:
        common = ["--out", out, "--jobs", jobs]
        for command in (
            ["ingest", "--prices", self.prices],
            ["influence"],
            ["stability"],
            ["sectors", "--sectors", self.sectors],
            ["report"],
        ):
            code, output = self.pcinf(*command, *common)
            self.assertEqual(EX_OK, code, output)

    def files(self, out: str) -> List[str]:
        found = []
        for root, _, names in os.walk(out):
            for name in names:
                found.append(os.path.relpath(os.path.join(root, name), out))
        return sorted(found)

    def read(self, path: str) -> bytes:
        with open(path, "rb") as fp:
            return fp.read()

    def manifest(self, path: str) -> dict:
        with open(path, "r", encoding="utf-8") as fp:
            return json.load(fp)

    def test_pipeline(self):
        out = os.path.join(self.directory.name, "out")
        self.pipeline(out, "2")

        files = self.files(out)
        for expected in (
            "ingest/returns.csv",
            "ingest/liquidity.csv",
            "influence/ranking.csv",
            "influence/thresholds.csv",
            "influence/tensor.csv",
            "stability/tau_matrix.csv",
            "sectors/attribution.csv",
            "report/index.json",
            "report/influence_ranking.csv",
        ):
            self.assertIn(expected, files)

        with open(os.path.join(out, "ingest", "liquidity.csv"), "r", encoding="utf-8") as fp:
            liquidity = fp.read()
        self.assertIn("ILQ0", liquidity)

        with open(os.path.join(out, "ingest", "panel.json"), "r", encoding="utf-8") as fp:
            self.assertNotIn("ILQ0", json.load(fp)["tickers"])

        manifest = self.manifest(os.path.join(out, "influence", "manifest.json"))
        self.assertEqual("influence", manifest["stage"])
        self.assertIn("panel/returns.csv", manifest["inputs"])
        self.assertIn("ranking.csv", manifest["outputs"])
        self.assertIn("influence", manifest["timings"])
        self.assertEqual(64, len(manifest["digest"]))

    def test_reruns_are_identical(self):
        first = os.path.join(self.directory.name, "first")
        second = os.path.join(self.directory.name, "second")
        self.pipeline(first, "1")
        self.pipeline(second, "3")

        files = self.files(first)
        self.assertEqual(files, self.files(second))

        for name in files:
            with self.subTest(file=name):
                if os.path.basename(name) == "manifest.json":
                    self.assertEqual(
                        self.manifest(os.path.join(first, name))["digest"],
                        self.manifest(os.path.join(second, name))["digest"],
                    )
                else:
                    self.assertEqual(self.read(os.path.join(first, name)), self.read(os.path.join(second, name)))

    def test_fisher_method(self):
        out = os.path.join(self.directory.name, "out")
        code, output = self.pcinf("ingest", "--prices", self.prices, "--out", out)
        self.assertEqual(EX_OK, code, output)

        code, output = self.pcinf("influence", "--out", out, "--method", "fisher", "--level", "0.05")
        self.assertEqual(EX_OK, code, output)

        with open(os.path.join(out, "influence", "thresholds.csv"), "r", encoding="utf-8") as fp:
            header = fp.readline()
        self.assertIn("level", header)

    def test_missing_price_file(self):
        out = os.path.join(self.directory.name, "out")
        code, output = self.pcinf("ingest", "--prices", os.path.join(self.directory.name, "none.csv"), "--out", out)

        self.assertEqual(EX_INPUT, code)
        failure = self.failure(output)
        self.assertEqual("ingest", failure["stage"])
        self.assertEqual("E_CONFIG", failure["code"])
        self.assertIn("not found", failure["message"])

    def test_missing_index(self):
        out = os.path.join(self.directory.name, "out")
        code, output = self.pcinf("ingest", "--prices", self.prices, "--index-ticker", "SPX", "--out", out)

        self.assertEqual(EX_INPUT, code)
        self.assertEqual("E_MISSING_TICKER", self.failure(output)["code"])

    def test_influence_needs_ingest(self):
        out = os.path.join(self.directory.name, "out")
        code, output = self.pcinf("influence", "--out", out)

        self.assertEqual(EX_INPUT, code)
        self.assertIn("run 'ingest' first", self.failure(output)["message"])

    def test_invalid_level(self):
        code, output = self.pcinf("ingest", "--prices", self.prices, "--level", "0.9")

        self.assertEqual(EX_INPUT, code)
        self.assertEqual("E_CONFIG", self.failure(output)["code"])

    def test_empty_report(self):
        code, output = self.pcinf("report", "--out", os.path.join(self.directory.name, "nothing"))

        self.assertEqual(EX_INPUT, code)
        self.assertEqual("report", self.failure(output)["stage"])

    def write_prices(self, name: str, panel: PricePanel) -> str:
        path = os.path.join(self.directory.name, name)
        with open(path, "w", encoding="utf-8") as fp:
            write_price_csv(panel, fp)
        return path

    def write_sectors(self, name: str, sectors: Mapping[str, str]) -> str:
        path = os.path.join(self.directory.name, name)
        with open(path, "w", encoding="utf-8") as fp:
            fp.write("ticker,sector\n")
            for ticker, sector in sectors.items():
                fp.write(f"{ticker},{sector}\n")
        return path

    def mean_rate(self, out: str) -> float:
        with open(os.path.join(out, "sectors", "prediction_rates.csv"), "r", encoding="utf-8") as fp:
            rows = [line.split(",") for line in fp.read().splitlines()[1:]]
        return float(np.mean([float(row[2]) for row in rows]))

    def test_only_the_index_is_liquid(self):
        n_obs = 60
        index = np.random.default_rng(3).standard_normal(n_obs) * 0.01
        flat = np.full((n_obs + 1, 2), 10.0)
        prices = np.hstack([flat, prices_from_returns(index[:, None], np.array([100.0]))])
        panel = PricePanel(tickers=("FLAT0", "FLAT1", "INDEX"), dates=trading_dates(n_obs + 1), prices=prices)

        out = os.path.join(self.directory.name, "out")
        code, output = self.pcinf("ingest", "--prices", self.write_prices("flat.csv", panel), "--out", out)

        self.assertEqual(EX_INPUT, code)
        failure = self.failure(output)
        self.assertEqual("E_NO_LIQUID_STOCKS", failure["code"])
        self.assertEqual("no liquid stocks", failure["message"])

    def test_sector_file_missing_a_ticker(self):
        out = os.path.join(self.directory.name, "out")
        for command in (["ingest", "--prices", self.prices], ["influence"]):
            code, output = self.pcinf(*command, "--out", out)
            self.assertEqual(EX_OK, code, output)

        sectors = self.write_sectors("partial.csv", {f"S{i}": "Energy" for i in range(1, 8)})
        code, output = self.pcinf("sectors", "--sectors", sectors, "--out", out)

        self.assertEqual(EX_INPUT, code)
        failure = self.failure(output)
        self.assertEqual("E_SECTOR_MAP", failure["code"])
        self.assertIn("S0", failure["message"])

    def test_single_quarter(self):
        # 41 business days from 2000-01-03 stay within the first quarter
        prices = self.write_prices("short.csv", price_panel(factor_panel(8, 40, seed=3), seed=4))
        out = os.path.join(self.directory.name, "out")

        code, output = self.pcinf("ingest", "--prices", prices, "--out", out)
        self.assertEqual(EX_OK, code, output)

        code, output = self.pcinf("stability", "--out", out)

        self.assertEqual(EX_INPUT, code)
        failure = self.failure(output)
        self.assertEqual("E_INSUFFICIENT_DATA", failure["code"])
        self.assertIn("insufficient quarters", failure["message"])

    def test_permuted_sector_map(self):
        config = os.path.join(self.directory.name, "unfiltered.yml")
        with open(config, "w", encoding="utf-8") as fp:
            fp.write(CONFIG + "influence:\n    filtered: false\n")

        panel, sectors = block_factor_panel(n_sectors=8, per_sector=25, n_obs=1000, seed=8, snr=1.0)
        prices = self.write_prices("blocks.csv", price_panel(panel, seed=9))
        out = os.path.join(self.directory.name, "out")

        for command in (["ingest", "--prices", prices], ["influence"]):
            code, output = self.pcinf(*command, "--out", out, config=config)
            self.assertEqual(EX_OK, code, output)

        labels = {t: sectors.sector(t) for t in panel.tickers}
        true_map = self.write_sectors("true.csv", labels)
        code, output = self.pcinf("sectors", "--sectors", true_map, "--out", out, config=config)
        self.assertEqual(EX_OK, code, output)
        self.assertGreaterEqual(self.mean_rate(out), 0.9)

        rng = np.random.default_rng(10)
        rates = []
        for i in range(3):
            permuted = dict(zip(labels.keys(), (str(s) for s in rng.permutation(list(labels.values())))))
            path = self.write_sectors(f"permuted{i}.csv", permuted)
            code, output = self.pcinf("sectors", "--sectors", path, "--out", out, config=config)
            self.assertEqual(EX_OK, code, output)
            rates.append(self.mean_rate(out))

        self.assertAlmostEqual(1 / 8, float(np.mean(rates)), delta=0.06)

    def test_dense_storage_writes_decisions(self):
        config = os.path.join(self.directory.name, "dense.yml")
        with open(config, "w", encoding="utf-8") as fp:
            fp.write(CONFIG + "influence:\n    storage: dense\n")
        out = os.path.join(self.directory.name, "out")

        for command in (["ingest", "--prices", self.prices], ["influence"]):
            code, output = self.pcinf(*command, "--out", out, config=config)
            self.assertEqual(EX_OK, code, output)

        with open(os.path.join(out, "influence", "decisions.csv"), "r", encoding="utf-8") as fp:
            lines = fp.read().splitlines()
        with open(os.path.join(out, "influence", "tensor.csv"), "r", encoding="utf-8") as fp:
            significant = len(fp.read().splitlines()) - 1

        self.assertEqual("x,y,z,d,z_score,passes,level", lines[0])
        self.assertEqual(8 * 7 * 6 // 2, len(lines) - 1)
        self.assertEqual(significant, sum(1 for line in lines[1:] if line.split(",")[5] == "true"))
        self.assertTrue(os.path.isfile(os.path.join(out, "influence", "tensor.pct1")))
