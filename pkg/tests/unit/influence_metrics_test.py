import os
import tempfile
import unittest

import numpy as np

from logging import FATAL, getLogger

from pcinf.common.errors import DomainError, InputError
from pcinf.correlation_engine import DENSE, SIGNIFICANT, InfluenceTensor, compute_influence_tensor
from pcinf.influence_metrics import (
    INCOMING,
    NO_INFLUENCE,
    OUTGOING,
    UNFILTERED,
    InfluenceAccumulator,
    InfluenceMatrix,
    InfluenceRanking,
    rank_by_influence,
    read_influence_matrix,
    read_ranking,
    stock_influence,
    stream_stock_influence,
    total_influence,
    write_influence_matrix,
    write_ranking,
)
from pcinf.synthetic import factor_panel


class InfluenceMetricsTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        for name in ("influence_metrics", "correlation_engine"):
            getLogger(name).setLevel(FATAL)

    def matrix(self, values) -> InfluenceMatrix:
        values = np.array(values, dtype=float)
        n = values.shape[0]
        np.fill_diagonal(values, np.nan)
        tickers = tuple(f"S{i}" for i in range(n))
        return InfluenceMatrix(tickers, values, (~np.isnan(values)).astype(np.int64))

    def brute_force(self, tensor: InfluenceTensor) -> np.ndarray:
        n = len(tensor.tickers)
        names = tensor.tickers
        expected = np.full((n, n), np.nan)
        for x in range(n):
            for z in range(n):
                if x == z:
                    continue
                found = []
                for y in range(n):
                    if y in (x, z):
                        continue
                    d = tensor.lookup(names[x], names[y], names[z])
                    if d is not None:
                        found.append(d)
                if found:
                    expected[x, z] = sum(found) / len(found)
        return expected

    def test_zero_tensor(self):
        triples = [(x, y, z) for z in range(4) for x in range(4) for y in range(x + 1, 4) if z not in (x, y)]
        x, y, z = (np.array(c, dtype=np.int32) for c in zip(*triples))
        tensor = InfluenceTensor(
            tickers=("A", "B", "C", "D"), x=x, y=y, z=z, d=np.zeros(len(x)), base=np.zeros(len(x))
        )

        matrix = stock_influence(tensor, UNFILTERED)

        off_diagonal = ~np.eye(4, dtype=bool)
        np.testing.assert_array_equal(np.zeros(12), matrix.values[off_diagonal])
        self.assertTrue(np.all(np.isnan(np.diag(matrix.values))))
        np.testing.assert_array_equal(np.full(12, 2), matrix.counts[off_diagonal])

    def test_matches_brute_force(self):
        tensor = compute_influence_tensor(factor_panel(7, 120, seed=1), DENSE)
        matrix = stock_influence(tensor, UNFILTERED)

        np.testing.assert_allclose(self.brute_force(tensor), matrix.values, rtol=0, atol=1e-15)

    def test_filtered_matches_brute_force(self):
        tensor = compute_influence_tensor(factor_panel(8, 120, seed=2), SIGNIFICANT, threshold=0.03)
        matrix = stock_influence(tensor)

        np.testing.assert_allclose(self.brute_force(tensor), matrix.values, rtol=0, atol=1e-15)
        self.assertLess(int(matrix.counts.sum()), 2 * 8 * 7 * 6 // 2)

    def test_filtered_counts_never_exceed_unfiltered(self):
        panel = factor_panel(8, 120, seed=2)
        unfiltered = stock_influence(compute_influence_tensor(panel, DENSE), UNFILTERED)

        for threshold in (0.0, 0.01, 0.03, 0.1):
            with self.subTest(threshold=threshold):
                filtered = stock_influence(compute_influence_tensor(panel, SIGNIFICANT, threshold=threshold))
                self.assertTrue(np.all(filtered.counts <= unfiltered.counts))

    def test_scaling_the_tensor_scales_the_aggregates(self):
        tensor = compute_influence_tensor(factor_panel(7, 150, seed=8), DENSE)
        matrix = stock_influence(tensor, UNFILTERED)
        total = total_influence(matrix)

        stretched = stock_influence(tensor.scaled(2.5), UNFILTERED)
        np.testing.assert_allclose(2.5 * matrix.values, stretched.values, rtol=1e-12, atol=1e-15)
        np.testing.assert_array_equal(matrix.counts, stretched.counts)

        stretched_total = total_influence(stretched)
        np.testing.assert_allclose(2.5 * total.values, stretched_total.values, rtol=1e-12, atol=1e-15)
        self.assertEqual(
            rank_by_influence(total.as_dict()).tickers, rank_by_influence(stretched_total.as_dict()).tickers
        )

        negated = total_influence(stock_influence(tensor.scaled(-1.0), UNFILTERED))
        np.testing.assert_array_equal(-total.values, negated.values)
        self.assertEqual(
            tuple(reversed(rank_by_influence(total.as_dict()).tickers)), rank_by_influence(negated.as_dict()).tickers
        )

    def test_unfiltered_needs_dense_tensor(self):
        tensor = compute_influence_tensor(factor_panel(5, 60, seed=1), SIGNIFICANT, threshold=0.01)
        with self.assertRaises(InputError):
            stock_influence(tensor, UNFILTERED)

    def test_streaming_equals_tensor(self):
        panel = factor_panel(9, 150, seed=3)

        dense = stock_influence(compute_influence_tensor(panel, DENSE), UNFILTERED)
        streamed = stream_stock_influence(panel, jobs=2)
        np.testing.assert_array_equal(dense.values, streamed.values)
        np.testing.assert_array_equal(dense.counts, streamed.counts)

        filtered = stock_influence(compute_influence_tensor(panel, SIGNIFICANT, threshold=0.02))
        streamed = stream_stock_influence(panel, threshold=0.02)
        np.testing.assert_array_equal(filtered.values, streamed.values)

    def test_accumulator_grouping(self):
        tensor = compute_influence_tensor(factor_panel(6, 100, seed=4), DENSE)

        whole = InfluenceAccumulator(tensor.tickers)
        whole.add_tensor(tensor)

        parts = InfluenceAccumulator(tensor.tickers)
        half = len(tensor) // 2
        parts.add(tensor.x[:half], tensor.y[:half], tensor.z[:half], tensor.d[:half])
        parts.add(tensor.x[half:], tensor.y[half:], tensor.z[half:], tensor.d[half:])

        np.testing.assert_allclose(whole.matrix().values, parts.matrix().values, atol=1e-15)
        np.testing.assert_array_equal(whole.counts, parts.counts)

    def test_entry(self):
        matrix = self.matrix([[0, 1, np.nan], [2, 0, 3], [4, 5, 0]])
        self.assertEqual(1.0, matrix.entry("S0", "S1"))
        self.assertIsNone(matrix.entry("S0", "S2"))
        self.assertIsNone(matrix.entry("S1", "S1"))

    def test_constant_matrix(self):
        total = total_influence(self.matrix(np.full((5, 5), 0.25)))

        self.assertEqual(tuple(f"S{i}" for i in range(5)), total.tickers)
        np.testing.assert_allclose(np.full(5, 0.25), total.values)

    def test_single_column(self):
        values = np.zeros((4, 4))
        values[:, 2] = 0.25

        outgoing = total_influence(self.matrix(values)).as_dict()
        incoming = total_influence(self.matrix(values), INCOMING).as_dict()

        self.assertEqual({"S0": 0.0, "S1": 0.0, "S2": 0.25, "S3": 0.0}, outgoing)
        self.assertEqual(0.0, incoming["S2"])
        self.assertAlmostEqual(0.25 / 3, incoming["S0"])

    def test_matches_brute_force_mean(self):
        rng = np.random.default_rng(5)
        matrix = self.matrix(rng.normal(size=(6, 6)))
        total = total_influence(matrix, OUTGOING)

        for i, ticker in enumerate(total.tickers):
            column = [matrix.values[x, i] for x in range(6) if x != i]
            self.assertAlmostEqual(sum(column) / len(column), total.values[i], delta=1e-12)

    def test_absent_stock_is_excluded(self):
        values = np.full((3, 3), 0.1)
        values[:, 1] = np.nan
        total = total_influence(self.matrix(values))

        self.assertEqual(("S0", "S2"), total.tickers)
        self.assertEqual(1, len(total.diagnostics))
        self.assertEqual(NO_INFLUENCE, total.diagnostics[0].code)

    def test_unsupported_direction(self):
        with self.assertRaises(InputError):
            total_influence(self.matrix(np.zeros((3, 3))), "sideways")

    def test_rank_distinct(self):
        ranking = rank_by_influence({"A": 0.1, "B": 0.3, "C": -0.2}, "2020Q1")

        self.assertEqual(("B", "A", "C"), ranking.tickers)
        self.assertEqual((0.3, 0.1, -0.2), ranking.d_values)
        self.assertEqual("2020Q1", ranking.period)
        self.assertEqual({"B": 1, "A": 2, "C": 3}, ranking.positions())

    def test_rank_ties(self):
        ranking = rank_by_influence({"C": 0.5, "A": 0.5, "B": 0.5})
        self.assertEqual(("A", "B", "C"), ranking.tickers)

    def test_rank_ignores_input_order(self):
        values = {f"T{i}": float(v) for i, v in enumerate(np.random.default_rng(1).normal(size=20))}
        reversed_values = dict(reversed(list(values.items())))

        self.assertEqual(rank_by_influence(values), rank_by_influence(reversed_values))

    def test_rank_rejects_nan(self):
        with self.assertRaises(DomainError):
            rank_by_influence({"A": 0.1, "B": float("nan")})

    def test_ranking_must_descend(self):
        with self.assertRaises(ValueError):
            InfluenceRanking("full", ("A", "B"), (0.1, 0.2))
        with self.assertRaises(ValueError):
            InfluenceRanking("full", ("A", "A"), (0.2, 0.1))

    def test_matrix_file(self):
        matrix = stock_influence(compute_influence_tensor(factor_panel(5, 80, seed=6), SIGNIFICANT, threshold=0.05))

        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, "influence_matrix.csv")
            counts_path = os.path.join(directory, "influence_counts.csv")
            write_influence_matrix(matrix, path, counts_path)
            restored = read_influence_matrix(path, counts_path)
            without_counts = read_influence_matrix(path)

        self.assertEqual(matrix.tickers, restored.tickers)
        np.testing.assert_array_equal(matrix.values, restored.values)
        np.testing.assert_array_equal(matrix.counts, restored.counts)
        np.testing.assert_array_equal(~np.isnan(matrix.values), without_counts.counts > 0)

    def test_ranking_file(self):
        ranking = rank_by_influence({"A": 0.1, "B": 0.3, "C": -0.2})

        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, "ranking.csv")
            write_ranking(ranking, path)
            with open(path, "r", encoding="utf-8") as fp:
                header = fp.readline().strip()
            restored = read_ranking(path)

        self.assertEqual("rank,ticker,d_value", header)
        self.assertEqual(ranking, restored)
