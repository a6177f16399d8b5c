"""
Pearson and partial correlations and the influence of a stock on the
index-conditioned correlation of a stock pair.

The influence of Z on the pair (X, Y) is

    d(X,Y:Z) = rho(X,Y:M) - rho(X,Y:M,Z)

where M is the market index. The second order partial correlation only needs three
entries of the first order partial correlation matrix, so all N(N-1)(N-2)/2 triples
are evaluated from that matrix, one conditioning stock Z at a time.
"""

import math
import struct

import numpy as np
import pandas as pd

from dataclasses import dataclass, field
from logging import getLogger
from typing import Iterator, List, Optional, Sequence, Tuple

from .common.errors import (
    DegenerateInputError,
    Diagnostic,
    DomainError,
    InputError,
    InsufficientDataError,
    SingularConditioningError,
)
from .common.parallel import chunked, map_ordered, worker_count
from .market_data import ReturnPanel

STAGE = "correlation_engine"

mylogger = getLogger(STAGE)

SINGULAR_TOLERANCE = 1e-12
RANGE_TOLERANCE = 1e-12

MIN_OBSERVATIONS = 10
MAX_DENSE_STOCKS = 60

DENSE = "dense"
SIGNIFICANT = "significant"
STORAGE_MODES = (DENSE, SIGNIFICANT)

INDEX_VARIANT = "index"
STAR_VARIANT = "star"
VARIANTS = (INDEX_VARIANT, STAR_VARIANT)

STATISTIC_D = "d"
STATISTIC_FISHER_Z = "fisher_z"

TENSOR_MAGIC = b"PCT1"


def _check_coefficient(name: str, value: float) -> float:
    if not (-1.0 - RANGE_TOLERANCE <= value <= 1.0 + RANGE_TOLERANCE):
        raise DomainError(f"Expected {name} within [-1, 1] but was {value}", stage=STAGE)
    return float(value)


def _check_conditioning(name: str, value: float):
    if abs(value) >= 1.0 - SINGULAR_TOLERANCE:
        raise SingularConditioningError(
            f"Cannot condition on a variable with |{name}| = {abs(value)}", stage=STAGE
        )


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """
    Pearson correlation coefficient with population normalization

    :param x: first return vector
    :type x: Sequence[float]
    :param y: second return vector of the same length
    :type y: Sequence[float]
    :raises ValueError: if the lengths differ or are below 3
    :raises DegenerateInputError: if a vector has zero variance
    :return: the coefficient in [-1, 1]
    :rtype: float
    """
    a = np.asarray(x, dtype=float)
    b = np.asarray(y, dtype=float)

    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"Expected vectors of equal length but got {a.shape} and {b.shape}")

    if len(a) < 3:
        raise ValueError(f"Expected at least 3 observations but got {len(a)}")

    a = a - a.mean()
    b = b - b.mean()
    sa = math.sqrt(np.dot(a, a) / len(a))
    sb = math.sqrt(np.dot(b, b) / len(b))

    if sa == 0.0 or sb == 0.0:
        raise DegenerateInputError("Cannot correlate a vector with zero variance", stage=STAGE)

    rho = np.dot(a, b) / len(a) / (sa * sb)
    return float(min(1.0, max(-1.0, rho)))


def partial_corr_on_index(rho_xy: float, rho_xm: float, rho_ym: float) -> float:
    """
    first order partial correlation rho(X,Y:M) from Pearson coefficients

    :raises DomainError: if a coefficient lies outside [-1, 1]
    :raises SingularConditioningError: if |rho_xm| or |rho_ym| is 1
    """
    rho_xy = _check_coefficient("rho_xy", rho_xy)
    rho_xm = _check_coefficient("rho_xm", rho_xm)
    rho_ym = _check_coefficient("rho_ym", rho_ym)

    _check_conditioning("rho_xm", rho_xm)
    _check_conditioning("rho_ym", rho_ym)

    return (rho_xy - rho_xm * rho_ym) / math.sqrt((1.0 - rho_xm**2) * (1.0 - rho_ym**2))


def partial_corr_on_index_and_stock(rho_xy_m: float, rho_xz_m: float, rho_yz_m: float) -> float:
    """
    second order partial correlation rho(X,Y:M,Z) from first order partial correlations

    :raises DomainError: if a coefficient lies outside [-1, 1]
    :raises SingularConditioningError: if |rho_xz_m| or |rho_yz_m| is 1
    """
    return partial_corr_on_index(rho_xy_m, rho_xz_m, rho_yz_m)


def influence_triple(rho_xy_m: float, rho_xz_m: float, rho_yz_m: float) -> float:
    """
    influence d(X,Y:Z) = rho(X,Y:M) - rho(X,Y:M,Z); may be negative
    """
    return _check_coefficient("rho_xy_m", rho_xy_m) - partial_corr_on_index_and_stock(rho_xy_m, rho_xz_m, rho_yz_m)


def influence_star_triple(rho_xy: float, rho_xy_z: float) -> float:
    """
    the index free influence d*(X,Y:Z) = rho(X,Y) - rho(X,Y:Z)

    In a market, d* is dominated by the common index mode.
    """
    return _check_coefficient("rho_xy", rho_xy) - _check_coefficient("rho_xy_z", rho_xy_z)


@dataclass(frozen=True)
class CorrelationMatrix:
    tickers: Tuple[str, ...]
    values: np.ndarray
    index_correlations: np.ndarray


@dataclass(frozen=True)
class PartialCorrelationMatrix:
    """
    rho(X,Y:M) for all stock pairs.

    Rows of stocks that are perfectly correlated with the index are NaN and listed in ``singular``.
    """

    tickers: Tuple[str, ...]
    values: np.ndarray
    singular: Tuple[str, ...] = ()


def _readonly(values: np.ndarray) -> np.ndarray:
    values.setflags(write=False)
    return values


def correlation_matrix(panel: ReturnPanel) -> CorrelationMatrix:
    """
    Pearson correlations between all stocks and between each stock and the index

    :param panel: the return panel
    :type panel: ReturnPanel
    :raises InsufficientDataError: if there are fewer than 3 observations
    :raises DegenerateInputError: if a series has zero variance
    :return: the correlation matrix
    :rtype: CorrelationMatrix
    """
    if panel.n_obs < 3:
        raise InsufficientDataError(f"Expected at least 3 observations but got {panel.n_obs}", stage=STAGE)

    data = np.column_stack([panel.returns, panel.index_returns])
    centered = data - data.mean(axis=0)
    sd = np.sqrt((centered**2).mean(axis=0))

    if np.any(sd == 0.0):
        names = [*panel.tickers, panel.index_ticker]
        flat = ", ".join(n for n, s in zip(names, sd) if s == 0.0)
        raise DegenerateInputError(f"zero variance return series: {flat}", stage=STAGE)

    scaled = centered / sd
    full = scaled.T @ scaled / panel.n_obs
    full = np.clip((full + full.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(full, 1.0)

    n = panel.n_stocks
    return CorrelationMatrix(
        tickers=panel.tickers,
        values=_readonly(full[:n, :n].copy()),
        index_correlations=_readonly(full[:n, n].copy()),
    )


def partial_correlation_matrix(corr: CorrelationMatrix) -> PartialCorrelationMatrix:
    """
    rho(X,Y:M) for all pairs, the vectorised form of :func:`partial_corr_on_index`

    :param corr: the Pearson correlations
    :type corr: CorrelationMatrix
    :return: the partial correlation matrix
    :rtype: PartialCorrelationMatrix
    """
    m = corr.index_correlations
    singular = np.abs(m) >= 1.0 - SINGULAR_TOLERANCE

    with np.errstate(divide="ignore", invalid="ignore"):
        residual = np.sqrt(1.0 - m**2)
        values = (corr.values - np.outer(m, m)) / np.outer(residual, residual)

    values[singular, :] = np.nan
    values[:, singular] = np.nan
    np.fill_diagonal(values, 1.0)

    names = tuple(t for t, s in zip(corr.tickers, singular) if s)
    for name in names:
        mylogger.warning("%s is perfectly correlated with the index", name, extra={"stage": STAGE})

    return PartialCorrelationMatrix(corr.tickers, _readonly(values), names)


def index_scatter(corr: CorrelationMatrix, partial: PartialCorrelationMatrix) -> pd.DataFrame:
    """
    plot-ready table of rho(X,Y) against rho(X,Y:M) for every stock pair

    :return: a frame with the columns ``x, y, rho, rho_m``
    :rtype: pd.DataFrame
    """
    iu = np.triu_indices(len(corr.tickers), 1)
    tickers = np.asarray(corr.tickers, dtype=object)
    return pd.DataFrame(
        {
            "x": tickers[iu[0]],
            "y": tickers[iu[1]],
            "rho": corr.values[iu],
            "rho_m": partial.values[iu],
        }
    )


@dataclass(frozen=True)
class TripleBlock:
    """
    all triples (x, y : z) with x < y sharing one conditioning stock z

    ``base`` is the correlation before conditioning on z, ``conditioned`` after.
    Triples which cannot be conditioned are listed in ``skipped`` as (x, y) pairs.
    """

    z: int
    x: np.ndarray
    y: np.ndarray
    base: np.ndarray
    conditioned: np.ndarray
    skipped: np.ndarray

    @property
    def d(self) -> np.ndarray:
        return self.base - self.conditioned


class TripleKernel(object):
    """
    Evaluates the triples of a correlation matrix one conditioning stock at a time.

    The matrix is either the index-conditioned partial correlation matrix (influence d)
    or the raw correlation matrix (index free influence d*). It is shared read only between workers.
    """

    def __init__(self, matrix: np.ndarray) -> None:
        self.matrix = matrix
        self.n = matrix.shape[0]
        iu = np.triu_indices(self.n, 1)
        self.pair_x = iu[0].astype(np.int32)
        self.pair_y = iu[1].astype(np.int32)
        self.pair_base = matrix[iu]

    @property
    def triples(self) -> int:
        n = self.n
        return n * (n - 1) * (n - 2) // 2

    @property
    def triples_per_conditioner(self) -> int:
        n = self.n
        return (n - 1) * (n - 2) // 2

    def _evaluate(self, z: int):
        keep = (self.pair_x != z) & (self.pair_y != z)
        x = self.pair_x[keep]
        y = self.pair_y[keep]
        base = self.pair_base[keep]

        a = self.matrix[:, z]
        ax = a[x]
        ay = a[y]

        limit = 1.0 - SINGULAR_TOLERANCE
        with np.errstate(invalid="ignore"):
            singular = ~((np.abs(ax) < limit) & (np.abs(ay) < limit) & (np.abs(base) < limit))

        with np.errstate(divide="ignore", invalid="ignore"):
            conditioned = (base - ax * ay) / np.sqrt((1.0 - ax * ax) * (1.0 - ay * ay))

        return x, y, base, conditioned, singular

    def full_d(self, z: int) -> np.ndarray:
        """
        d of all pairs not containing ``z`` in pair order, NaN where the triple is singular
        """
        _, _, base, conditioned, singular = self._evaluate(z)
        d = base - conditioned
        d[singular] = np.nan
        return d

    def block(self, z: int) -> TripleBlock:
        """
        evaluates all pairs for the conditioning stock ``z``
        """
        x, y, base, conditioned, singular = self._evaluate(z)
        valid = ~singular
        return TripleBlock(
            z=z,
            x=x[valid],
            y=y[valid],
            base=base[valid],
            conditioned=conditioned[valid],
            skipped=np.column_stack([x[singular], y[singular]]),
        )

    def blocks(self, jobs: Optional[int] = None, conditioners: Optional[Sequence[int]] = None) -> Iterator[TripleBlock]:
        """
        yields the blocks in conditioner order, computing them in parallel batches

        :param jobs: the number of workers, defaults to the number of logical cores
        :type jobs: Optional[int], optional
        :param conditioners: the conditioning stocks, defaults to all
        :type conditioners: Optional[Sequence[int]], optional
        """
        zs = list(range(self.n)) if conditioners is None else list(conditioners)
        workers = worker_count(jobs)
        batch = max(workers * 4, 1)

        for start in range(0, len(zs), batch):
            group = zs[start : start + batch]
            for blocks in map_ordered(self._blocks, chunked(group, workers), workers):
                yield from blocks

    def _blocks(self, zs: List[int]) -> List[TripleBlock]:
        return [self.block(z) for z in zs]


@dataclass(frozen=True)
class InfluenceEntry:
    x: str
    y: str
    z: str
    d: float


@dataclass(frozen=True)
class InfluenceTensor:
    """
    influence values d(X,Y:Z) stored column wise for x < y.

    ``base`` holds rho(X,Y:M) of each stored triple so rho(X,Y:M,Z) = base - d
    can be recovered for the Fisher test.
    """

    tickers: Tuple[str, ...]
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    d: np.ndarray
    base: np.ndarray
    storage_mode: str = DENSE
    threshold: Optional[float] = None
    statistic: str = STATISTIC_D
    variant: str = INDEX_VARIANT
    n_obs: int = 0
    evaluated: int = 0
    skipped: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int32))
    diagnostics: Tuple[Diagnostic, ...] = ()

    def __len__(self) -> int:
        return len(self.d)

    def entries(self) -> Iterator[InfluenceEntry]:
        t = self.tickers
        for x, y, z, d in zip(self.x, self.y, self.z, self.d):
            yield InfluenceEntry(t[x], t[y], t[z], float(d))

    def lookup(self, x: str, y: str, z: str) -> Optional[float]:
        """
        returns d(x,y:z) = d(y,x:z) or None if it is not stored
        """
        i, j, k = self.tickers.index(x), self.tickers.index(y), self.tickers.index(z)
        i, j = min(i, j), max(i, j)
        found = np.nonzero((self.x == i) & (self.y == j) & (self.z == k))[0]
        return float(self.d[found[0]]) if len(found) else None

    def subset(self, keep: np.ndarray, threshold: Optional[float] = None) -> "InfluenceTensor":
        """
        returns the entries selected by the boolean mask ``keep`` as a significant-only tensor
        """
        return InfluenceTensor(
            tickers=self.tickers,
            x=self.x[keep],
            y=self.y[keep],
            z=self.z[keep],
            d=self.d[keep],
            base=self.base[keep],
            storage_mode=SIGNIFICANT,
            threshold=self.threshold if threshold is None else threshold,
            statistic=self.statistic,
            variant=self.variant,
            n_obs=self.n_obs,
            evaluated=self.evaluated,
            skipped=self.skipped,
            diagnostics=self.diagnostics,
        )

    def scaled(self, factor: float) -> "InfluenceTensor":
        """
        returns a tensor with every influence multiplied by ``factor``
        """
        return InfluenceTensor(
            tickers=self.tickers,
            x=self.x,
            y=self.y,
            z=self.z,
            d=self.d * factor,
            base=self.base,
            storage_mode=self.storage_mode,
            threshold=self.threshold,
            statistic=self.statistic,
            variant=self.variant,
            n_obs=self.n_obs,
            evaluated=self.evaluated,
            skipped=self.skipped,
            diagnostics=self.diagnostics,
        )


def fisher_z_scores(base: np.ndarray, conditioned: np.ndarray, n_obs: int) -> np.ndarray:
    """
    vectorised z difference statistic of rho(X,Y:M) and rho(X,Y:M,Z)
    """
    with np.errstate(divide="ignore"):
        return (np.arctanh(base) - np.arctanh(conditioned)) / math.sqrt(2.0 / (n_obs - 3))


def base_matrix(panel: ReturnPanel, variant: str = INDEX_VARIANT) -> np.ndarray:
    """
    the matrix the triple kernel conditions: rho(X,Y:M) for the influence, rho(X,Y) for d*
    """
    if variant not in VARIANTS:
        raise ValueError(f"Unsupported variant {variant}. Supported variants are: {', '.join(VARIANTS)}")

    corr = correlation_matrix(panel)
    if variant == STAR_VARIANT:
        return corr.values

    return partial_correlation_matrix(corr).values


def _singular_diagnostics(tickers: Sequence[str], blocks: List[TripleBlock]) -> List[Diagnostic]:
    diagnostics = []
    for block in blocks:
        if len(block.skipped) == 0:
            continue
        examples = ", ".join(f"({tickers[x]},{tickers[y]})" for x, y in block.skipped[:3])
        detail = (
            f"skipped {len(block.skipped)} singular triple(s) conditioned on {tickers[block.z]}: {examples}"
        )
        mylogger.warning(detail, extra={"stage": STAGE})
        diagnostics.append(Diagnostic(STAGE, SingularConditioningError.code, detail))
    return diagnostics


def compute_influence_tensor(
    panel: ReturnPanel,
    mode: str = SIGNIFICANT,
    threshold: Optional[float] = None,
    statistic: str = STATISTIC_D,
    variant: str = INDEX_VARIANT,
    jobs: Optional[int] = None,
) -> InfluenceTensor:
    """
    evaluates all N(N-1)(N-2)/2 triples d(X,Y:Z)

    In ``significant`` mode only entries whose statistic exceeds ``threshold`` in absolute
    value are kept; the statistic is either |d| or the Fisher z difference score.
    Triples that cannot be conditioned are skipped and reported as diagnostics.
    The result does not depend on the number of workers.

    :param panel: the return panel
    :type panel: ReturnPanel
    :param mode: ``dense`` or ``significant``, defaults to ``significant``
    :type mode: str
    :param threshold: the significance cutoff, required in ``significant`` mode
    :type threshold: Optional[float]
    :param statistic: ``d`` or ``fisher_z``
    :type statistic: str
    :param variant: ``index`` for d or ``star`` for the index free d*
    :type variant: str
    :param jobs: the number of workers, defaults to the number of logical cores
    :type jobs: Optional[int]
    :raises InsufficientDataError: if N < 3 or there are fewer than 10 observations
    :raises InputError: on invalid mode/threshold combinations
    :return: the tensor
    :rtype: InfluenceTensor
    """
    n = panel.n_stocks

    if mode not in STORAGE_MODES:
        raise InputError(f"Unsupported storage mode {mode}", stage=STAGE)

    if statistic not in (STATISTIC_D, STATISTIC_FISHER_Z):
        raise InputError(f"Unsupported statistic {statistic}", stage=STAGE)

    if n < 3:
        raise InsufficientDataError(f"Expected at least 3 stocks but got {n}", stage=STAGE)

    if panel.n_obs < MIN_OBSERVATIONS:
        raise InsufficientDataError(
            f"Expected at least {MIN_OBSERVATIONS} observations but got {panel.n_obs}", stage=STAGE
        )

    if mode == DENSE and n > MAX_DENSE_STOCKS:
        raise InputError(f"Dense storage is limited to {MAX_DENSE_STOCKS} stocks but got {n}", stage=STAGE)

    if mode == SIGNIFICANT and threshold is None:
        raise InputError("Significant-only storage requires a threshold", stage=STAGE)

    kernel = TripleKernel(base_matrix(panel, variant))

    mylogger.debug(
        "Evaluating %d triple(s) of %d stock(s), mode %s", kernel.triples, n, mode, extra={"stage": STAGE}
    )

    xs, ys, zs, ds, bases = [], [], [], [], []
    skipped = []
    singular_blocks = []

    for block in kernel.blocks(jobs):
        d = block.d
        if mode == SIGNIFICANT:
            assert threshold is not None
            if statistic == STATISTIC_FISHER_Z:
                keep = np.abs(fisher_z_scores(block.base, block.conditioned, panel.n_obs)) > threshold
            else:
                keep = np.abs(d) > threshold
        else:
            keep = np.ones(len(d), dtype=bool)

        xs.append(block.x[keep])
        ys.append(block.y[keep])
        zs.append(np.full(int(keep.sum()), block.z, dtype=np.int32))
        ds.append(d[keep])
        bases.append(block.base[keep])

        if len(block.skipped):
            singular_blocks.append(block)
            skipped.append(
                np.column_stack([block.skipped, np.full(len(block.skipped), block.z, dtype=np.int32)])
            )

    def concat(parts, dtype):
        return np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype=dtype)

    tensor = InfluenceTensor(
        tickers=panel.tickers,
        x=concat(xs, np.int32),
        y=concat(ys, np.int32),
        z=concat(zs, np.int32),
        d=concat(ds, np.float64),
        base=concat(bases, np.float64),
        storage_mode=mode,
        threshold=threshold if mode == SIGNIFICANT else None,
        statistic=statistic,
        variant=variant,
        n_obs=panel.n_obs,
        evaluated=kernel.triples,
        skipped=np.concatenate(skipped).astype(np.int32) if skipped else np.zeros((0, 3), dtype=np.int32),
        diagnostics=tuple(_singular_diagnostics(panel.tickers, singular_blocks)),
    )

    mylogger.info(
        "Evaluated %d triple(s), stored %d (%s)", kernel.triples, len(tensor), mode, extra={"stage": STAGE}
    )
    return tensor


def write_tensor_csv(tensor: InfluenceTensor, path: str) -> None:
    """
    writes the tensor as CSV ``x,y,z,d`` with ticker names
    """
    tickers = np.asarray(tensor.tickers, dtype=object)
    frame = pd.DataFrame(
        {
            "x": tickers[tensor.x],
            "y": tickers[tensor.y],
            "z": tickers[tensor.z],
            "d": tensor.d,
        }
    )
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def write_tensor_binary(tensor: InfluenceTensor, path: str) -> None:
    """
    writes the tensor in the columnar ``PCT1`` format:

    magic ``PCT1`` | uint32 ticker count | per ticker: uint32 byte length, UTF-8 bytes |
    uint64 entry count | int32 x[] | int32 y[] | int32 z[] | float64 d[]

    All numbers are little-endian.
    """
    with open(path, "wb") as fp:
        fp.write(TENSOR_MAGIC)
        fp.write(struct.pack("<I", len(tensor.tickers)))
        for ticker in tensor.tickers:
            encoded = ticker.encode("utf-8")
            fp.write(struct.pack("<I", len(encoded)))
            fp.write(encoded)
        fp.write(struct.pack("<Q", len(tensor)))
        for column in (tensor.x, tensor.y, tensor.z):
            fp.write(np.asarray(column, dtype="<i4").tobytes())
        fp.write(np.asarray(tensor.d, dtype="<f8").tobytes())


def read_tensor_binary(path: str) -> Tuple[Tuple[str, ...], np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    reads a ``PCT1`` file

    :raises InputError: if the file is not a ``PCT1`` file
    :return: tickers, x, y, z, d
    """
    with open(path, "rb") as fp:
        data = fp.read()

    if data[:4] != TENSOR_MAGIC:
        raise InputError(f"{path} is not a PCT1 tensor file", stage=STAGE)

    offset = 4
    (count,) = struct.unpack_from("<I", data, offset)
    offset += 4
    tickers = []
    for _ in range(count):
        (length,) = struct.unpack_from("<I", data, offset)
        offset += 4
        tickers.append(data[offset : offset + length].decode("utf-8"))
        offset += length

    (entries,) = struct.unpack_from("<Q", data, offset)
    offset += 8

    columns = []
    for _ in range(3):
        columns.append(np.frombuffer(data, dtype="<i4", count=entries, offset=offset).astype(np.int32))
        offset += 4 * entries
    d = np.frombuffer(data, dtype="<f8", count=entries, offset=offset).astype(np.float64)

    return tuple(tickers), columns[0], columns[1], columns[2], d
