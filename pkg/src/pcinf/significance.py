import json
import math

import numpy as np
import pandas as pd

from dataclasses import dataclass, asdict, replace
from logging import getLogger
from typing import Iterator, List, Optional, Sequence, Tuple

from scipy import stats

from .common.errors import ConfigError, DomainError, InsufficientSampleError
from .common.parallel import map_ordered
from .correlation_engine import (
    INDEX_VARIANT,
    STATISTIC_D,
    STATISTIC_FISHER_Z,
    InfluenceTensor,
    TripleKernel,
    base_matrix,
    fisher_z_scores,
)
from .market_data import ReturnPanel

STAGE = "significance"

mylogger = getLogger(STAGE)

SHUFFLE = "shuffle"
FISHER = "fisher"
METHODS = (SHUFFLE, FISHER)

DEFAULT_LEVEL = 0.02
DEFAULT_LEVELS = (0.01, 0.02, 0.05, 0.10, 0.20)
DEFAULT_REPLICATES = 10
DEFAULT_MAX_TRIPLES = 1_000_000

# spawn key of the subsampling stream, disjoint from the column streams 0..N
SAMPLE_STREAM = 1 << 32


def _generator(seed: int, *key: int) -> np.random.Generator:
    """
    a counter based Philox generator for the stream ``key`` of ``seed``
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def _check_level(level: float):
    if not 0.0 < level <= 0.5:
        raise ConfigError(f"Expected significance level within (0, 0.5] but was {level}", stage=STAGE)


def fisher_z(rho: float) -> float:
    """
    Fisher transformation z = artanh(rho)

    :raises DomainError: if |rho| >= 1
    """
    if not abs(rho) < 1.0:
        raise DomainError(f"Fisher transformation requires |rho| < 1 but was {rho}", stage=STAGE)
    return math.atanh(rho)


def fisher_difference_test(rho1: float, rho2: float, n: int) -> Tuple[float, float]:
    """
    tests whether rho(X,Y:M) and rho(X,Y:M,Z) differ

    :param rho1: rho(X,Y:M)
    :type rho1: float
    :param rho2: rho(X,Y:M,Z)
    :type rho2: float
    :param n: the sample size
    :type n: int
    :raises InsufficientSampleError: if n <= 3
    :raises DomainError: if |rho1| or |rho2| >= 1
    :return: the z score and its two-tailed p value from the standard normal
    :rtype: Tuple[float, float]
    """
    if n <= 3:
        raise InsufficientSampleError(f"Fisher test requires n > 3 but was {n}", stage=STAGE)

    z_score = (fisher_z(rho1) - fisher_z(rho2)) / math.sqrt(2.0 / (n - 3))
    p_value = float(2.0 * stats.norm.sf(abs(z_score)))
    return z_score, min(p_value, 1.0)


def critical_value(level: float, tails: int = 2) -> float:
    """
    the standard normal critical value of a significance level

    :param level: the significance level
    :type level: float
    :param tails: 2 for a two-tailed test (isf(level/2)), 1 for one-tailed (isf(level))
    :type tails: int
    :return: the critical z value
    :rtype: float
    """
    _check_level(level)
    if tails not in (1, 2):
        raise ConfigError(f"Expected 1 or 2 tails but got {tails}", stage=STAGE)
    return float(stats.norm.isf(level / tails))


def shuffle_panel(
    panel: ReturnPanel, seed: int, segment_length: Optional[int] = None, replicate: int = 0
) -> ReturnPanel:
    """
    permutes every return series and the index independently

    With ``segment_length``, the series is cut into consecutive segments of that length
    (the last one may be shorter) and the segments are permuted while the order within each
    segment is kept. Each column uses its own counter based stream keyed by (replicate, column),
    so the result only depends on the seed.

    :param panel: the return panel
    :type panel: ReturnPanel
    :param seed: the seed
    :type seed: int
    :param segment_length: the segment length, defaults to None (single observations)
    :type segment_length: Optional[int], optional
    :param replicate: the replicate number, defaults to 0
    :type replicate: int, optional
    :return: the shuffled panel
    :rtype: ReturnPanel
    """
    t = panel.n_obs

    if segment_length is not None and segment_length < 1:
        raise ValueError(f"Expected segment_length >= 1 but was {segment_length}")

    starts = np.arange(0, t, segment_length or 1)

    def permutation(column: int) -> np.ndarray:
        rng = _generator(seed, replicate, column)
        if segment_length is None or segment_length == 1:
            return rng.permutation(t)
        order = rng.permutation(len(starts))
        return np.concatenate([np.arange(s, min(s + segment_length, t)) for s in starts[order]])

    n = panel.n_stocks
    returns = np.empty_like(panel.returns)
    for column in range(n):
        returns[:, column] = panel.returns[permutation(column), column]

    index_returns = panel.index_returns[permutation(n)]

    return panel.with_values(returns, index_returns)


@dataclass(frozen=True)
class NullMoments:
    mean: float
    std: float
    skewness: float
    kurtosis: float
    """Pearson kurtosis, 3 for a Gaussian"""


@dataclass(frozen=True)
class ThresholdTable:
    """
    two-tailed significance thresholds per level

    For the ``shuffle`` provenance the thresholds are cutoffs on |d|,
    for ``fisher`` they are critical values of the z difference score.
    """

    levels: Tuple[float, ...]
    thresholds: Tuple[float, ...]
    provenance: str
    replicates: int = 0
    null_moments: Optional[NullMoments] = None
    samples: int = 0
    warnings: Tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.levels) != len(self.thresholds):
            raise ValueError("Expected one threshold per level")
        if any(t < 0 for t in self.thresholds):
            raise ValueError("Expected non-negative thresholds")

    def threshold(self, level: float) -> float:
        """
        :raises ConfigError: if the level is not in the table
        """
        for candidate, threshold in zip(self.levels, self.thresholds):
            if math.isclose(candidate, level, rel_tol=1e-9, abs_tol=1e-12):
                return threshold

        levels = ", ".join(str(v) for v in self.levels)
        raise ConfigError(f"Significance level {level} not in threshold table ({levels})", stage=STAGE)


@dataclass(frozen=True)
class NullDistribution:
    """
    pooled influences d̂(X,Y:Z) of shuffled panels, sorted
    """

    samples: np.ndarray
    replicates: int
    seed: int
    segment_length: Optional[int] = None

    def moments(self) -> NullMoments:
        s = self.samples
        return NullMoments(
            mean=float(np.mean(s)),
            std=float(np.std(s)),
            skewness=float(stats.skew(s)),
            kurtosis=float(stats.kurtosis(s, fisher=False)),
        )

    def threshold(self, level: float) -> float:
        """
        the two-tailed cutoff: the (1 - level/2) quantile of the symmetrised null ±d̂,
        which is the (1 - level) quantile of |d̂|
        """
        _check_level(level)
        return float(np.quantile(np.sort(np.abs(self.samples)), 1.0 - level))

    def threshold_table(self, levels: Sequence[float] = DEFAULT_LEVELS) -> ThresholdTable:
        """
        builds the threshold table; warns if the sample is too small for the strictest level
        """
        levels = sorted(set(float(v) for v in levels))
        if not levels:
            raise ConfigError("Expected at least one significance level", stage=STAGE)
        for level in levels:
            _check_level(level)

        warnings: List[str] = []
        required = 10.0 / min(levels)
        if len(self.samples) < required:
            warning = (
                f"only {len(self.samples)} null sample(s) pooled, "
                f"at least {int(math.ceil(required))} needed for level {min(levels)}"
            )
            mylogger.warning(warning, extra={"stage": STAGE})
            warnings.append(warning)

        absolute = np.sort(np.abs(self.samples))
        thresholds = tuple(float(np.quantile(absolute, 1.0 - level)) for level in levels)

        return ThresholdTable(
            levels=tuple(levels),
            thresholds=thresholds,
            provenance=SHUFFLE,
            replicates=self.replicates,
            null_moments=self.moments(),
            samples=len(self.samples),
            warnings=tuple(warnings),
        )

    def histogram(self, bins: int = 101, empirical: Optional[np.ndarray] = None) -> pd.DataFrame:
        """
        plot-ready densities of the null distribution, of a Gaussian with the same mean and
        standard deviation and, if given, of the empirical influences

        :return: a frame with the columns ``center, null_density, gaussian_density[, empirical_density]``
        :rtype: pd.DataFrame
        """
        bound = float(np.max(np.abs(self.samples))) if len(self.samples) else 1.0
        edges = np.linspace(-bound, bound, bins + 1)
        centers = (edges[:-1] + edges[1:]) / 2.0

        null_density, _ = np.histogram(self.samples, bins=edges, density=True)
        moments = self.moments()
        frame = pd.DataFrame(
            {
                "center": centers,
                "null_density": null_density,
                "gaussian_density": stats.norm.pdf(centers, moments.mean, moments.std),
            }
        )

        if empirical is not None and len(empirical):
            empirical_density, _ = np.histogram(empirical, bins=edges, density=True)
            frame["empirical_density"] = empirical_density

        return frame


def _replicate_samples(
    panel: ReturnPanel,
    seed: int,
    replicate: int,
    max_triples: int,
    segment_length: Optional[int],
    variant: str,
) -> np.ndarray:
    shuffled = shuffle_panel(panel, seed, segment_length, replicate)
    kernel = TripleKernel(base_matrix(shuffled, variant))

    total = kernel.triples
    per = kernel.triples_per_conditioner

    if max_triples >= total:
        picks = np.arange(total, dtype=np.int64)
    else:
        rng = _generator(seed, replicate, SAMPLE_STREAM)
        picks = np.sort(rng.choice(total, size=max_triples, replace=False))

    bounds = np.searchsorted(picks, np.arange(kernel.n + 1, dtype=np.int64) * per)
    samples = []
    for z in range(kernel.n):
        local = picks[bounds[z] : bounds[z + 1]] - z * per
        if len(local) == 0:
            continue
        d = kernel.full_d(z)[local]
        samples.append(d[~np.isnan(d)])

    return np.concatenate(samples) if samples else np.zeros(0)


def sample_null(
    panel: ReturnPanel,
    replicates: int = DEFAULT_REPLICATES,
    seed: int = 0,
    max_triples_per_replicate: int = DEFAULT_MAX_TRIPLES,
    segment_length: Optional[int] = None,
    variant: str = INDEX_VARIANT,
    jobs: Optional[int] = None,
) -> NullDistribution:
    """
    pools influences of shuffled panels

    Each replicate is subsampled uniformly at random to at most ``max_triples_per_replicate`` triples.
    Replicates run in parallel and are pooled in replicate order.

    :raises ValueError: if replicates < 1 or max_triples_per_replicate < 1
    """
    if replicates < 1:
        raise ValueError(f"Expected at least 1 replicate but got {replicates}")
    if max_triples_per_replicate < 1:
        raise ValueError(f"Expected max_triples_per_replicate >= 1 but got {max_triples_per_replicate}")

    def run(replicate: int) -> np.ndarray:
        return _replicate_samples(panel, seed, replicate, max_triples_per_replicate, segment_length, variant)

    pooled = np.sort(np.concatenate(map_ordered(run, range(replicates), jobs)))

    mylogger.info(
        "Pooled %d null sample(s) from %d replicate(s)", len(pooled), replicates, extra={"stage": STAGE}
    )

    return NullDistribution(pooled, replicates, seed, segment_length)


def empirical_thresholds(
    panel: ReturnPanel,
    levels: Sequence[float] = DEFAULT_LEVELS,
    replicates: int = DEFAULT_REPLICATES,
    seed: int = 0,
    max_triples_per_replicate: int = DEFAULT_MAX_TRIPLES,
    segment_length: Optional[int] = None,
    variant: str = INDEX_VARIANT,
    jobs: Optional[int] = None,
) -> ThresholdTable:
    """
    thresholds on |d| from the shuffle null distribution

    :param panel: the return panel
    :type panel: ReturnPanel
    :param levels: two-tailed levels within (0, 0.5]
    :type levels: Sequence[float]
    :param replicates: number of shuffled panels
    :type replicates: int
    :param seed: the seed
    :type seed: int
    :param max_triples_per_replicate: subsample size per replicate
    :type max_triples_per_replicate: int
    :param segment_length: shuffle whole segments of this length
    :type segment_length: Optional[int]
    :return: the threshold table with null moments
    :rtype: ThresholdTable
    """
    for level in levels:
        _check_level(level)

    null = sample_null(panel, replicates, seed, max_triples_per_replicate, segment_length, variant, jobs)
    return null.threshold_table(levels)


def fisher_thresholds(levels: Sequence[float] = DEFAULT_LEVELS, tails: int = 2) -> ThresholdTable:
    """
    critical z values per level for the Fisher path
    """
    levels = sorted(set(float(v) for v in levels))
    return ThresholdTable(
        levels=tuple(levels),
        thresholds=tuple(critical_value(level, tails) for level in levels),
        provenance=FISHER,
    )


@dataclass(frozen=True)
class SignificanceDecision:
    x: str
    y: str
    z: str
    d: float
    z_score: float
    passes: bool
    level: float


@dataclass(frozen=True)
class SignificanceDecisions:
    """
    the decisions for every entry of a tensor, stored column wise
    """

    tickers: Tuple[str, ...]
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    d: np.ndarray
    z_score: np.ndarray
    passes: np.ndarray
    level: float

    def __len__(self) -> int:
        return len(self.d)

    def __iter__(self) -> Iterator[SignificanceDecision]:
        t = self.tickers
        for i in range(len(self.d)):
            yield SignificanceDecision(
                t[self.x[i]],
                t[self.y[i]],
                t[self.z[i]],
                float(self.d[i]),
                float(self.z_score[i]),
                bool(self.passes[i]),
                self.level,
            )

    @property
    def passed_fraction(self) -> float:
        return float(np.mean(self.passes)) if len(self.passes) else 0.0


def apply_significance(
    tensor: InfluenceTensor, table: ThresholdTable, level: float = DEFAULT_LEVEL
) -> Tuple[InfluenceTensor, SignificanceDecisions]:
    """
    keeps the entries that are significant at ``level``, both tails

    The shuffle path compares |d| with the threshold, the Fisher path compares
    the z difference score with the critical value. A threshold of 0 keeps everything.

    :param tensor: the tensor
    :type tensor: InfluenceTensor
    :param table: the threshold table
    :type table: ThresholdTable
    :param level: the two-tailed level, defaults to 0.02
    :type level: float
    :raises ConfigError: if the level is not in the table
    :return: the filtered tensor and the decision for every input entry
    :rtype: Tuple[InfluenceTensor, SignificanceDecisions]
    """
    threshold = table.threshold(level)

    if tensor.n_obs > 3:
        z_score = fisher_z_scores(tensor.base, tensor.base - tensor.d, tensor.n_obs)
    else:
        z_score = np.full(len(tensor), np.nan)

    if threshold <= 0.0:
        passes = np.ones(len(tensor), dtype=bool)
    elif table.provenance == FISHER:
        passes = np.abs(z_score) > threshold
    else:
        passes = np.abs(tensor.d) > threshold

    statistic = STATISTIC_FISHER_Z if table.provenance == FISHER else STATISTIC_D
    filtered = replace(tensor.subset(passes, threshold), statistic=statistic)

    mylogger.info(
        "%d of %d triple(s) significant at level %s (%s)",
        int(passes.sum()),
        len(tensor),
        level,
        table.provenance,
        extra={"stage": STAGE},
    )

    decisions = SignificanceDecisions(
        tickers=tensor.tickers,
        x=tensor.x,
        y=tensor.y,
        z=tensor.z,
        d=tensor.d,
        z_score=z_score,
        passes=passes,
        level=level,
    )
    return filtered, decisions


def write_threshold_table(table: ThresholdTable, path: str) -> None:
    """
    writes CSV ``level,threshold,provenance,replicates``
    """
    frame = pd.DataFrame(
        {
            "level": list(table.levels),
            "threshold": list(table.thresholds),
            "provenance": table.provenance,
            "replicates": table.replicates,
        }
    )
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def write_null_moments(table: ThresholdTable, path: str) -> None:
    """
    writes the null moments, the pooled sample size and warnings as JSON
    """
    content = {
        "provenance": table.provenance,
        "replicates": table.replicates,
        "samples": table.samples,
        "moments": asdict(table.null_moments) if table.null_moments else None,
        "warnings": list(table.warnings),
    }
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(content, fp, indent=2, sort_keys=True)
        fp.write("\n")


def write_decisions(decisions: SignificanceDecisions, path: str) -> None:
    """
    writes CSV ``x,y,z,d,z_score,passes,level``
    """
    tickers = np.asarray(decisions.tickers, dtype=object)
    frame = pd.DataFrame(
        {
            "x": tickers[decisions.x],
            "y": tickers[decisions.y],
            "z": tickers[decisions.z],
            "d": decisions.d,
            "z_score": decisions.z_score,
            "passes": np.where(decisions.passes, "true", "false"),
            "level": decisions.level,
        }
    )
    frame.to_csv(path, index=False, float_format="%.17g", na_rep="", lineterminator="\n")
