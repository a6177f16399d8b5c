import io
import os
import yaml
import marshmallow_dataclass

from yaml.error import YAMLError
from typing import Dict, Optional, Union, List, Any
from dataclasses import dataclass, fields, asdict
from marshmallow.exceptions import MarshmallowError, ValidationError
from logging import DEBUG, INFO
from abc import ABC

from .common.errors import ConfigError
from .correlation_engine import INDEX_VARIANT, SIGNIFICANT, STORAGE_MODES, VARIANTS
from .influence_metrics import DIRECTIONS, OUTGOING
from .significance import (
    DEFAULT_LEVEL,
    DEFAULT_LEVELS,
    DEFAULT_MAX_TRIPLES,
    DEFAULT_REPLICATES,
    METHODS,
    SHUFFLE,
)
from .stability_analysis import DEFAULT_MIN_DAYS, FREQUENCIES, RankingOptions

__all__ = [
    "ConfigError",
    "AbstractConfig",
    "RunSection",
    "InputsConfig",
    "IngestConfig",
    "SignificanceConfig",
    "InfluenceConfig",
    "CalendarConfig",
    "SectorsConfig",
    "ExtensionConfig",
    "Config",
]

LOG_LEVELS = ["CRITICAL", "FATAL", "ERROR", "WARN", "WARNING", "INFO", "DEBUG"]


def _choice(name: str, value: str, choices) -> str:
    if value not in choices:
        supported = ", ".join(choices)
        raise ConfigError(f"Unsupported {name} {value}. Supported values are: {supported}")
    return value


@dataclass
class AbstractConfig(ABC):
    """
    Configuration base dataclass
    """

    @classmethod
    def create(cls, **args):
        """
        creates an instance and sets all missing optional fields to None

        :return: the data class
        :rtype: same as cls
        """
        config_class = dataclass(cls)  # type: ignore
        config_fields = fields(config_class)
        all_args = dict(args)
        for field in config_fields:
            name = field.name
            if name not in args:
                all_args[name] = None

        return config_class(**all_args)


@dataclass
class RunSection(AbstractConfig):
    """
    output location, parallelism and logging
    """

    out: Optional[str]
    """the output directory. Default: ``./pcinf-out``"""

    jobs: Optional[int]
    """the number of workers. Default: number of logical cores"""

    debug: Optional[bool]
    """if True, pcinf logs debug information. Default: False"""

    loglevel: Optional[Union[str, int]]
    """the log level. One of "CRITICAL", "FATAL", "ERROR", "WARN", "WARNING", "INFO", "DEBUG"."""

    logformat: Optional[str]
    """
    Custom log format (see logrecord-attributes_).
    The attribute "stage" contains the pipeline stage.

    .. _logrecord-attributes: https://docs.python.org/3/library/logging.html#logrecord-attributes

    Default: ``%(levelname)-5.5s %(stage)s: %(message)s``
    """

    def _set_log_level(self):
        """
        sets the log level; ``PCINF_LOG`` wins over the configured level

        :raises ConfigError: if an unsupported log level is given
        """
        level = os.environ.get("PCINF_LOG") or self.loglevel

        if level and isinstance(level, str):
            level = level.upper()
            _choice("log level", level, LOG_LEVELS)

        self.loglevel = DEBUG if self.debug else (level or INFO)

    def _set_log_format(self):
        default_format = "%(levelname)-5.5s %(stage)s: %(message)s"
        debug_format = "%(asctime)s %(levelname)-5.5s %(module)s %(stage)s %(threadName)s: %(message)s"

        if not self.logformat:
            self.logformat = debug_format if self.debug else default_format

    def __post_init__(self):
        self.out = self.out or "./pcinf-out"
        self.debug = self.debug or False

        if self.jobs is not None and self.jobs < 1:
            raise ConfigError(f"Expected jobs >= 1 but was {self.jobs}")

        self._set_log_level()
        self._set_log_format()


@dataclass
class InputsConfig(AbstractConfig):
    prices: Optional[str]
    """the long format price file ``date,ticker,adj_close[,volume]``"""

    sectors: Optional[str]
    """the sector file ``ticker,sector``"""

    index_ticker: Optional[str]
    """the ticker of the market index in the price file. Default: ``INDEX``"""

    def __post_init__(self):
        self.index_ticker = self.index_ticker or "INDEX"


@dataclass
class IngestConfig(AbstractConfig):
    max_flat_fraction: Optional[float]
    """stocks without price movement on a larger fraction of days are removed. Default: 0.06"""

    zero_volume_is_flat: Optional[bool]
    """True: days without trading volume count as days without price movement. Default: False"""

    def __post_init__(self):
        self.max_flat_fraction = 0.06 if self.max_flat_fraction is None else self.max_flat_fraction
        self.zero_volume_is_flat = self.zero_volume_is_flat or False

        if not 0.0 <= self.max_flat_fraction <= 1.0:
            raise ConfigError(f"Expected max_flat_fraction within [0, 1] but was {self.max_flat_fraction}")


@dataclass
class SignificanceConfig(AbstractConfig):
    method: Optional[str]
    """``shuffle`` (default) or ``fisher``"""

    level: Optional[float]
    """the two-tailed significance level. Default: 0.02"""

    levels: Optional[List[float]]
    """the levels of the threshold table. Default: 0.01, 0.02, 0.05, 0.1, 0.2"""

    replicates: Optional[int]
    """number of shuffled panels. Default: 10"""

    seed: Optional[int]
    """the seed of the shuffles. Default: 0"""

    segment_length: Optional[int]
    """if set, whole segments of this length are shuffled"""

    max_triples_per_replicate: Optional[int]
    """null samples per replicate. Default: 1000000"""

    tails: Optional[Union[str, int]]
    """Fisher critical values: ``two`` (default) or ``one`` tailed"""

    def _set_tails(self):
        tails = self.tails
        if tails is None:
            self.tails = 2
        elif isinstance(tails, int) and tails in (1, 2):
            self.tails = tails
        elif isinstance(tails, str) and tails in ("one", "two"):
            self.tails = 1 if tails == "one" else 2
        else:
            raise ConfigError(f"Expected tails one or two but got {tails}")

    def validate(self):
        """
        checks ranges and adds the level to the levels

        :raises ConfigError: if a value is out of range
        """
        assert self.level is not None and self.levels is not None

        for level in [self.level, *self.levels]:
            if not 0.0 < level <= 0.5:
                raise ConfigError(f"Expected significance level within (0, 0.5] but was {level}")

        if self.level not in self.levels:
            self.levels = sorted([*self.levels, self.level])

        if self.replicates is not None and self.replicates < 1:
            raise ConfigError(f"Expected at least 1 replicate but got {self.replicates}")

        if self.segment_length is not None and self.segment_length < 1:
            raise ConfigError(f"Expected segment_length >= 1 but was {self.segment_length}")

        if self.max_triples_per_replicate is not None and self.max_triples_per_replicate < 1:
            raise ConfigError(f"Expected max_triples_per_replicate >= 1 but was {self.max_triples_per_replicate}")

    def __post_init__(self):
        self.method = _choice("significance method", self.method or SHUFFLE, METHODS)
        self.level = DEFAULT_LEVEL if self.level is None else self.level
        self.levels = list(self.levels or DEFAULT_LEVELS)
        self.replicates = DEFAULT_REPLICATES if self.replicates is None else self.replicates
        self.seed = self.seed or 0
        self.max_triples_per_replicate = self.max_triples_per_replicate or DEFAULT_MAX_TRIPLES
        self._set_tails()
        self.validate()


@dataclass
class InfluenceConfig(AbstractConfig):
    direction: Optional[str]
    """``outgoing`` (default): d(X) is the influence of X on the others, ``incoming``: of the others on X"""

    filtered: Optional[bool]
    """True (default): only significant triples are averaged"""

    variant: Optional[str]
    """``index`` (default) or ``star`` for the influence without index conditioning"""

    storage: Optional[str]
    """``significant`` (default) or ``dense`` tensor storage"""

    def __post_init__(self):
        self.direction = _choice("direction", self.direction or OUTGOING, DIRECTIONS)
        self.filtered = True if self.filtered is None else self.filtered
        self.variant = _choice("variant", self.variant or INDEX_VARIANT, VARIANTS)
        self.storage = _choice("storage", self.storage or SIGNIFICANT, STORAGE_MODES)


@dataclass
class CalendarConfig(AbstractConfig):
    frequency: Optional[str]
    """``Q`` (default), ``M`` or ``Y``"""

    min_days: Optional[int]
    """minimal trading days per period. Default: 20"""

    min_periods: Optional[int]
    """minimal number of ranked periods. Default: 2"""

    def __post_init__(self):
        self.frequency = _choice("frequency", self.frequency or "Q", FREQUENCIES)
        self.min_days = DEFAULT_MIN_DAYS if self.min_days is None else self.min_days
        self.min_periods = self.min_periods or 2

        if self.min_days < 1:
            raise ConfigError(f"Expected min_days >= 1 but was {self.min_days}")


@dataclass
class SectorsConfig(AbstractConfig):
    window: Optional[int]
    """if set, the attribution is also computed over moving windows of this many trading days"""

    step: Optional[int]
    """the distance of moving windows in trading days. Default: the window length"""

    def __post_init__(self):
        if self.window is not None and self.window < 1:
            raise ConfigError(f"Expected window >= 1 but was {self.window}")

        self.step = self.step or self.window


@dataclass
class ExtensionConfig(AbstractConfig):
    """
    represents an extension configuration
    """

    enabled: Optional[bool]
    """True: The extension is enabled"""

    module: Optional[str]
    """Extension module name"""

    settings: Optional[Dict[str, Any]]
    """Settings specific to the extension"""

    def __post_init__(self):
        self.enabled = True if self.enabled is None else self.enabled


@dataclass
class Config(AbstractConfig):
    """
    represents a complete pcinf configuration
    """

    run: Optional[RunSection]
    inputs: Optional[InputsConfig]
    ingest: Optional[IngestConfig]
    significance: Optional[SignificanceConfig]
    influence: Optional[InfluenceConfig]
    calendar: Optional[CalendarConfig]
    sectors: Optional[SectorsConfig]

    extensions: Optional[Dict[str, ExtensionConfig]]
    """a dictionary with extension names and their configuration"""

    def __post_init__(self):
        self.run = self.run or RunSection.create()
        self.inputs = self.inputs or InputsConfig.create()
        self.ingest = self.ingest or IngestConfig.create()
        self.significance = self.significance or SignificanceConfig.create()
        self.influence = self.influence or InfluenceConfig.create()
        self.calendar = self.calendar or CalendarConfig.create()
        self.sectors = self.sectors or SectorsConfig.create()
        self.extensions = self.extensions or dict()

    def override(self, **values):
        """
        applies command line values; None values are ignored

        :raises ConfigError: if a value is invalid
        """
        assert self.run and self.significance and self.inputs

        targets = {
            "seed": self.significance,
            "level": self.significance,
            "replicates": self.significance,
            "segment_length": self.significance,
            "method": self.significance,
            "jobs": self.run,
            "out": self.run,
            "prices": self.inputs,
            "sectors": self.inputs,
            "index_ticker": self.inputs,
        }

        for name, value in values.items():
            if value is not None:
                setattr(targets[name], name, value)

        self.significance.method = _choice("significance method", self.significance.method or SHUFFLE, METHODS)
        self.significance.validate()

        if self.run.jobs is not None and self.run.jobs < 1:
            raise ConfigError(f"Expected jobs >= 1 but was {self.run.jobs}")

    def require_file(self, path: Optional[str], what: str) -> str:
        """
        :raises ConfigError: if the path is not set or the file does not exist
        """
        if not path:
            raise ConfigError(f"No {what} file configured")
        if not os.path.isfile(path):
            raise ConfigError(f"{what} file {path} not found")
        return path

    def ranking_options(self) -> RankingOptions:
        assert self.significance and self.influence
        s = self.significance
        return RankingOptions(
            method=s.method or SHUFFLE,
            level=s.level or DEFAULT_LEVEL,
            replicates=s.replicates or DEFAULT_REPLICATES,
            seed=s.seed or 0,
            segment_length=s.segment_length,
            max_triples_per_replicate=s.max_triples_per_replicate or DEFAULT_MAX_TRIPLES,
            tails=int(s.tails or 2),
            filtered=bool(self.influence.filtered),
            direction=self.influence.direction or OUTGOING,
            variant=self.influence.variant or INDEX_VARIANT,
        )

    def snapshot(self) -> Dict[str, Any]:
        """
        the effective configuration as plain data, without logging settings
        """
        content = asdict(self)
        content.pop("run", None)
        return content

    @staticmethod
    def load(stream: io.TextIOBase) -> "Config":
        """
        loads a configuration from a Yaml stream

        :param stream: the Yaml stream
        :type stream: io.TextIOBase
        :raises ConfigError: if the Yaml file is invalid or doesn't match configuration requirements
        :return: the configuration
        :rtype: Config
        """
        try:
            content = yaml.safe_load(stream)
            if content is None:
                return Config.create()

            ConfigSchema = marshmallow_dataclass.class_schema(Config)
            config = ConfigSchema().load(content)
            assert isinstance(config, Config)
            return config
        except YAMLError as e:
            raise ConfigError(f"YAML error(s) {str(e)}")
        except ValidationError as e:
            msg = e.args[0]
            if isinstance(msg, dict):
                msg = yaml.dump(msg, default_flow_style=False)

            raise ConfigError(f"\n\n{msg}")
        except MarshmallowError as e:
            raise ConfigError(str(e))
