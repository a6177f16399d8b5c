from dataclasses import dataclass, asdict
from typing import Dict, Optional

from .exit_codes import EX_INPUT, EX_COMPUTATION


class AnalysisError(Exception):
    """
    Base class of all pcinf errors.

    Each error carries a stable ``code`` and the ``stage`` it was raised in,
    so the command line can report it in a structured way.
    """

    code = "E_ANALYSIS"
    exit_code = EX_COMPUTATION

    def __init__(self, message: str, stage: Optional[str] = None) -> None:
        super().__init__(message)
        self.message = message
        self.stage = stage

    def with_stage(self, stage: str) -> "AnalysisError":
        """
        sets the stage if it was not set where the error was raised

        :param stage: the stage name
        :type stage: str
        :return: the error itself
        :rtype: AnalysisError
        """
        self.stage = self.stage or stage
        return self

    def as_record(self) -> Dict[str, str]:
        return {
            "stage": self.stage or "pcinf",
            "code": self.code,
            "message": self.message,
        }


class InputError(AnalysisError, ValueError):
    code = "E_INPUT"
    exit_code = EX_INPUT


class ConfigError(InputError):
    """
    Configuration error
    """

    code = "E_CONFIG"


class PriceParseError(InputError):
    code = "E_PARSE"

    def __init__(self, message: str, line: Optional[int] = None, stage: Optional[str] = None) -> None:
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message, stage)
        self.line = line


class MissingTickerError(InputError):
    code = "E_MISSING_TICKER"

    def __init__(self, ticker: str, what: str = "ticker", stage: Optional[str] = None) -> None:
        super().__init__(f"{what} {ticker} not found", stage)
        self.ticker = ticker


class NoLiquidStocksError(InputError):
    code = "E_NO_LIQUID_STOCKS"


class InsufficientDataError(InputError):
    code = "E_INSUFFICIENT_DATA"


class SectorMapError(InputError):
    code = "E_SECTOR_MAP"


class ComputationError(AnalysisError):
    code = "E_COMPUTATION"
    exit_code = EX_COMPUTATION


class DegenerateInputError(ComputationError, ValueError):
    code = "E_DEGENERATE"


class SingularConditioningError(ComputationError, ValueError):
    code = "E_SINGULAR"


class DomainError(ComputationError, ValueError):
    code = "E_DOMAIN"


class InsufficientSampleError(ComputationError, ValueError):
    code = "E_INSUFFICIENT_SAMPLE"


class UndefinedSimilarityError(ComputationError, ValueError):
    code = "E_UNDEFINED_SIMILARITY"


class FitError(ComputationError):
    code = "E_FIT"


@dataclass(frozen=True)
class Diagnostic:
    """
    a non fatal condition found during a stage
    """

    stage: str
    code: str
    detail: str

    def as_record(self) -> Dict[str, str]:
        return asdict(self)
