import time
import yaml
import marshmallow_dataclass

from typing import Dict, Any, Optional
from logging import getLogger
from pluggy import HookimplMarker  # type: ignore

from dataclasses import dataclass
from marshmallow.exceptions import MarshmallowError, ValidationError

from ..common.errors import ConfigError

PCINF = "pcinf"
STAGE_TIMER = "stage_timer"

mylogger = getLogger(STAGE_TIMER)


@dataclass
class StageTimerSettings(object):
    """
    the stage timer settings

    example:

    .. code-block:: yaml

        extensions:
            stage_timer:
                enabled: true
                settings:
                    precision: 3

    This class contains the extensions/stage_timer/settings content.
    """

    precision: Optional[int]
    """number of decimal places of the recorded seconds. Default: 3"""

    def __post_init__(self):
        self.precision = 3 if self.precision is None else self.precision

        if self.precision < 0:
            raise ConfigError(f"{STAGE_TIMER}: expected precision >= 0 but was {self.precision}")

    @staticmethod
    def load(settings: Optional[Dict[str, Any]]) -> "StageTimerSettings":
        try:
            ConfigSchema = marshmallow_dataclass.class_schema(StageTimerSettings)
            return ConfigSchema().load(settings or {})  # type: ignore
        except ValidationError as e:
            msg = e.args[0]
            if isinstance(msg, dict):
                msg = yaml.dump(msg, default_flow_style=False)

            raise ConfigError(f"\n\n{STAGE_TIMER}:\n{msg}")
        except MarshmallowError as e:
            raise ConfigError(str(e))


extension_impl = HookimplMarker(PCINF)


class StageTimerExtension(object):
    """
    Records the wall clock time of every subcommand in the ``timings``
    section of the run manifest.

    Timings are excluded from the manifest digest.
    This extension is enabled by default and can be disabled in the extension settings.
    """

    def __init__(self) -> None:
        self.settings = StageTimerSettings(precision=3)
        self.enabled = True
        self.started: Dict[str, float] = dict()

    @extension_impl
    def validate_extension(self, name: str, enabled: bool, settings: Dict[str, Any]):
        if name == STAGE_TIMER:
            StageTimerSettings.load(settings)
            mylogger.debug("settings are valid.", extra={"stage": STAGE_TIMER})

    @extension_impl
    def configure_extension(self, name: str, enabled: bool, settings: Dict[str, Any]):
        if name != STAGE_TIMER:
            return

        self.enabled = enabled
        if enabled:
            self.settings = StageTimerSettings.load(settings)

    @extension_impl
    def stage_started(self, stage: str):
        if self.enabled:
            self.started[stage] = time.perf_counter()

    @extension_impl
    def stage_finished(self, stage: str, manifest: Dict[str, Any]):
        if not self.enabled or stage not in self.started:
            return

        elapsed = round(time.perf_counter() - self.started.pop(stage), self.settings.precision)
        manifest.setdefault("timings", {})[stage] = elapsed
        mylogger.info("%s took %ss", stage, elapsed, extra={"stage": STAGE_TIMER})
