from typing import Dict, Any, List
from logging import getLogger
from pluggy import HookimplMarker  # type: ignore

"""
Trivial Module extension for testing purposes
"""

PCINF = "pcinf"
TEST_MODULE_EXTENSION = "test_module_extension"

mylogger = getLogger(TEST_MODULE_EXTENSION)

extension_impl = HookimplMarker(PCINF)

calls: List[str] = []


@extension_impl
def validate_extension(name: str, enabled: bool, settings: Dict[str, Any]):
    if name == TEST_MODULE_EXTENSION:
        if "fail" in settings:
            raise ValueError("Test extension: invalid settings")
        mylogger.info("Test extension: settings are valid.", extra={"stage": PCINF})


@extension_impl
def configure_extension(name: str, enabled: bool, settings: Dict[str, Any]):
    if name == TEST_MODULE_EXTENSION:
        calls.append("configure")
        mylogger.info("Test extension: Here I am!", extra={"stage": PCINF})


@extension_impl
def stage_finished(stage: str, manifest: Dict[str, Any]):
    calls.append(f"finished {stage}")
