from .ext.stage_timer_test import StageTimerTest  # noqa: F401
