import unittest

from logging import FATAL, getLogger

from pcinf.common.errors import ConfigError
from pcinf.ext.stage_timer import STAGE_TIMER, StageTimerExtension, StageTimerSettings
from pcinf.extensions import Extensions


class StageTimerTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        getLogger(STAGE_TIMER).setLevel(FATAL)

    def test_settings(self):
        self.assertEqual(3, StageTimerSettings.load({}).precision)
        self.assertEqual(1, StageTimerSettings.load({"precision": 1}).precision)

    def test_invalid_settings(self):
        with self.assertRaises(ConfigError):
            StageTimerSettings.load({"precision": -1})
        with self.assertRaises(ConfigError):
            StageTimerSettings.load({"precision": "fine"})
        with self.assertRaises(ConfigError):
            StageTimerSettings.load({"resolution": 2})

    def test_records_timing(self):
        timer = StageTimerExtension()
        timer.configure_extension(STAGE_TIMER, True, {"precision": 6})

        manifest = {"stage": "influence"}
        timer.stage_started("influence")
        timer.stage_finished("influence", manifest)

        self.assertIn("influence", manifest["timings"])
        self.assertGreaterEqual(manifest["timings"]["influence"], 0.0)
        self.assertEqual({}, timer.started)

    def test_disabled(self):
        timer = StageTimerExtension()
        timer.configure_extension(STAGE_TIMER, False, {})

        manifest: dict = {}
        timer.stage_started("ingest")
        timer.stage_finished("ingest", manifest)

        self.assertEqual({}, manifest)

    def test_ignores_other_extensions(self):
        timer = StageTimerExtension()
        timer.configure_extension("other", False, {"precision": -1})
        timer.validate_extension("other", True, {"precision": -1})
        self.assertTrue(timer.enabled)

    def test_unstarted_stage(self):
        manifest: dict = {}
        StageTimerExtension().stage_finished("report", manifest)
        self.assertEqual({}, manifest)

    def test_via_extensions(self):
        extensions = Extensions()
        timer = StageTimerExtension()
        extensions.register([timer])

        extensions.validate_extension(STAGE_TIMER, True, {"precision": 2})
        extensions.configure_extension(STAGE_TIMER, True, {"precision": 2})

        manifest: dict = {}
        extensions.stage_started("sectors")
        extensions.stage_finished("sectors", manifest)

        self.assertEqual(2, timer.settings.precision)
        self.assertIn("sectors", manifest["timings"])
