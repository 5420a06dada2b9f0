import tempfile
import unittest
from pathlib import Path

from apps.foveation.errors import ConfigError
from config.paths import RESOLVED_CONFIG_NAME
from config.settings import Settings, apply_overrides, load_settings, parse_ini, to_ini, write_resolved


class LoadSettingsTests(unittest.TestCase):
    def test_shipped_defaults_match_the_dataclasses(self):
        self.assertEqual(load_settings(), Settings())

    def test_overrides_and_seed(self):
        settings = load_settings(overrides=["policy.steps=10", "sync.jitter=uniform", "fovea.gaze_x=0.25"], seed=7)
        self.assertEqual(settings.policy.steps, 10)
        self.assertEqual(settings.sync.jitter, "uniform")
        self.assertEqual(settings.fovea.gaze_x, 0.25)
        self.assertEqual(settings.run.seed, 7)

    def test_file_then_override(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "run.ini"
            path.write_text("[gaze]\nsteps = 50\ngrid = 9\n", encoding="utf-8")
            settings = load_settings(path, overrides=["gaze.steps=60"])
        self.assertEqual(settings.gaze.steps, 60)
        self.assertEqual(settings.gaze.grid, 9)
        self.assertEqual(settings.policy, Settings().policy)

    def test_missing_config_file(self):
        with self.assertRaises(ConfigError):
            load_settings(Path("/nonexistent/run.ini"))


class ValidationTests(unittest.TestCase):
    def test_unknown_key(self):
        with self.assertRaises(ConfigError):
            parse_ini("[fovea]\nnope = 1\n")

    def test_unknown_section(self):
        with self.assertRaises(ConfigError):
            parse_ini("[camera]\nfps = 30\n")

    def test_bad_type(self):
        with self.assertRaises(ConfigError):
            apply_overrides(Settings(), ["policy.steps=many"])

    def test_malformed_override(self):
        with self.assertRaises(ConfigError):
            apply_overrides(Settings(), ["steps=10"])

    def test_malformed_text(self):
        with self.assertRaises(ConfigError):
            parse_ini("seed = 0\n")


class ResolvedConfigTests(unittest.TestCase):
    def test_ini_text_round_trips(self):
        settings = apply_overrides(Settings(), ["mae.lr=0.003", "toytrain.variants=fine,fov-act"])
        self.assertEqual(parse_ini(to_ini(settings)), settings)

    def test_write_resolved(self):
        settings = load_settings(seed=3)
        with tempfile.TemporaryDirectory() as tmp:
            path = write_resolved(settings, Path(tmp) / "run")
            self.assertEqual(path.name, RESOLVED_CONFIG_NAME)
            self.assertEqual(parse_ini(path.read_text(encoding="utf-8")), settings)


if __name__ == "__main__":
    unittest.main()
