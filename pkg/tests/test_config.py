"""
Tests for configuration loading
===============================
Defaults, environment, config file and command-line precedence.

Run tests with: pytest tests/test_config.py -v
"""

import os
import sys

import pytest

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.config import Settings, environment_values, load_settings
from app.exceptions import ConfigError, IoError

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load(config_path=None, overrides=None, environ=None):
    return load_settings(config_path, overrides, environ=environ or {}, use_dotenv=False)


class TestLoadSettings:
    """load_settings."""

    def test_defaults(self):
        """Built-in defaults."""
        settings = load()
        assert settings.stride == 4
        assert settings.threshold == 0.1
        assert settings.grid.cell_size == 0.6
        assert settings.grid.nx == 180
        assert settings.depth.max_gap == 10
        assert settings.augment.scale_range == (0.95, 1.05)
        assert settings.rig.num_cameras == 6
        assert settings.log_level == "INFO"

    def test_sample_config_matches_defaults(self):
        """data/default.cfg restates the defaults."""
        assert load(os.path.join(REPO_ROOT, "data", "default.cfg")) == Settings()

    def test_environment(self):
        """CFF_ variables map section__field onto section.field."""
        settings = load(environ={"CFF_GRID__CELL_SIZE": "1.2", "CFF_SEED": "9", "OTHER": "x"})
        assert settings.grid.cell_size == 1.2
        assert settings.grid.nx == 90
        assert settings.seed == 9

    def test_environment_keys(self):
        """Only prefixed variables are picked up."""
        assert environment_values({"CFF_DEPTH__MAX_GAP": "4", "PATH": "/bin"}) == {"depth.max_gap": "4"}

    def test_config_file(self, tmp_path):
        """key=value files set scalars and comma-separated sequences."""
        path = tmp_path / "run.cfg"
        path.write_text("# local run\nthreshold=0.3\ngrid.x_range=-30,30\ndepth.blur=none\n")
        settings = load(path)
        assert settings.threshold == 0.3
        assert settings.grid.x_range == (-30.0, 30.0)
        assert settings.grid.nx == 100
        assert settings.depth.blur == "none"

    def test_precedence(self, tmp_path):
        """Flags beat the file, the file beats the environment."""
        path = tmp_path / "run.cfg"
        path.write_text("threshold=0.3\n")
        environ = {"CFF_THRESHOLD": "0.2", "CFF_SEED": "5"}
        assert load(path, environ=environ).threshold == 0.3
        assert load(path, environ=environ).seed == 5
        assert load(path, {"threshold": 0.4}, environ).threshold == 0.4
        assert load(path, {"threshold": None}, environ).threshold == 0.3

    def test_unknown_keys(self, tmp_path):
        """Unknown top-level and section keys are rejected."""
        with pytest.raises(ConfigError):
            load(overrides={"bogus": 1})
        with pytest.raises(ConfigError):
            load(overrides={"grid.bogus": 1})
        with pytest.raises(ConfigError):
            load(environ={"CFF_NOPE__X": "1"})

    def test_invalid_values(self):
        """Values failing validation raise ConfigError."""
        for overrides in ({"stride": 0}, {"threshold": "abc"}, {"threshold": 1.5}, {"grid.cell_size": 0.7}):
            with pytest.raises(ConfigError):
                load(overrides=overrides)

    def test_log_level(self):
        """Log levels are upper-cased and must exist."""
        assert load(overrides={"log_level": "debug"}).log_level == "DEBUG"
        with pytest.raises(ConfigError):
            load(overrides={"log_level": "LOUD"})

    def test_key_without_value(self, tmp_path):
        """A bare key in the config file is an error."""
        path = tmp_path / "run.cfg"
        path.write_text("threshold\n")
        with pytest.raises(ConfigError):
            load(path)

    def test_missing_file(self, tmp_path):
        """A missing config file is an I/O error."""
        with pytest.raises(IoError):
            load(tmp_path / "absent.cfg")
