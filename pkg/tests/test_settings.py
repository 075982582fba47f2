import importlib.util
import logging
import os

import pytest

import settings
from errors import ConfigError, InputValidationError, PipelineDiverged, SolverDivergence


def test_read_config_fills_missing_sections(tmp_path):
    path = tmp_path / "cfg.toml"
    path.write_text("[shadow]\ntau = 0.2\n")
    sections = settings.read_config_file(str(path))
    assert set(sections) == set(settings.CONFIG_SECTIONS)
    assert sections["shadow"] == {"tau": 0.2}
    assert sections["calibration"] == {}


def test_invalid_toml(tmp_path):
    path = tmp_path / "cfg.toml"
    path.write_text("[shadow\ntau = ")
    with pytest.raises(ConfigError):
        settings.read_config_file(str(path))


def test_section_must_be_table(tmp_path):
    path = tmp_path / "cfg.toml"
    path.write_text("shadow = 3\n")
    with pytest.raises(ConfigError):
        settings.read_config_file(str(path))


def test_exit_codes():
    assert ConfigError("x").exit_code == 2
    assert PipelineDiverged("x").exit_code == 3
    assert issubclass(ConfigError, InputValidationError)
    assert issubclass(PipelineDiverged, SolverDivergence)


def test_setup_logging_is_idempotent():
    settings.setup_logging("DEBUG")
    settings.setup_logging("WARNING")
    assert logging.getLogger().level == logging.WARNING


def test_dashboard_sets_up_logging(monkeypatch):
    pytest.importorskip("dash")
    calls = []
    monkeypatch.setattr(settings, "setup_logging", lambda level=None: calls.append(level))
    path = os.path.join(os.path.dirname(__file__), "..", "dashboard", "app.py")
    spec = importlib.util.spec_from_file_location("dashboard_app", path)
    spec.loader.exec_module(importlib.util.module_from_spec(spec))
    assert calls == [None]
