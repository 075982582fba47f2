"""
Settings
========
Runtime knobs read from the environment (.env supported) plus the TOML
reader used for pipeline config files.
"""

import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from typing import Any, Dict

from dotenv import load_dotenv

from errors import ConfigError

# Load environment variables from .env file
env_path = os.path.join(os.path.dirname(__file__), "..", ".env")
load_dotenv(env_path)

LOG_LEVEL = os.getenv("PSRECON_LOG_LEVEL", "INFO").upper()
OUTPUT_DIR = os.getenv("PSRECON_OUTPUT_DIR", "output")

try:
    DEFAULT_SEED = int(os.getenv("PSRECON_SEED", "0"))
except ValueError:
    DEFAULT_SEED = 0
try:
    DEFAULT_KEYPOINTS = int(os.getenv("PSRECON_KEYPOINTS", "500"))
except ValueError:
    DEFAULT_KEYPOINTS = 500

DEFAULT_CONFIG_PATH = os.path.join(os.path.dirname(__file__), "..", "data", "default_config.toml")

CONFIG_SECTIONS = ("calibration", "shadow", "filter", "pipeline")

_configured = False


def setup_logging(level: str = None) -> None:
    """Configure the root logger once; later calls only adjust the level."""
    global _configured
    level = (level or LOG_LEVEL).upper()
    if not _configured:
        logging.basicConfig(
            level=level,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        _configured = True
    logging.getLogger().setLevel(level)


def read_config_file(path: str) -> Dict[str, Dict[str, Any]]:
    """
    Read a TOML pipeline config into {section: {key: value}}.

    Args:
        path: TOML file with optional [calibration], [shadow], [filter]
            and [pipeline] tables

    Returns:
        Dict with one (possibly empty) dict per known section
    """
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Invalid TOML in {path}: {e}") from e

    unknown = set(raw) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"Unknown config sections: {sorted(unknown)}")

    sections = {}
    for name in CONFIG_SECTIONS:
        table = raw.get(name, {})
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
        sections[name] = dict(table)
    return sections
