"""
Preset aggregator.

Dataset presets (generating noise, motion model, split shapes) ship as TOML files in the
``presets/`` directory next to this module. This module reads and parses them, reports what it
found, and hands out plain mappings; ``noisetune.datagen`` turns them into ``GenConfig``s.
"""

import logging
import pathlib
import tomllib

from .errors import ConfigError

logger = logging.getLogger(__name__)

# Directory holding the shipped preset files
PRESETS_DIR = pathlib.Path(__file__).parent / "presets"

_REQUIRED_TABLES = ("theta_star", "motion", "splits")


def _read_preset_source(preset_path: pathlib.Path) -> str | None:
    """Reads the text of a preset file."""
    try:
        source = preset_path.read_text(encoding="utf-8")
        logger.debug("read preset source: %s", preset_path.name)
        return source
    except FileNotFoundError:
        logger.warning("preset file not found: %s", preset_path)
        return None
    except OSError as e:
        logger.warning("error reading %s: %s", preset_path, e)
        return None


def _try_parse_preset(preset_path: pathlib.Path) -> dict | None:
    """Parses a preset file and checks its required tables."""
    source = _read_preset_source(preset_path)
    if source is None:
        return None
    try:
        preset = tomllib.loads(source)
    except tomllib.TOMLDecodeError as e:
        logger.warning("invalid TOML in %s: %s", preset_path, e)
        return None

    missing = [table for table in _REQUIRED_TABLES if table not in preset]
    if missing:
        logger.warning("preset %s lacks table(s): %s", preset_path.name, ", ".join(missing))
        return None
    preset.setdefault("name", preset_path.stem)
    return preset


def aggregate_presets(directory: pathlib.Path | None = None) -> dict[str, dict]:
    """All loadable presets in ``directory`` (default: the shipped ones), keyed by name."""
    directory = PRESETS_DIR if directory is None else pathlib.Path(directory)
    presets = {}
    paths = sorted(directory.glob("*.toml"))
    for path in paths:
        preset = _try_parse_preset(path)
        if preset is not None:
            presets[preset["name"]] = preset
    logger.debug("aggregated %d/%d presets from %s", len(presets), len(paths), directory)
    return presets


def preset_names(directory: pathlib.Path | None = None) -> list[str]:
    return sorted(aggregate_presets(directory))


def load_preset(name_or_path: str | pathlib.Path) -> dict:
    """A preset by shipped name (``"d1"``) or by path to a TOML file."""
    path = pathlib.Path(name_or_path)
    if path.suffix == ".toml":
        preset = _try_parse_preset(path)
        if preset is None:
            raise ConfigError(f"cannot load preset file {path}")
        return preset
    presets = aggregate_presets()
    try:
        return presets[str(name_or_path).lower()]
    except KeyError:
        raise ConfigError(
            f"unknown preset {name_or_path!r}; available: {', '.join(sorted(presets))}"
        ) from None
