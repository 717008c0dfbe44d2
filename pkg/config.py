"""Run configuration: built-in defaults < INI config file < command-line flags."""
import configparser
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, ValidationError

from errors import InvalidSpec, UnknownConfigKey
from features import FeatureSettings
from grid import GridSpec
from preprocess import FilterDefaults
from tabnet import TabNetConfig
from training import ExperimentSpec
from waveforms import SynthSpec

load_dotenv()
logger = logging.getLogger(__name__)

VERSION = "1.0.0"
CONFIG_ENV = "TABFORECAST_CONFIG"


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    synth: SynthSpec = SynthSpec()
    filters: FilterDefaults = FilterDefaults()
    features: FeatureSettings = FeatureSettings()
    model: TabNetConfig = TabNetConfig()
    experiment: ExperimentSpec = ExperimentSpec()
    grid: GridSpec = GridSpec()


SECTIONS = {name: info.annotation for name, info in RunConfig.model_fields.items()}


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except ValueError:
        return raw.strip()


def read_config_file(path) -> Dict[str, Dict[str, Any]]:
    """Parse an INI file into {section: {key: value}}, rejecting unknown names."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, "r", encoding="utf-8") as handle:
            parser.read_file(handle)
    except OSError as e:
        raise InvalidSpec(f"cannot read config file {path}: {e}") from e
    except configparser.Error as e:
        raise InvalidSpec(f"config file {path} is malformed: {e}") from e

    data: Dict[str, Dict[str, Any]] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise UnknownConfigKey(f"{path}: unknown section [{section}]")
        allowed = SECTIONS[section].model_fields
        for key, raw in parser.items(section):
            if key not in allowed:
                raise UnknownConfigKey(f"{path}: unknown key '{key}' in [{section}]")
            data.setdefault(section, {})[key] = _parse_value(raw)
    return data


def _merge(base: Dict[str, Dict[str, Any]], overrides: Mapping[str, Mapping[str, Any]]) -> Dict[str, Dict[str, Any]]:
    merged = {section: dict(values) for section, values in base.items()}
    for section, values in overrides.items():
        if section not in SECTIONS:
            raise UnknownConfigKey(f"unknown section [{section}]")
        for key, value in values.items():
            if value is None:
                continue
            if key not in SECTIONS[section].model_fields:
                raise UnknownConfigKey(f"unknown key '{key}' in [{section}]")
            merged.setdefault(section, {})[key] = value
    return merged


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Mapping[str, Any]]] = None) -> RunConfig:
    path = path or os.getenv(CONFIG_ENV)
    data: Dict[str, Dict[str, Any]] = {}
    if path:
        if not Path(path).exists():
            raise InvalidSpec(f"config file {path} does not exist")
        data = read_config_file(path)
        logger.info(f"Loaded configuration from {path}")
    data = _merge(data, overrides or {})
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        raise InvalidSpec(f"invalid configuration at {location}: {first['msg']}") from e


def seed_overrides(seed: Optional[int]) -> Dict[str, Dict[str, Any]]:
    """A global --seed applies to synthesis, splitting and model initialisation."""
    if seed is None:
        return {}
    return {"synth": {"seed": seed}, "experiment": {"seed": seed}, "model": {"seed": seed}}


def effective_config(config: RunConfig) -> Dict[str, Any]:
    return config.model_dump(mode="json")


