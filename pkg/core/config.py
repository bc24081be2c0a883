"""
Configuration management for the pipeline
"""

import os
import json
from dataclasses import asdict, fields, is_dataclass, replace
from typing import Iterable, Optional

from .conditioning import ConditioningConfig, SelectionConfig
from .errors import ConfigError
from .evaluation import CvConfig
from .model import ModelConfig
from .synthgen import SynthConfig
from .training import TrainConfig

SECTIONS = ('synth', 'conditioning', 'model', 'train', 'cv')
TOP_LEVEL = ('seed', 'jobs', 'output_dir')

# JSON key -> attribute name, per section
_ALIASES = {'train': {'lambda': 'lam'}}


def _json_key(section: str, attr: str) -> str:
    for key, name in _ALIASES.get(section, {}).items():
        if name == attr:
            return key
    return attr


def _apply_section(current, payload: dict, path: str):
    """Return a copy of the section dataclass with payload fields applied."""
    if not isinstance(payload, dict):
        raise ConfigError(f"{path} must be an object", field=path)
    aliases = _ALIASES.get(path.split('.')[0], {})
    known = {f.name: f for f in fields(current)}
    updates = {}
    for key, value in payload.items():
        attr = aliases.get(key, key)
        if attr not in known:
            raise ConfigError(f"unknown config field {path}.{key}", field=f"{path}.{key}")
        existing = getattr(current, attr)
        if is_dataclass(existing):
            updates[attr] = _apply_section(existing, value, f"{path}.{key}")
        else:
            updates[attr] = _coerce(existing, value, f"{path}.{key}")
    return replace(current, **updates)


def _coerce(existing, value, path: str):
    """Match the type of the default where the default has a concrete type."""
    if value is None or existing is None:
        return value
    try:
        if isinstance(existing, bool):
            if isinstance(value, str):
                return value.lower() in ('1', 'true', 'yes', 'on')
            return bool(value)
        if isinstance(existing, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(existing, float):
            return float(value)
        if isinstance(existing, list):
            if isinstance(value, str):
                value = json.loads(value)
            return list(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid value for {path}: {value!r}", field=path) from e
    return value


class Config:
    """Configuration class for managing settings."""

    def __init__(self):
        self.output_dir = os.getenv('ETCH_OUTPUT_DIR', 'runs')
        self.seed: int = 0
        self.jobs: int = 1
        self.log_file: Optional[str] = os.getenv('ETCH_LOG_FILE')
        self.log_to_file: bool = False

        self.synth = SynthConfig()
        self.conditioning = ConditioningConfig()
        self.model = ModelConfig()
        self.train = TrainConfig()
        self.cv = CvConfig()

        self.load_from_env()

    def load_from_env(self):
        """Load configuration from environment variables."""
        self.output_dir = os.getenv('ETCH_OUTPUT_DIR', self.output_dir)

        seed = os.getenv('ETCH_SEED')
        if seed:
            try:
                self.set_seed(int(seed))
            except ValueError:
                raise ConfigError(f"ETCH_SEED must be an integer, got {seed!r}", field='seed')

        jobs = os.getenv('ETCH_JOBS')
        if jobs:
            try:
                self.jobs = int(jobs)
            except ValueError:
                raise ConfigError(f"ETCH_JOBS must be an integer, got {jobs!r}", field='jobs')

        self.log_file = os.getenv('ETCH_LOG_FILE', self.log_file)
        self.log_to_file = os.getenv('ETCH_LOG_TO_FILE', 'false').lower() == 'true'

    def set_seed(self, seed: int):
        """One seed drives generation, model init, shuffling and fold assignment."""
        self.seed = int(seed)
        self.synth = replace(self.synth, seed=self.seed)
        self.model = replace(self.model, seed=self.seed)
        self.train = replace(self.train, seed=self.seed)

    def load_from_file(self, path: str, default_section: Optional[str] = None):
        """
        Apply a JSON config file on top of the current settings.

        Args:
            path: JSON file with sections synth/conditioning/model/train/cv and
                top-level seed/jobs/output_dir
            default_section: Section a flat file (no section keys) belongs to
        """
        try:
            with open(path, 'r', encoding='utf-8') as f:
                payload = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}", field='config')
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}", field='config')
        if not isinstance(payload, dict):
            raise ConfigError(f"config file {path} must hold a JSON object", field='config')

        structured = any(key in SECTIONS for key in payload) or all(key in TOP_LEVEL for key in payload)
        if not structured and default_section:
            flat = payload
            payload = {default_section: flat}
            if 'seed' in flat:
                payload['seed'] = flat['seed']
        self.apply(payload)

    def apply(self, payload: dict):
        for key in payload:
            if key not in SECTIONS and key not in TOP_LEVEL:
                raise ConfigError(f"unknown config field {key}", field=key)
        if 'seed' in payload:
            self.set_seed(_coerce(0, payload['seed'], 'seed'))
        if 'jobs' in payload:
            self.jobs = _coerce(0, payload['jobs'], 'jobs')
        if 'output_dir' in payload:
            self.output_dir = str(payload['output_dir'])
        for section in SECTIONS:
            if section in payload:
                setattr(self, section, _apply_section(getattr(self, section), payload[section], section))

    def apply_overrides(self, overrides: Iterable[str]):
        """
        Apply `section.field=value` strings (nested: conditioning.selection.top_k=4).
        Values are parsed as JSON when possible, else taken as strings.
        """
        for item in overrides or ():
            if '=' not in item:
                raise ConfigError(f"override must look like section.field=value: {item!r}", field=item)
            dotted, raw = item.split('=', 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            parts = dotted.strip().split('.')
            if len(parts) == 1:
                self.apply({parts[0]: value})
                continue
            nested = value
            for part in reversed(parts[1:]):
                nested = {part: nested}
            self.apply({parts[0]: nested})

    def validate(self):
        """
        Validate configuration settings.

        Returns:
            tuple: (is_valid: bool, error_message: Optional[str])
        """
        if self.jobs < 1:
            return False, "jobs must be >= 1"
        for section in SECTIONS:
            is_valid, error = getattr(self, section).validate()
            if not is_valid:
                return False, error
        return True, None

    def require_valid(self):
        """Raise ConfigError naming the offending field when validation fails."""
        is_valid, error = self.validate()
        if not is_valid:
            raise ConfigError(error, field=error.split()[0])

    def snapshot(self) -> dict:
        """JSON-ready view of every setting, in config-file form."""
        out = {'seed': self.seed, 'jobs': self.jobs, 'output_dir': self.output_dir}
        for section in SECTIONS:
            body = asdict(getattr(self, section))
            out[section] = {_json_key(section, k): v for k, v in body.items()}
        return out
