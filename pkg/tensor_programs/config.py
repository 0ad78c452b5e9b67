"""
Run settings.

Settings are declared with mkdocs config options and read from YAML, lowest
precedence first: the packaged ``defaults.yml``, an optional user file and
explicit overrides (command line flags).
"""
import logging
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from mkdocs.config.base import ValidationError
from mkdocs.config.config_options import Choice, Type
from mkdocs.exceptions import ConfigurationError
from mkdocs.utils import yaml_load

from tensor_programs.gaussian import ExpectationMethod

try:
    from mkdocs.config.base import LegacyConfig as SchemaConfig
except ImportError:
    from mkdocs.config.base import Config as SchemaConfig

log = logging.getLogger(__name__)

DEFAULTS_FILE = Path(__file__).resolve().parent / "defaults.yml"

METHODS = {"quad": "quadrature", "mc": "monte_carlo", "auto": "auto"}


class Tolerance(Type):
    """
    Tolerance Config Option

    A strictly positive real. YAML reads ``1e-8`` as a string, so numeric
    strings are accepted too.
    """

    def __init__(self, **kwargs):
        super().__init__(float, **kwargs)

    def run_validation(self, value):
        if isinstance(value, bool):
            raise ValidationError(f"Expected a positive number, received '{value}'.")
        if isinstance(value, (int, str)):
            try:
                value = float(value)
            except ValueError:
                raise ValidationError(f"Expected a positive number, received '{value}'.")
        value = super().run_validation(value)
        if not value > 0:
            raise ValidationError(f"Expected a positive number, received '{value}'.")
        return value


class Count(Type):
    """
    Count Config Option

    An integer not smaller than ``minimum``.
    """

    def __init__(self, minimum: int = 0, **kwargs):
        super().__init__(int, **kwargs)
        self.minimum = minimum

    def run_validation(self, value):
        if isinstance(value, bool):
            raise ValidationError(f"Expected an integer, received '{value}'.")
        if isinstance(value, str) and value.strip().isdigit():
            value = int(value)
        value = super().run_validation(value)
        if value < self.minimum:
            raise ValidationError(f"Expected an integer >= {self.minimum}, received {value}.")
        return value


class Workers(Count):
    """
    Workers Config Option

    Size of the simulation thread pool, 0 meaning every available CPU. A
    positive ``TP_THREADS`` environment variable caps the result.
    """

    def run_validation(self, value):
        value = super().run_validation(value)
        if value == 0:
            value = os.cpu_count() or 1
        cap = os.environ.get("TP_THREADS", "").strip()
        if cap.isdigit() and 0 < int(cap) < value:
            log.debug(f"threads capped at {cap} by TP_THREADS")
            value = int(cap)
        return value


config_scheme = (
    ("seed", Count(default=0, required=False)),
    ("trials", Count(minimum=2, default=10, required=False)),
    ("mc_samples", Count(minimum=2, default=200_000, required=False)),
    ("quad_points", Count(minimum=1, default=40, required=False)),
    ("quad_dim_max", Count(minimum=0, default=3, required=False)),
    ("method", Choice(list(METHODS), default="auto", required=False)),
    ("psd_tol", Tolerance(default=1e-8, required=False)),
    ("pinv_rcond", Tolerance(default=1e-10, required=False)),
    ("width_cap", Count(minimum=1, default=32768, required=False)),
    ("coupled", Type(bool, default=False, required=False)),
    ("threads", Workers(default=0, required=False)),
)


@dataclass(frozen=True)
class Settings:
    seed: int = 0
    trials: int = 10
    mc_samples: int = 200_000
    quad_points: int = 40
    quad_dim_max: int = 3
    method: str = "auto"
    psd_tol: float = 1e-8
    pinv_rcond: float = 1e-10
    width_cap: int = 32768
    coupled: bool = False
    threads: int = 1

    def expectation_method(self) -> ExpectationMethod:
        return ExpectationMethod(
            METHODS[self.method],
            points_per_dim=self.quad_points,
            samples=self.mc_samples,
            seed=self.seed,
            quad_dim_max=self.quad_dim_max,
            psd_tol=self.psd_tol,
        )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _read_yaml(path) -> dict:
    try:
        with open(path, encoding="utf-8") as stream:
            data = yaml_load(stream)
    except OSError as error:
        raise ConfigurationError(f"cannot read settings file '{path}': {error}")
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"settings file '{path}' must contain a mapping")
    return data


def load_settings(config_file: Optional[str] = None, **overrides) -> Settings:
    """
    Validated settings. Overrides set to ``None`` are ignored so that unset
    command line flags fall through to the files.
    """
    config = SchemaConfig(schema=config_scheme, config_file_path=config_file)
    config.load_dict(_read_yaml(DEFAULTS_FILE))
    if config_file is not None:
        config.load_dict(_read_yaml(config_file))
    config.load_dict({key: value for key, value in overrides.items() if value is not None})
    failed, warnings = config.validate()
    for key, warning in warnings:
        log.warning(f"settings value '{key}': {warning}")
    if failed:
        raise ConfigurationError("invalid settings: " + "; ".join(f"'{key}': {error}" for key, error in failed))
    settings = Settings(**{f.name: config[f.name] for f in fields(Settings)})
    log.debug(f"settings: {settings.to_dict()}")
    return settings
