"""Run configuration: defaults, JSON config files, and validation.

A config file is a JSON object using exactly these keys (all optional)::

    {
      "min_dim": 64,
      "band": {"lo": 2.0, "hi": 6.0, "green_min": 78.0, "yellow_min": 70.0},
      "fit": {"min_tail": 8, "max_xmin_candidates": null},
      "spectral": {"edge_margin_tw": 2.0},
      "trend": {"warmup_skip": 1, "delta_pp": 1.0},
      "regime": {"minimal_max_pct": 5.0, "deep_min_pct": 50.0, "deep_max_corr": 0.5},
      "histogram": {"bin_width": 0.25},
      "workers": 4,
      "output": {"format": "both", "dir": "report"},
      "ruleset": "rules.json"
    }

Unknown keys raise :class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError
from .spectral import FitConfig, SpectralConfig

WORKERS_ENV = "PARAMSCOPE_WORKERS"


@dataclass(frozen=True)
class BandConfig:
    lo: float = 2.0
    hi: float = 6.0
    green_min: float = 78.0
    yellow_min: float = 70.0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ConfigError("band: lo must be < hi")
        if not self.yellow_min < self.green_min:
            raise ConfigError("band: yellow_min must be < green_min")


@dataclass(frozen=True)
class TrendConfig:
    warmup_skip: int = 1
    delta_pp: float = 1.0

    def __post_init__(self):
        if self.warmup_skip < 0 or self.delta_pp < 0:
            raise ConfigError("trend: warmup_skip and delta_pp must be non-negative")


@dataclass(frozen=True)
class RegimeConfig:
    minimal_max_pct: float = 5.0
    deep_min_pct: float = 50.0
    deep_max_corr: float = 0.5

    def __post_init__(self):
        if not 0 <= self.minimal_max_pct <= self.deep_min_pct:
            raise ConfigError("regime: need 0 <= minimal_max_pct <= deep_min_pct")


@dataclass(frozen=True)
class OutputConfig:
    format: str = "both"
    dir: str = "report"

    def __post_init__(self):
        if self.format not in ("json", "csv", "both"):
            raise ConfigError(f"output.format must be json, csv or both, not {self.format!r}")


def default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
        if n < 1:
            raise ConfigError(f"{WORKERS_ENV} must be positive")
        return n
    return os.cpu_count() or 1


@dataclass(frozen=True)
class RunConfig:
    min_dim: int = 64
    band: BandConfig = field(default_factory=BandConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    edge_margin_tw: float = 2.0
    trend: TrendConfig = field(default_factory=TrendConfig)
    regime: RegimeConfig = field(default_factory=RegimeConfig)
    bin_width: float = 0.25
    workers: int = field(default_factory=default_workers)
    output: OutputConfig = field(default_factory=OutputConfig)
    ruleset: str | None = None

    def __post_init__(self):
        if self.min_dim < 1:
            raise ConfigError("min_dim must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        if not self.bin_width > 0:
            raise ConfigError("histogram.bin_width must be positive")
        if self.edge_margin_tw < 0:
            raise ConfigError("spectral.edge_margin_tw must be non-negative")

    @property
    def spectral(self) -> SpectralConfig:
        return SpectralConfig(fit=self.fit, edge_margin_tw=self.edge_margin_tw)

    def report_dict(self) -> dict:
        """Settings that affect numbers; excludes workers and output location."""
        return {
            "min_dim": self.min_dim,
            "band": dataclasses.asdict(self.band),
            "fit": {"min_tail": self.fit.min_tail, "max_xmin_candidates": self.fit.max_xmin_candidates},
            "spectral": {"edge_margin_tw": self.edge_margin_tw},
            "trend": dataclasses.asdict(self.trend),
            "regime": dataclasses.asdict(self.regime),
            "histogram": {"bin_width": self.bin_width},
            "ruleset": Path(self.ruleset).name if self.ruleset else None,
        }


_SECTIONS = {
    "band": (BandConfig, {"lo", "hi", "green_min", "yellow_min"}),
    "fit": (FitConfig, {"min_tail", "max_xmin_candidates"}),
    "trend": (TrendConfig, {"warmup_skip", "delta_pp"}),
    "regime": (RegimeConfig, {"minimal_max_pct", "deep_min_pct", "deep_max_corr"}),
    "output": (OutputConfig, {"format", "dir"}),
}
_TOP = {"min_dim", "workers", "ruleset", "spectral", "histogram"} | set(_SECTIONS)


def _section(name: str, value: Any) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"{name}: expected an object")
    allowed = _SECTIONS[name][1] if name in _SECTIONS else {"spectral": {"edge_margin_tw"}, "histogram": {"bin_width"}}[name]
    unknown = set(value) - allowed
    if unknown:
        raise ConfigError(f"{name}: unknown keys {sorted(unknown)}")
    return value


def config_from_mapping(doc: Mapping[str, Any], base: RunConfig | None = None) -> RunConfig:
    """Overlay a config mapping on ``base`` (defaults when omitted)."""
    if not isinstance(doc, Mapping):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - _TOP
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = base or RunConfig()
    changes: dict[str, Any] = {}
    try:
        for name, (cls, _) in _SECTIONS.items():
            if name in doc:
                changes[name] = dataclasses.replace(getattr(cfg, name), **_section(name, doc[name]))
        if "spectral" in doc:
            changes.update(_section("spectral", doc["spectral"]))
        if "histogram" in doc:
            changes["bin_width"] = _section("histogram", doc["histogram"]).get("bin_width", cfg.bin_width)
        for key in ("min_dim", "workers", "ruleset"):
            if key in doc:
                changes[key] = doc[key]
        return dataclasses.replace(cfg, **changes)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path: str | os.PathLike | None, base: RunConfig | None = None) -> RunConfig:
    if path is None:
        return base or RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    return config_from_mapping(doc, base)
