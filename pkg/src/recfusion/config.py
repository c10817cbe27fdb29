"""Pipeline configuration: defaults, a YAML key-value file, then command-line overrides."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .corpus import DEFAULT_MIN_LISTENERS
from .errors import ConfigError
from .hybrid import STRATEGIES
from .metrics import RANKING_METRICS
from .synth import SynthSpec


@dataclass(frozen=True)
class PipelineConfig:
    events: str | None = None
    songs: str | None = None
    out: str = "out"
    seed: int = 0
    test_frac: float = 0.1
    reg_frac: float = 0.1
    hidden_frac: float = 0.15
    min_listeners: int = DEFAULT_MIN_LISTENERS
    factors: int = 20
    regularization: float = 0.1
    epochs: int = 50
    bm25_k1: float = 100.0
    bm25_b: float = 0.8
    session_gap: int = 900
    skip_seconds: float = 30.0
    complete_fraction: float = 0.95
    exploratory_level: str = "artist"
    metrics: tuple[str, ...] = RANKING_METRICS
    strategies: tuple[str, ...] = STRATEGIES
    oracle_mode: bool = False
    weighted_rank: bool = False
    pop_by: str = "playcount"
    recommend_k: int = 500
    cv_folds: int = 5
    workers: int = 1  # never affects outputs; like ``out`` it stays out of the manifest
    synth: SynthSpec = field(default_factory=SynthSpec)

    def validate(self) -> None:
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        for name in ("test_frac", "reg_frac", "hidden_frac"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        if self.test_frac + self.reg_frac >= 1:
            raise ConfigError("test_frac + reg_frac must be below 1")
        for name in ("factors", "epochs", "workers", "recommend_k", "cv_folds", "min_listeners"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.regularization < 0 or self.bm25_k1 <= 0 or not 0 <= self.bm25_b <= 1:
            raise ConfigError("need regularization >= 0, bm25_k1 > 0 and bm25_b in [0, 1]")
        if self.session_gap <= 0 or not 0 < self.complete_fraction <= 1:
            raise ConfigError("session_gap must be positive and complete_fraction in (0, 1]")
        unknown = [m for m in self.metrics if m not in RANKING_METRICS]
        if unknown or not self.metrics:
            raise ConfigError(f"unknown metrics {unknown}" if unknown else "metric list is empty")
        unknown = [s for s in self.strategies if s not in STRATEGIES]
        if unknown:
            raise ConfigError(f"unknown strategies {unknown}")
        if self.pop_by not in ("playcount", "listeners"):
            raise ConfigError(f"pop_by must be 'playcount' or 'listeners', got {self.pop_by!r}")
        if self.exploratory_level not in ("artist", "track"):
            raise ConfigError("exploratory_level must be 'artist' or 'track'")
        self.synth.validate()

    def to_dict(self, runtime: bool = True) -> dict[str, Any]:
        d = asdict(self)
        d["metrics"] = list(self.metrics)
        d["strategies"] = list(self.strategies)
        d["synth"] = self.synth.to_dict()
        if not runtime:
            del d["workers"], d["out"]
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)


_FIELDS = {f.name for f in fields(PipelineConfig)}
_SYNTH_FIELDS = {f.name for f in fields(SynthSpec)}
_TUPLES = {"metrics", "strategies"}
_SYNTH_TUPLES = {"events_per_user", "mix_beta"}


def _coerce(key: str, value, default):
    if key in _TUPLES:
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        return tuple(str(v) for v in value)
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key} must be a string, got {value!r}")
    return value


def _synth_from(d: Mapping[str, Any], base: SynthSpec) -> SynthSpec:
    unknown = set(d) - _SYNTH_FIELDS
    if unknown:
        raise ConfigError(f"unknown synth keys: {', '.join(sorted(unknown))}")
    kw = {}
    for k, v in d.items():
        if k in _SYNTH_TUPLES:
            if not isinstance(v, (list, tuple)) or len(v) != 2:
                raise ConfigError(f"synth.{k} must be a pair")
            kw[k] = tuple(type(getattr(base, k)[0])(x) for x in v)
        else:
            kw[k] = _coerce(f"synth.{k}", v, getattr(base, k))
    return replace(base, **kw)


def config_from_dict(d: Mapping[str, Any], base: PipelineConfig | None = None) -> PipelineConfig:
    """Overlay ``d`` on ``base`` (defaults if omitted) and validate."""
    base = base or PipelineConfig()
    unknown = set(d) - _FIELDS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    kw = {}
    for k, v in d.items():
        if k == "synth":
            if not isinstance(v, Mapping):
                raise ConfigError("synth must be a mapping")
            kw[k] = _synth_from(v, base.synth)
        else:
            kw[k] = _coerce(k, v, getattr(base, k))
    cfg = replace(base, **kw)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> PipelineConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (None values are ignored)."""
    cfg = PipelineConfig()
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        if doc is not None and not isinstance(doc, Mapping):
            raise ConfigError(f"config {path} must be a key-value mapping")
        cfg = config_from_dict(doc or {}, cfg)
    if overrides:
        cfg = config_from_dict({k: v for k, v in overrides.items() if v is not None}, cfg)
    cfg.validate()
    return cfg
