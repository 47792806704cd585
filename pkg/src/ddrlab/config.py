"""Experiment configuration: validated, JSON round-trippable."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .distance_engine import DEFAULT_TAU_CUT, DEFAULT_THETA_MIN
from .metric_domain import SCENARIOS
from .reconstruction import DEFAULT_THRESHOLDS

__all__ = ["ConfigError", "Thresholds", "ExperimentConfig", "canonical_json"]


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class Thresholds:
    tau_cut: float = DEFAULT_TAU_CUT
    theta_min: float = DEFAULT_THETA_MIN
    delta_max: float | None = None  # None: two frame spacings
    lambda_tol: float = DEFAULT_THRESHOLDS["lambda_tol"]
    lambda_spread: float = DEFAULT_THRESHOLDS["lambda_spread"]
    ratio_test: float = DEFAULT_THRESHOLDS["ratio_test"]

    # documented ranges
    RANGES = {
        "tau_cut": (0.0, 1.0),
        "theta_min": (0.0, 90.0),
        "delta_max": (0.0, 1.0),
        "lambda_tol": (0.0, 1.0),
        "lambda_spread": (0.0, 1.0),
        "ratio_test": (0.0, 1.0),
    }

    def validate(self):
        for name, (lo, hi) in self.RANGES.items():
            v = getattr(self, name)
            if v is None and name == "delta_max":
                continue
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not lo < v <= hi:
                raise ConfigError(f"threshold {name}={v!r} outside ({lo}, {hi}]")


@dataclass
class ExperimentConfig:
    scenario: str = "disk"
    h: float = 0.02
    stencil_radius: int = 3
    frame_spacing: float = 0.02
    source_spacing: float = 0.05
    thresholds: Thresholds = field(default_factory=Thresholds)
    seed: int = 0
    n_probes: int = 20

    def __post_init__(self):
        if isinstance(self.thresholds, dict):
            self.thresholds = Thresholds(**self.thresholds)
        self.validate()

    def validate(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; choose from {', '.join(SCENARIOS)}")
        for name in ("h", "frame_spacing", "source_spacing"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
                raise ConfigError(f"{name} must be > 0 (got {v!r})")
        if self.h > 0.2:
            raise ConfigError(f"h={self.h} is too coarse (must be <= 0.2)")
        if not isinstance(self.stencil_radius, int) or self.stencil_radius < 1:
            raise ConfigError(f"stencil_radius must be an integer >= 1 (got {self.stencil_radius!r})")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer (got {self.seed!r})")
        if not isinstance(self.n_probes, int) or self.n_probes < 1:
            raise ConfigError(f"n_probes must be a positive integer (got {self.n_probes!r})")
        self.thresholds.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(extra))}")
        th = doc.get("thresholds", {})
        if not isinstance(th, dict):
            raise ConfigError("thresholds must be an object")
        bad = set(th) - {f.name for f in fields(Thresholds)}
        if bad:
            raise ConfigError(f"unknown threshold keys: {', '.join(sorted(bad))}")
        return cls(**{**doc, "thresholds": Thresholds(**th)})

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())


def _canon(obj):
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    elif isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float):
        if obj != obj or obj in (float("inf"), float("-inf")):
            return repr(obj)  # JSON has no inf / nan
        return float(repr(obj))
    if isinstance(obj, dict):
        return {str(k): _canon(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canon(v) for v in obj]
    return obj


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, shortest round-trip floats, inf/nan as strings."""
    return json.dumps(_canon(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"
