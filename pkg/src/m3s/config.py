"""Experiment configuration: one flat dataclass, readable from a plain-text
key=value file, overridable per key, with an M3S_SEED environment escape
hatch for seed sweeps."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields

from .errors import ConfigError

SCHEMES = ("full", "A", "B", "C", "D", "E", "F", "persistence")


@dataclass
class ExperimentConfig:
    """Every knob of a run; field names double as config keys and CLI flags."""

    scheme: str = "full"
    seed: int = 0
    # data window
    lookback: int = 96
    tau: int = 6
    image_size: int = 64
    n_frames: int = 4
    stride: int = 1
    # temporal branch
    d_model: int = 128
    m_scales: int = 2
    k_periods: int = 3
    window: int = 4
    interval: int = 4
    depth: int = 2
    # visual branch
    base_channels: int = 64
    n_stages: int = 4
    k1: int = 3
    d1: int = 1
    k2: int = 5
    d2: int = 2
    partial_ratio: float = 0.25
    lambda_init: float = 1.0
    # fusion
    n_state: int = 16
    # optimization
    epochs: int = 60
    batch: int = 16
    lr: float = 1e-3
    clip_norm: float = 1.0
    beta: float = 0.1
    patience: int = 10

    def validate(self) -> "ExperimentConfig":
        if self.scheme not in SCHEMES:
            raise ConfigError(
                f"unknown scheme {self.scheme!r}; pick one of {SCHEMES}")
        positive = ("lookback", "tau", "image_size", "n_frames", "stride",
                    "d_model", "k_periods", "window", "interval", "depth",
                    "base_channels", "n_stages", "n_state", "epochs", "batch")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("m_scales", "patience"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("lr", "clip_norm", "beta", "lambda_init"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0 < self.partial_ratio <= 1:
            raise ConfigError(
                f"partial_ratio must lie in (0, 1], got {self.partial_ratio}")
        need = 2 ** (self.n_stages + 1)
        if self.image_size % need:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by {need} "
                f"(required by {self.n_stages} encoder stages)")
        if self.n_frames > self.lookback:
            raise ConfigError(
                f"n_frames {self.n_frames} exceeds lookback {self.lookback}")
        return self

    def apply_env(self) -> "ExperimentConfig":
        """M3S_SEED, when set, wins over both file and flag values."""
        env = os.environ.get("M3S_SEED")
        if env is not None:
            try:
                self.seed = int(env)
            except ValueError:
                raise ConfigError(f"M3S_SEED must be an integer, got {env!r}")
        return self

    def to_text(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


def _coerce(name: str, kind: type, raw: str):
    raw = raw.strip()
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {name!r} expects {kind.__name__}, got {raw!r}")


def parse_config_text(text: str, base: ExperimentConfig | None = None,
                      source: str = "<config>") -> ExperimentConfig:
    """key = value lines; '#' starts a comment; unknown keys are errors."""
    cfg = base or ExperimentConfig()
    kinds = {f.name: f.type for f in fields(ExperimentConfig)}
    types = {"str": str, "int": int, "float": float}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in kinds:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        kind = types.get(kinds[key], str) if isinstance(kinds[key], str) else kinds[key]
        setattr(cfg, key, _coerce(key, kind, raw))
    return cfg


def load_config(path: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    return parse_config_text(text, base=base, source=path)


__all__ = ["ExperimentConfig", "parse_config_text", "load_config", "SCHEMES"]
