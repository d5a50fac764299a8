"""Pipeline configuration and its JSON key/value file form."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError

MODES = ("affinity", "qk", "cosine_diag", "baseline")
SAMPLING_MODES = ("global", "local")


@dataclass(frozen=True)
class PipelineConfig:
    k: int = 750
    a: int = 30
    nms_select: float = 0.75
    nms_final: float = 0.5
    f_g: int = 31
    f_l: int = 0
    sampling_mode: str = "global"
    tau: float = 0.75
    m: int = 4
    d_head: int = 16
    mode: str = "affinity"
    seed: int = 0
    train_frames: int = 16

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("k", "a", "m", "d_head", "train_frames"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.k < self.a:
            raise ConfigError(f"k ({self.k}) must be >= a ({self.a})")
        for name in ("f_g", "f_l", "seed"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("nms_select", "nms_final", "tau"):
            v = float(getattr(self, name))
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.sampling_mode not in SAMPLING_MODES:
            raise ConfigError(f"sampling_mode must be one of {SAMPLING_MODES}, got {self.sampling_mode!r}")

    @property
    def D(self) -> int:
        return self.m * self.d_head

    def with_(self, **changes) -> "PipelineConfig":
        try:
            return replace(self, **changes)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown pipeline config keys: {sorted(unknown)}")
        casts = {"int": int, "float": float, "str": str}
        try:
            kwargs = {k: casts[known[k]](v) for k, v in data.items()}
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad config value: {exc}") from None
        return cls(**kwargs)


def load_config_file(path) -> dict:
    """Parse a JSON config document into {'pipeline': PipelineConfig, 'synth': dict | None}.

    Top-level keys are pipeline fields; an optional ``"synth"`` object holds
    synthetic-generator settings.
    """
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config document must be a JSON object")
    synth = raw.pop("synth", None)
    return {"pipeline": PipelineConfig.from_dict(raw), "synth": synth}


def dump_config(cfg: PipelineConfig, path, synth: dict | None = None) -> None:
    doc = cfg.to_dict()
    if synth is not None:
        doc["synth"] = synth
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
