"""Session configuration documents (JSON) and their validation."""
from __future__ import annotations

import json
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .simnet import MOTION_KINDS, gen_motion


class ConfigError(ValueError):
    """Invalid session configuration; the message names the offending field."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class OscillatorOverride(_Strict):
    freq_offset_ppm: Optional[float] = None
    random_walk_ppm: Optional[float] = Field(None, ge=0)
    latch_jitter_s: Optional[float] = Field(None, ge=0)
    initial_offset_s: Optional[float] = None


class OscillatorConfig(_Strict):
    nominal_rate_hz: float = Field(800.0, gt=0)
    offset_range_ppm: float = Field(100.0, ge=0)
    random_walk_ppm: float = Field(5.0, ge=0)
    latch_jitter_s: float = Field(5e-6, ge=0)
    initial_offset_range_s: float = Field(0.0, ge=0)
    overrides: dict[int, OscillatorOverride] = Field(default_factory=dict)


class MotionConfig(_Strict):
    kind: str = "flip"
    params: dict = Field(default_factory=dict)

    @field_validator("kind")
    @classmethod
    def _known(cls, v):
        if v not in MOTION_KINDS:
            raise ValueError(f"must be one of {list(MOTION_KINDS)}")
        return v

    @model_validator(mode="after")
    def _params(self):
        gen_motion(self.kind, 1.0, **self.params)
        return self


class NoiseConfig(_Strict):
    orientation_deg: float = Field(0.05, ge=0)
    gyro_rad_s: float = Field(0.005, ge=0)
    capture_deg: float = Field(0.05, ge=0)


class CalibrationConfig(_Strict):
    alpha_deg: float = Field(90.0, gt=0, lt=180)
    start_pitch_deg: float = 0.0
    window_s: float = Field(0.25, gt=0)
    threshold: float = Field(0.05, gt=0, lt=1)


class SyncConfig(_Strict):
    rate_hz: float = Field(800.0, gt=0)
    baseline: bool = False


class SpectrumConfig(_Strict):
    f_min_hz: float = Field(100.0, ge=0)
    window_length: int = Field(256, ge=2)
    hop: int = Field(16, ge=1)
    mode: Literal["auto", "gyro", "orientation"] = "auto"
    source: Literal["hand_frames", "aligned"] = "aligned"


class RetargetConfig(_Strict):
    hand: Literal["four_finger", "five_finger"] = "four_finger"
    tol: float = Field(1e-6, gt=0)
    max_iter: int = Field(100, ge=0)
    frame_rate_hz: float = Field(10.0, gt=0)


class SessionConfig(_Strict):
    seed: int = 0
    duration_s: float = Field(140.0, gt=0)
    anchor_period_s: float = Field(1.0, gt=0)
    topology: Literal["hand18"] = "hand18"
    oscillators: OscillatorConfig = OscillatorConfig()
    motion: MotionConfig = MotionConfig()
    noise: NoiseConfig = NoiseConfig()
    calibration: CalibrationConfig = CalibrationConfig()
    sync: SyncConfig = SyncConfig()
    spectrum: SpectrumConfig = SpectrumConfig()
    retarget: RetargetConfig = RetargetConfig()
    gzip: bool = False


def _describe(exc):
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        msg = "unknown field" if err["type"] == "extra_forbidden" else err["msg"]
        lines.append(f"{loc}: {msg}")
    return "; ".join(lines)


def parse_config(doc):
    """Validate a decoded JSON document into a :class:`SessionConfig`."""
    if not isinstance(doc, dict):
        raise ConfigError("<root>: config must be a JSON object")
    try:
        return SessionConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from None


def load_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    try:
        return parse_config(doc)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def dump_config(cfg):
    return cfg.model_dump(mode="json")
