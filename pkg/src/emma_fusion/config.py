"""Run configuration.

Every knob of both training stages lives in :class:`TrainConfig`. Keys left
out of a config file are filled from a profile: ``desk`` (CPU-minutes, the
default) or ``full`` (the published training setup). Unknown keys are
rejected.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError, MissingFileError
from .losses import LossWeights
from .networks import FuserArch, SensorArch
from .transforms import GroupConfig

SCHEMA_VERSION = 1

Ablation = Literal[
    "none",
    "no_equivariance",
    "no_sensing",
    "traditional",
    "traditional_plus_DA",
    "no_global",
    "no_local",
]
PseudoGTRule = Literal["max", "average", "gradient_weighted"]

PROFILES = {
    "desk": {
        1: dict(epochs=30, batch_size=1, patch_size=64, lr_initial=4e-3,
                lr_decay_factor=0.5, lr_decay_every_epochs=20),
        2: dict(epochs=40, batch_size=1, patch_size=64, lr_initial=1e-3,
                lr_decay_factor=0.5, lr_decay_every_epochs=20),
        "fuser": dict(scales=2, base_channels=8),
        "sensor": dict(depth=3, base_channels=8),
    },
    "full": {
        1: dict(epochs=100, batch_size=8, patch_size=128, lr_initial=1e-4,
                lr_decay_factor=0.5, lr_decay_every_epochs=20),
        2: dict(epochs=100, batch_size=8, patch_size=128, lr_initial=1e-4,
                lr_decay_factor=0.5, lr_decay_every_epochs=20),
        "fuser": dict(scales=4, base_channels=32),
        "sensor": dict(depth=5, base_channels=32),
    },
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


class WeightsModel(_Strict):
    alpha1: float = Field(1.0, ge=0)
    alpha2: float = Field(0.1, ge=0)

    def to_weights(self) -> LossWeights:
        return LossWeights(self.alpha1, self.alpha2)


class GroupModel(_Strict):
    shifts: bool = True
    max_shift: Optional[int] = Field(None, ge=0, description="defaults to patch_size // 4")
    rotations: bool = True
    flips: bool = True
    nontrivial: bool = True


class FuserModel(_Strict):
    scales: int = Field(2, ge=1)
    base_channels: int = Field(8, ge=1)
    ffn_expansion: int = Field(2, ge=1)


class SensorModel(_Strict):
    depth: int = Field(3, ge=1)
    base_channels: int = Field(8, ge=1)


class TrainConfig(_Strict):
    schema_version: int = Field(SCHEMA_VERSION, alias="schema")
    profile: Literal["desk", "full"] = "desk"
    stage: Literal[1, 2]
    epochs: int = Field(ge=0)
    batch_size: int = Field(ge=1)
    patch_size: int = Field(ge=2)
    lr_initial: float = Field(gt=0)
    lr_decay_factor: float = Field(gt=0, le=1)
    lr_decay_every_epochs: int = Field(ge=1)
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(1e-8, gt=0)
    weights: WeightsModel = WeightsModel()
    group: GroupModel = GroupModel()
    pseudo_gt_rule: PseudoGTRule = "gradient_weighted"
    ablation: Ablation = "none"
    detach_target: bool = False
    fuser: FuserModel
    sensor: SensorModel
    audit_every: int = Field(0, ge=0, description="0 audits only before and after training")
    audit_samples: int = Field(8, ge=0)
    seed: int = 0
    checkpoint_dir: Optional[str] = None

    @model_validator(mode="before")
    @classmethod
    def _fill_profile(cls, data):
        if not isinstance(data, dict):
            return data
        data = dict(data)
        profile = data.get("profile", "desk")
        stage = data.get("stage")
        if profile not in PROFILES or stage not in (1, 2):
            return data  # let field validation report it
        for key, value in PROFILES[profile][stage].items():
            data.setdefault(key, value)
        for key in ("fuser", "sensor"):
            merged = dict(PROFILES[profile][key])
            if isinstance(data.get(key), dict):
                merged.update(data[key])
            elif key in data:
                continue
            data[key] = merged
        return data

    @field_validator("schema_version")
    @classmethod
    def _known_schema(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema {v}, expected {SCHEMA_VERSION}")
        return v

    @field_validator("patch_size")
    @classmethod
    def _even_patch(cls, v):
        if v % 2:
            raise ValueError("patch_size must be even")
        return v

    def loss_weights(self) -> LossWeights:
        w = self.weights.to_weights()
        if self.ablation == "no_equivariance":
            return LossWeights(w.alpha1, 0.0)
        return w

    def group_config(self) -> GroupConfig:
        g = self.group
        max_shift = self.patch_size // 4 if g.max_shift is None else g.max_shift
        return GroupConfig(
            shifts=g.shifts, max_shift=max_shift, rotations=g.rotations,
            flips=g.flips, nontrivial=g.nontrivial,
        )

    def fuser_arch(self) -> FuserArch:
        branches = {"no_global": "local_only", "no_local": "global_only"}.get(self.ablation, "both")
        return FuserArch(
            scales=self.fuser.scales, base_channels=self.fuser.base_channels,
            branches=branches, ffn_expansion=self.fuser.ffn_expansion,
        )

    def sensor_arch(self) -> SensorArch:
        return SensorArch(depth=self.sensor.depth, base_channels=self.sensor.base_channels)

    def lr_at_epoch(self, epoch: int) -> float:
        """Step schedule with a 0-based epoch index."""
        return self.lr_initial * self.lr_decay_factor ** (epoch // self.lr_decay_every_epochs)

    def canonical_json(self) -> str:
        """Every option that can change results; the output location is not one."""
        data = self.model_dump(mode="json", by_alias=True, exclude={"checkpoint_dir"})
        return json.dumps(data, sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


class DataConfig(_Strict):
    """Settings for ``synth-data``."""

    schema_version: int = Field(SCHEMA_VERSION, alias="schema")
    seed: int = 0
    num_pairs: int = Field(8, ge=1)
    num_heldout: int = Field(4, ge=0)
    height: int = Field(64, ge=32)
    width: int = Field(64, ge=32)
    patch_size: int = Field(64, ge=2)
    out_dir: Optional[str] = None

    @field_validator("schema_version")
    @classmethod
    def _known_schema(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema {v}, expected {SCHEMA_VERSION}")
        return v

    def canonical_json(self) -> str:
        data = self.model_dump(mode="json", by_alias=True, exclude={"out_dir"})
        return json.dumps(data, sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _format_validation(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def parse_config(model, data: dict):
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"no such config file: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return data


def load_train_config(path, overrides: dict | None = None) -> TrainConfig:
    data = read_config_file(path)
    data.update(overrides or {})
    return parse_config(TrainConfig, data)


def stage_config(stage: int, **overrides) -> TrainConfig:
    """Build a validated config in code; keyword arguments override profile defaults."""
    return parse_config(TrainConfig, {"stage": stage, **overrides})
