"""Configuration objects shared by the CLI and the training pipeline.

One JSON document covers the four sections (data / encoder / loss / train);
flags can override individual fields through dotted paths, e.g.
``--train.batch_identities 8``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any


class ConfigError(ValueError):
    """Raised when a config document or an override is invalid."""


@dataclass
class DataConfig:
    height: int = 64
    width: int = 32
    num_parts: int = 5            # including background
    train_identities: int = 32
    test_identities: int = 16
    instances_per_identity: int = 8
    cameras: int = 4
    color_separation: float = 0.15
    # renderer difficulty knobs
    clutter_blobs_min: int = 4
    clutter_blobs_max: int = 9
    occluders_min: int = 0
    occluders_max: int = 2
    scale_jitter: float = 0.15
    brightness_jitter: float = 0.08
    person_height_frac: float = 0.84
    person_width_frac: float = 0.66

    def validate(self):
        if self.height % 16 or self.width % 16:
            raise ConfigError("image dims must be divisible by 16 (stride arithmetic)")
        if not (2 <= self.num_parts <= 20):
            raise ConfigError("num_parts must be in [2, 20]")
        if self.cameras < 1:
            raise ConfigError("cameras must be >= 1")
        if self.instances_per_identity < 1:
            raise ConfigError("instances_per_identity must be >= 1")
        if not (0.0 < self.color_separation < 1.0):
            raise ConfigError("color_separation must be in (0, 1)")


@dataclass
class EncoderConfig:
    variant: str = "conv"          # {conv, vit}
    stage_channels: tuple[int, int, int] = (16, 32, 64)
    embed_dim: int = 64            # shared image-text dim
    token_width: int = 32          # text token vector width
    max_text_len: int = 16
    patch_size: int = 8            # vit patchify stride (fixed at 8)
    depth: int = 4                 # vit transformer blocks
    heads: int = 4
    context_tokens: int = 4        # learnable prompt tokens per identity (M)

    def validate(self):
        if self.variant not in ("conv", "vit"):
            raise ConfigError(f"unknown encoder variant {self.variant!r}")
        if len(tuple(self.stage_channels)) != 3:
            raise ConfigError("stage_channels must list three stages")
        if self.patch_size != 8:
            raise ConfigError("vit patch stride is fixed at 8")
        if self.context_tokens < 0:
            raise ConfigError("context_tokens must be >= 0")


@dataclass
class LossConfig:
    temperature: float = 0.07
    label_smoothing: float = 0.1
    margin: float = 0.3
    logit_scale: float = 1.0 / 0.07
    weight_id: float = 1.0
    weight_triplet: float = 1.0
    weight_i2tce: float = 1.0
    weight_align: float = 1.0
    weight_part: float = 1.0       # dense term inside the prompt objective
    background_cell_weight: float = 1.0
    cells_per_image: int = 64      # dense-loss subsample cap per image

    def validate(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if not (0.0 <= self.label_smoothing < 1.0):
            raise ConfigError("label_smoothing must be in [0, 1)")
        if self.margin < 0:
            raise ConfigError("margin must be >= 0")
        for name in ("weight_id", "weight_triplet", "weight_i2tce", "weight_align", "weight_part"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass
class TrainConfig:
    stage1_id_epochs: int = 15
    stage1_part_epochs: int = 5
    stage2_epochs: int = 24
    batch_identities: int = 4      # P
    batch_instances: int = 4       # K
    lr_stage1: float = 3.5e-4
    lr_stage2_conv: float = 3.5e-4
    lr_stage2_vit: float = 5e-6
    milestone_fractions: tuple[float, float] = (1.0 / 3.0, 7.0 / 12.0)
    warmup_fraction: float = 0.1
    erase_prob: float = 0.5
    flip_prob: float = 0.5
    crop_pad: int = 2
    seed: int = 0

    def validate(self):
        if self.batch_identities < 2:
            raise ConfigError("batch_identities must be >= 2 (losses need negatives)")
        if self.batch_instances < 2:
            raise ConfigError("batch_instances must be >= 2 (triplet needs positives)")
        m1, m2 = self.milestone_fractions
        if not (0.0 < m1 < m2 < 1.0):
            raise ConfigError("milestone fractions must be strictly increasing in (0, 1)")
        for n in ("stage1_id_epochs", "stage1_part_epochs", "stage2_epochs"):
            if getattr(self, n) < 0:
                raise ConfigError(f"{n} must be >= 0")


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        self.data.validate()
        self.encoder.validate()
        self.loss.validate()
        self.train.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "Config":
        cfg = cls()
        for section_name in ("data", "encoder", "loss", "train"):
            section = getattr(cfg, section_name)
            for key, value in (doc.get(section_name) or {}).items():
                if not hasattr(section, key):
                    raise ConfigError(f"unknown config field {section_name}.{key}")
                current = getattr(section, key)
                if isinstance(current, tuple):
                    value = tuple(value)
                setattr(section, key, value)
        extra = set(doc) - {"data", "encoder", "loss", "train"}
        if extra:
            raise ConfigError(f"unknown config sections: {sorted(extra)}")
        return cfg

    @classmethod
    def from_json(cls, path) -> "Config":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid config JSON {path}: {exc}") from exc
        return cls.from_dict(doc)

    def apply_override(self, dotted: str, raw: str):
        """Set ``section.field`` from a raw CLI string, keeping the field's type."""
        try:
            section_name, key = dotted.split(".", 1)
        except ValueError:
            raise ConfigError(f"override {dotted!r} is not of the form section.field")
        if section_name not in ("data", "encoder", "loss", "train"):
            raise ConfigError(f"unknown config section {section_name!r}")
        section = getattr(self, section_name)
        if not hasattr(section, key):
            raise ConfigError(f"unknown config field {dotted}")
        current = getattr(section, key)
        setattr(section, key, _coerce(raw, current, dotted))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _coerce(raw: str, current: Any, name: str):
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"{name}: cannot parse {raw!r} as bool")
    if isinstance(current, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{name}: cannot parse {raw!r} as int")
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{name}: cannot parse {raw!r} as float")
    if isinstance(current, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        elem = current[0] if current else 0
        return tuple(type(elem)(p) for p in parts)
    return raw
