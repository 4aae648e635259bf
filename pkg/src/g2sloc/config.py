"""Run configuration: one YAML file, validated, with ``--set section.key=value`` overrides.

Precedence is flag > file > default. Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .geometry import GroundCameraRig
from .metric_learning import ConfigError, TrainConfig
from .models import FeatureExtractorSpec, ModelBundle, PoseRegressorSpec
from .rotation import RotationTrainConfig
from .simworld import PoseNoiseModel


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class WorldSection(_Section):
    size_px: int = Field(4096, ge=1024)
    gamma_w: float = Field(0.2, gt=0)
    style: Literal["roads", "roads+distractors"] = "roads"
    n_samples: int = Field(100, ge=0)
    sat_size_px: int = Field(512, ge=32)
    sat_gamma: float = Field(0.2, gt=0)


class RigSection(_Section):
    width: int = Field(512, ge=8)
    height: int = Field(128, ge=8)
    hfov_deg: float = Field(90.0, gt=0, lt=180)
    height_m: float = Field(1.6, gt=0)

    def build(self) -> GroundCameraRig:
        return GroundCameraRig.default(self.width, self.height, self.hfov_deg, self.height_m)


class NoiseSection(_Section):
    max_translation_m: float = Field(20.0, ge=0)
    max_rotation_deg: float = Field(20.0, ge=0, le=180)
    label_noise_m: float = Field(5.0, ge=0)


class ModelSection(_Section):
    levels: int = Field(3, ge=1)
    channels: int = Field(16, ge=1)
    base_width: int = Field(16, ge=1)
    token_stride: int = Field(4, ge=1)
    embed_dim: int = Field(64, ge=4)
    heads: int = Field(4, ge=1)
    window: int = Field(8, ge=1)
    hidden: int = Field(128, ge=1)


class RotationTrainSection(_Section):
    epochs: int = Field(16, ge=0)
    batch_size: int = Field(8, ge=1)
    lr: float = Field(3e-4, gt=0)
    input_scale: float = Field(0.5, gt=0, le=1)
    random_reference_heading: bool = True
    overfit: bool = False
    steps: Optional[int] = Field(None, ge=0)
    final_lr_ratio: float = Field(1.0, gt=0, le=1)
    max_range_m: Optional[float] = Field(None, gt=0)
    reference_px: Optional[int] = Field(None, ge=4)


class TranslationTrainSection(_Section):
    alpha: float = Field(10.0, gt=0)
    lam: Literal[0, 1] = 0
    d_m: float = Field(5.0, gt=0)
    batch_size: int = Field(8, ge=2)
    epochs: int = Field(4, ge=1)
    lr: float = Field(1e-4, gt=0)
    kernel_m: float = Field(40.0, gt=0)
    steps: Optional[int] = Field(None, ge=0)
    overfit: bool = False


class EvalSection(_Section):
    mode: Literal["model", "oracle", "prior", "random"] = "model"
    thresholds_m: list[float] = [1.0, 3.0, 5.0]
    thresholds_deg: list[float] = [1.0, 3.0, 5.0]

    @field_validator("thresholds_m", "thresholds_deg")
    @classmethod
    def _positive(cls, v):
        if not v or any(t < 0 for t in v):
            raise ValueError("thresholds must be a non-empty list of non-negative numbers")
        return v


class PathsSection(_Section):
    data_dir: Optional[str] = None
    rot_ckpt: Optional[str] = None
    trans_ckpt: Optional[str] = None
    out: Optional[str] = None


class RunConfig(_Section):
    seed: int = 0
    world: WorldSection = WorldSection()
    rig: RigSection = RigSection()
    noise: NoiseSection = NoiseSection()
    model: ModelSection = ModelSection()
    rotation_train: RotationTrainSection = RotationTrainSection()
    translation_train: TranslationTrainSection = TranslationTrainSection()
    eval: EvalSection = EvalSection()
    paths: PathsSection = PathsSection()

    # -- builders ------------------------------------------------------------

    def noise_model(self) -> PoseNoiseModel:
        return PoseNoiseModel(self.noise.max_translation_m, self.noise.max_rotation_deg)

    def rotation_config(self, rig: GroundCameraRig) -> RotationTrainConfig:
        r = self.rotation_train
        return RotationTrainConfig(
            epochs=r.epochs, batch_size=r.batch_size, lr=r.lr, seed=self.seed,
            max_rotation_deg=self.noise.max_rotation_deg, max_translation_m=self.noise.max_translation_m,
            input_scale=r.input_scale, hfov=rig.hfov, near_range_m=rig.min_visible_range(),
            random_reference_heading=r.random_reference_heading, overfit=r.overfit, steps=r.steps,
            final_lr_ratio=r.final_lr_ratio, max_range_m=r.max_range_m,
            reference_px=r.reference_px,
        )

    def translation_config(self) -> TrainConfig:
        t = self.translation_train
        return TrainConfig(alpha=t.alpha, lam=t.lam, d_m=t.d_m, batch_size=t.batch_size, epochs=t.epochs,
                           lr=t.lr, seed=self.seed, kernel_m=t.kernel_m, steps=t.steps, overfit=t.overfit)

    def build_bundle(self) -> ModelBundle:
        m = self.model
        ext = dict(levels=m.levels, channels=m.channels, base_width=m.base_width)
        side = self.world.sat_size_px * self.rotation_train.input_scale * 0.25
        if abs(side - round(side)) > 1e-9:
            raise ConfigError("sat_size_px * input_scale must be a multiple of 4")
        reg = PoseRegressorSpec(
            in_channels=m.channels, input_size=int(round(side)), token_stride=m.token_stride,
            embed_dim=m.embed_dim, heads=m.heads, window=m.window, hidden=m.hidden,
            max_rotation_deg=self.noise.max_rotation_deg, max_translation_m=self.noise.max_translation_m,
        )
        return ModelBundle.build(
            self.seed,
            rot_spec=FeatureExtractorSpec(share_with="rotation", **ext),
            reg_spec=reg,
            trans_spec=FeatureExtractorSpec(confidence_head=True, share_with="translation", **ext),
        )


def _parse_scalar(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {p!r} is not a section")
        node[parts[-1]] = _parse_scalar(value)
    return data


def load_config(path=None, overrides=None) -> RunConfig:
    data = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{p}: invalid YAML ({e})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
    data = apply_overrides(data, overrides)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from None


def config_schema() -> dict:
    return RunConfig.model_json_schema()


def write_schema(path):
    Path(path).write_text(json.dumps(config_schema(), indent=2, sort_keys=True) + "\n")
