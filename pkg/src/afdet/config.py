"""Run configuration: one JSON document, validated, with explicit defaults."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .augment import BETA_A, GRIDMASK_PROB
from .codec import DEFAULT_ALPHA, DEFAULT_SCORE_THRESH, DEFAULT_TOPK
from .data.transforms import IMAGENET_MEAN, IMAGENET_STD
from .losses import AGS_LAMBDA, W_LOC, W_REG
from .nn.model import BACKBONE_CHANNELS, HEAD_WIDTH
from .nn.optim import BASE_LR, EMA_DECAY, LR_GAMMA, MILESTONES, MOMENTUM, TOTAL_ITERS, WEIGHT_DECAY


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SynthConfig(_Section):
    n_images: int = Field(8, ge=1, description="number of synthetic images")
    min_box: int = Field(16, ge=2, description="smallest rectangle side in pixels")
    max_box: int = Field(56, ge=2, description="largest rectangle side in pixels")
    max_objects: int = Field(4, ge=1, description="rectangles per image drawn from 1..max_objects")


class DatasetConfig(_Section):
    source: Literal["synth", "coco"] = Field("synth", description="synthetic rectangles or a COCO-format subset")
    annotations: str | None = Field(None, description="COCO annotation JSON (source=coco)")
    images: str | None = Field(None, description="image directory (source=coco)")
    synth: SynthConfig = SynthConfig()

    @model_validator(mode="after")
    def _coco_paths(self):
        if self.source == "coco" and not self.annotations:
            raise ValueError("dataset.annotations is required when dataset.source is 'coco'")
        return self


class ModelConfig(_Section):
    head_width: int = Field(HEAD_WIDTH, ge=1, description="channels in the upsampling path and heads")
    backbone_channels: tuple[int, int, int, int] = Field(BACKBONE_CHANNELS, description="channels of the four backbone stages")
    head_type: Literal["lite", "conv"] = Field("lite", description="head feature layers: lite blocks (5,1,1,5) or 3x3 convs")
    lite_kernels: tuple[int, int, int, int] = Field((5, 1, 1, 5), description="lite block kernel chain (fixed)")

    @field_validator("lite_kernels")
    @classmethod
    def _fixed_kernels(cls, v):
        if tuple(v) != (5, 1, 1, 5):
            raise ValueError("the lite block kernel chain is fixed at (5, 1, 1, 5)")
        return tuple(v)


class LossConfig(_Section):
    w_loc: float = Field(W_LOC, ge=0, description="localization loss weight")
    w_reg: float = Field(W_REG, ge=0, description="regression loss weight")
    alpha: float = Field(DEFAULT_ALPHA, gt=0, description="Gaussian kernel size factor")
    ags_enabled: bool = Field(True, description="reweight GIoU with the AGS map")
    ags_lambda: float = Field(AGS_LAMBDA, ge=0, le=1, description="AGS trade-off")
    min_box_weight: float = Field(0.3, ge=0, le=1, description="drop mixed boxes whose label weight is below this")


class OptimConfig(_Section):
    lr: float = Field(BASE_LR, gt=0, description="base learning rate")
    momentum: float = Field(MOMENTUM, ge=0, lt=1, description="SGD momentum")
    weight_decay: float = Field(WEIGHT_DECAY, ge=0, description="L2 weight decay")
    milestones: tuple[int, ...] | None = Field(
        None, description=f"lr drop iterations; default scales {MILESTONES} of {TOTAL_ITERS} to the run length"
    )
    gamma: float = Field(LR_GAMMA, gt=0, description="lr multiplier at each milestone")
    warmup_iters: int = Field(0, ge=0, description="linear warmup iterations")
    grad_clip: float | None = Field(None, gt=0, description="clip the global gradient norm")

    @field_validator("milestones")
    @classmethod
    def _ascending(cls, v):
        if v is not None and list(v) != sorted(v):
            raise ValueError("milestones must ascend")
        return v


class GridMaskConfig(_Section):
    unit_min: int = Field(16, ge=2, description="smallest grid period in pixels")
    unit_max: int = Field(48, ge=2, description="largest grid period in pixels")
    ratio: float = Field(0.5, gt=0, lt=1, description="visible fraction of each grid unit")
    apply_prob: float = Field(GRIDMASK_PROB, ge=0, le=1, description="probability of masking a sample")


class AugmentConfig(_Section):
    enabled: bool = Field(False, description="apply the augmentation pipeline during training")
    pipeline: tuple[Literal["expand", "crop", "mix", "gridmask"], ...] = Field(
        ("expand", "crop", "mix", "gridmask"), description="operation order"
    )
    mix: Literal["cutmix", "mixup", "none"] = Field("cutmix", description="mixing operation used by the 'mix' step")
    mix_prob: float = Field(0.5, ge=0, le=1, description="probability of mixing a sample")
    beta: float = Field(BETA_A, gt=0, description="mixing ratio ~ Beta(beta, beta)")
    expand_max_ratio: float = Field(2.0, ge=1, description="largest canvas scale for random expand")
    expand_prob: float = Field(0.5, ge=0, le=1, description="probability of expanding a sample")
    crop_min_iou: float = Field(0.3, ge=0, le=1, description="minimum kept fraction of a cropped box")
    crop_prob: float = Field(0.5, ge=0, le=1, description="probability of cropping a sample")
    gridmask: GridMaskConfig = GridMaskConfig()


class DecodeConfig(_Section):
    topk: int = Field(DEFAULT_TOPK, ge=1, description="detections kept per image")
    score_thresh: float = Field(DEFAULT_SCORE_THRESH, ge=0, le=1, description="minimum detection score")


class TrainConfig(_Section):
    iterations: int = Field(500, ge=1, description="training iterations")
    batch_size: int = Field(4, ge=2, description="images per iteration")
    ema_decay: float = Field(EMA_DECAY, ge=0, le=1, description="EMA decay per step")
    checkpoint_every: int = Field(100, ge=1, description="save a checkpoint every N iterations")
    precision: Literal["float32", "float64"] = Field("float32", description="training precision")


class RunConfig(_Section):
    seed: int = Field(0, description="global random seed")
    image_size: int = Field(128, ge=16, description="square training/eval image size (multiple of 16)")
    num_classes: int = Field(3, ge=1, description="number of classes C")
    out_dir: str = Field("runs/default", description="output directory")
    normalize_mean: tuple[float, float, float] = Field(IMAGENET_MEAN, description="per-channel mean")
    normalize_std: tuple[float, float, float] = Field(IMAGENET_STD, description="per-channel std")
    dataset: DatasetConfig = DatasetConfig()
    model: ModelConfig = ModelConfig()
    loss: LossConfig = LossConfig()
    optim: OptimConfig = OptimConfig()
    augment: AugmentConfig = AugmentConfig()
    decode: DecodeConfig = DecodeConfig()
    train: TrainConfig = TrainConfig()

    @field_validator("image_size")
    @classmethod
    def _multiple_of_16(cls, v):
        if v % 16:
            raise ValueError("image_size must be a multiple of 16")
        return v

    @field_validator("normalize_std")
    @classmethod
    def _positive_std(cls, v):
        if any(s <= 0 for s in v):
            raise ValueError("normalize_std components must be positive")
        return v

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.model_validate_json(text)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())

    def model_hash(self) -> str:
        """Hash of the settings that fix parameter shapes."""
        key = {"num_classes": self.num_classes, "model": self.model.model_dump(mode="json")}
        return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]

    def milestones(self) -> tuple[int, ...]:
        from .nn.optim import scaled_milestones

        if self.optim.milestones is not None:
            return tuple(self.optim.milestones)
        return scaled_milestones(self.train.iterations)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Apply dotted-key overrides (``{"optim.lr": 0.01}``) and revalidate."""
        data = self.model_dump(mode="json")
        for key, value in overrides.items():
            node = data
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ValueError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ValueError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return RunConfig.model_validate(data)


def iter_fields(model: type[BaseModel] = RunConfig, prefix: str = ""):
    """Yield ``(dotted key, default, description)`` for every leaf setting."""
    for name, f in model.model_fields.items():
        ann = f.annotation
        if isinstance(ann, type) and issubclass(ann, BaseModel):
            yield from iter_fields(ann, f"{prefix}{name}.")
        else:
            yield f"{prefix}{name}", f.default, f.description or ""
