"""Config-driven augmentation pipeline: expand -> crop -> cutmix/mixup -> gridmask."""

from __future__ import annotations

import numpy as np

from . import augment as A
from .config import AugmentConfig
from .data.transforms import resize_bilinear


def _fit(sample: A.TrainSample, size: int) -> A.TrainSample:
    if sample.height == size and sample.width == size:
        return sample
    return resize_bilinear(sample, size, size)


def _geometric(sample: A.TrainSample, cfg: AugmentConfig, rng: np.random.Generator, size: int) -> A.TrainSample:
    for op in cfg.pipeline:
        if op == "expand" and rng.random() < cfg.expand_prob:
            sample = A.random_expand(sample, cfg.expand_max_ratio, rng=rng)
        elif op == "crop" and rng.random() < cfg.crop_prob:
            sample = A.random_crop(sample, cfg.crop_min_iou, rng=rng)
    return _fit(sample, size)


def apply_pipeline(
    sample: A.TrainSample,
    partner: A.TrainSample | None,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    size: int,
) -> A.TrainSample:
    """Augment ``sample`` (optionally mixing with ``partner``) and return it at ``size x size``."""
    out = _geometric(sample, cfg, rng, size)
    if "mix" in cfg.pipeline and partner is not None and cfg.mix != "none" and rng.random() < cfg.mix_prob:
        other = _geometric(partner, cfg, rng, size)
        lam = A.sample_lambda(rng, cfg.beta)
        out = A.cutmix(out, other, lam, rng) if cfg.mix == "cutmix" else A.mixup(out, other, lam)
    if "gridmask" in cfg.pipeline:
        g = cfg.gridmask
        params = A.sample_gridmask_params(rng, size, size, (g.unit_min, g.unit_max), g.ratio, g.apply_prob)
        out = A.gridmask(out, params, rng)
    return out
