"""Toy-detector training, checkpointing and evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import codec
from .augment import TrainSample
from .config import RunConfig
from .data import GroundTruth, eval_map, load_coco_subset, normalize, read_image, resize_bilinear, synth_dataset
from .io import atomic_write_text, load_tensors, save_tensors
from .losses import AgsConfig, ags_cell_map, focal_loss, regression_loss, total_loss, PRED_EPS
from .nn import EmaState, ToyDetector, ema_update, lr_schedule, sgd_step
from .pipeline import apply_pipeline

log = logging.getLogger(__name__)

METRICS_SCHEMA = 1
CHECKPOINT_KIND = "afdet-checkpoint"


class CheckpointMismatch(ValueError):
    pass


@dataclass
class Dataset:
    samples: list[TrainSample]
    image_ids: list[int]
    crowd: list[tuple[np.ndarray, np.ndarray]]

    def ground_truth(self) -> list[GroundTruth]:
        return [GroundTruth(s.boxes, s.classes, cb, cc) for s, (cb, cc) in zip(self.samples, self.crowd)]


def load_dataset(cfg: RunConfig) -> Dataset:
    """Training/eval images at ``cfg.image_size``."""
    size = cfg.image_size
    if cfg.dataset.source == "synth":
        s = cfg.dataset.synth
        samples = synth_dataset(s.n_images, size, cfg.num_classes, cfg.seed, min_box=s.min_box, max_box=s.max_box,
                                max_objects=s.max_objects)
        empty = (np.zeros((0, 4)), np.zeros(0, dtype=np.int64))
        return Dataset(samples, list(range(len(samples))), [empty] * len(samples))
    index = load_coco_subset(cfg.dataset.annotations, cfg.dataset.images)
    if index.num_classes > cfg.num_classes:
        raise ValueError(f"dataset has {index.num_classes} categories but num_classes is {cfg.num_classes}")
    samples, ids, crowd = [], [], []
    for r in index.records:
        sample = resize_bilinear(TrainSample(read_image(r.path), r.boxes, r.classes), size, size)
        samples.append(sample)
        ids.append(r.image_id)
        sy, sx = size / r.height, size / r.width
        crowd.append((r.crowd_boxes * np.array([sx, sy, sx, sy]), r.crowd_classes))
    return Dataset(samples, ids, crowd)


def build_model(cfg: RunConfig) -> ToyDetector:
    dtype = np.float32 if cfg.train.precision == "float32" else np.float64
    return ToyDetector(
        cfg.num_classes,
        head_width=cfg.model.head_width,
        channels=cfg.model.backbone_channels,
        head_type=cfg.model.head_type,
        seed=cfg.seed,
        dtype=dtype,
    )


def prepare_batch(samples: list[TrainSample], cfg: RunConfig, dtype) -> np.ndarray:
    imgs = [normalize(s.image, cfg.normalize_mean, cfg.normalize_std) for s in samples]
    return np.stack(imgs).astype(dtype)


def detector_loss(out, targets: list[codec.EncodedTargets], cfg: RunConfig):
    """Batch-mean losses and their gradients w.r.t. logits and side distances."""
    n = len(targets)
    ags_cfg = AgsConfig(cfg.loss.ags_lambda, cfg.loss.ags_enabled)
    g_logits = np.zeros(out.loc_logits.shape, dtype=np.float64)
    g_reg = np.zeros(out.reg.shape, dtype=np.float64)
    loc_sum = reg_sum = 0.0
    for i, t in enumerate(targets):
        p_raw = out.heatmap[i].astype(np.float64)
        p = np.clip(p_raw, PRED_EPS, 1 - PRED_EPS)
        loc, dp = focal_loss(p, t.class_heatmap)
        inside = (p_raw > PRED_EPS) & (p_raw < 1 - PRED_EPS)
        g_logits[i] = dp * p * (1 - p) * inside / n
        ags = ags_cell_map(out.loc_logits[i].astype(np.float64), t) if ags_cfg.enabled else None
        reg, dreg = regression_loss(out.reg[i].astype(np.float64), t, ags, ags_cfg)
        g_reg[i] = dreg / n
        loc_sum += loc
        reg_sum += reg
    breakdown = total_loss(loc_sum / n, reg_sum / n, cfg.loss.w_loc, cfg.loss.w_reg)
    return breakdown, g_logits * cfg.loss.w_loc, g_reg * cfg.loss.w_reg


def encode_sample(s: TrainSample, cfg: RunConfig) -> codec.EncodedTargets:
    keep = s.box_weights >= cfg.loss.min_box_weight
    keep &= (s.boxes[:, 2] > s.boxes[:, 0]) & (s.boxes[:, 3] > s.boxes[:, 1])
    gts = list(zip(s.boxes[keep], s.classes[keep]))
    return codec.encode(gts, s.height, s.width, cfg.num_classes, cfg.loss.alpha)


class Trainer:
    def __init__(self, cfg: RunConfig, out_dir: str | Path | None = None):
        self.cfg = cfg
        self.out_dir = Path(out_dir if out_dir is not None else cfg.out_dir)
        self.data = load_dataset(cfg)
        self.model = build_model(cfg)
        self.dtype = self.model.dtype
        self.params = dict(self.model.named_params())
        self.grads = dict(self.model.named_grads())
        self.buffers = dict(self.model.named_buffers())
        self.velocity = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.ema = EmaState.from_params(self.params, cfg.train.ema_decay)
        self.iteration = 0
        self.milestones = cfg.milestones()
        self._target_cache: dict[int, codec.EncodedTargets] = {}

    # -- state -----------------------------------------------------------
    def state_sections(self) -> dict:
        return {"params": self.params, "buffers": self.buffers, "velocity": self.velocity, "ema": self.ema.shadow}

    def save_checkpoint(self, path) -> None:
        meta = {
            "kind": CHECKPOINT_KIND,
            "iteration": self.iteration,
            "config_hash": self.cfg.model_hash(),
            "config": self.cfg.model_dump(mode="json"),
        }
        save_tensors(path, self.state_sections(), meta)

    def load_checkpoint(self, path) -> None:
        sections, meta = load_tensors(path)
        restore_state(self.model, sections, meta, self.cfg)
        for name in self.velocity:
            self.velocity[name][...] = sections["velocity"][name]
        for name in self.ema.shadow:
            self.ema.shadow[name][...] = sections["ema"][name]
        self.iteration = int(meta["iteration"])

    # -- training ----------------------------------------------------------
    def lr_at(self, it: int) -> float:
        o = self.cfg.optim
        lr = lr_schedule(it, o.lr, self.milestones, o.gamma)
        if o.warmup_iters and it < o.warmup_iters:
            lr *= (it + 1) / o.warmup_iters
        return lr

    def _batch(self, it: int) -> list[TrainSample]:
        cfg = self.cfg
        n = len(self.data.samples)
        rng = np.random.default_rng([cfg.seed, it])
        bs = cfg.train.batch_size
        idx = rng.permutation(n)[:bs] if n >= bs else rng.choice(n, bs, replace=True)
        batch = []
        for k, i in enumerate(idx):
            s = self.data.samples[int(i)]
            if cfg.augment.enabled:
                srng = np.random.default_rng([cfg.seed, it, k])
                partner = self.data.samples[int(srng.integers(n))]
                s = apply_pipeline(s, partner, cfg.augment, srng, cfg.image_size)
            batch.append((int(i), s))
        return batch

    def _targets(self, batch) -> list[codec.EncodedTargets]:
        out = []
        for i, s in batch:
            if self.cfg.augment.enabled:
                out.append(encode_sample(s, self.cfg))
            else:
                if i not in self._target_cache:
                    self._target_cache[i] = encode_sample(s, self.cfg)
                out.append(self._target_cache[i])
        return out

    def step(self) -> dict:
        it = self.iteration
        batch = self._batch(it)
        targets = self._targets(batch)
        x = prepare_batch([s for _, s in batch], self.cfg, self.dtype)
        self.model.zero_grad()
        out = self.model.forward(x, training=True)
        breakdown, g_logits, g_reg = detector_loss(out, targets, self.cfg)
        self.model.backward(g_logits, g_reg, out)
        if self.cfg.optim.grad_clip:
            norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in self.grads.values())))
            if norm > self.cfg.optim.grad_clip:
                scale = self.cfg.optim.grad_clip / norm
                for g in self.grads.values():
                    g *= scale
        lr = self.lr_at(it)
        o = self.cfg.optim
        sgd_step(self.params, self.grads, self.velocity, lr, o.momentum, o.weight_decay)
        ema_update(self.ema, self.params)
        self.iteration += 1
        return {"schema": METRICS_SCHEMA, "iter": self.iteration, "lr": lr, **breakdown.as_dict()}

    def run(self, iterations: int | None = None, resume: str | Path | None = None) -> list[dict]:
        """Train until ``iterations`` (default from config); returns this call's metrics."""
        total = iterations if iterations is not None else self.cfg.train.iterations
        metrics_path = self.out_dir / "metrics.jsonl"
        self.out_dir.mkdir(parents=True, exist_ok=True)
        lines: list[str] = []
        if resume is not None:
            self.load_checkpoint(resume)
            if metrics_path.exists():
                for line in metrics_path.read_text().splitlines():
                    if line and json.loads(line)["iter"] <= self.iteration:
                        lines.append(line)
        atomic_write_text(self.out_dir / "config.json", self.cfg.to_json())
        records = []
        every = self.cfg.train.checkpoint_every
        with open(metrics_path, "w") as f:
            for line in lines:
                f.write(line + "\n")
            while self.iteration < total:
                rec = self.step()
                records.append(rec)
                f.write(json.dumps(rec, sort_keys=True) + "\n")
                f.flush()
                if self.iteration % 50 == 0 or self.iteration == 1:
                    log.info("iter %d loss %.4f (loc %.4f reg %.4f)", rec["iter"], rec["total"], rec["loc"], rec["reg"])
                if self.iteration % every == 0 or self.iteration == total:
                    self.save_checkpoint(self.out_dir / f"ckpt_{self.iteration:06d}.afdt")
                    self.save_checkpoint(self.out_dir / "last.afdt")
        return records


def restore_state(model: ToyDetector, sections: dict, meta: dict, cfg: RunConfig, ema: bool = False) -> None:
    """Load parameters (or EMA shadows when ``ema``) and buffers into ``model``.

    Raises:
        CheckpointMismatch: naming the first tensor whose shape disagrees.
    """
    if meta.get("kind") != CHECKPOINT_KIND:
        raise CheckpointMismatch("file is not a detector checkpoint")
    source = sections["ema" if ema else "params"]
    for group, target in (("params", dict(model.named_params())), ("buffers", dict(model.named_buffers()))):
        src = source if group == "params" else sections["buffers"]
        for name, arr in target.items():
            if name not in src:
                raise CheckpointMismatch(f"checkpoint lacks tensor {name}")
            if src[name].shape != arr.shape:
                raise CheckpointMismatch(f"tensor {name}: checkpoint shape {src[name].shape} != model shape {arr.shape}")
            arr[...] = src[name]


def load_model(cfg: RunConfig, checkpoint, ema: bool = False) -> ToyDetector:
    model = build_model(cfg)
    sections, meta = load_tensors(checkpoint)
    restore_state(model, sections, meta, cfg, ema)
    return model


def predict(model: ToyDetector, samples: list[TrainSample], cfg: RunConfig, batch_size: int = 8):
    """Eval-mode forward pass and decode; one detection list per sample."""
    results = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        out = model.forward(prepare_batch(chunk, cfg, model.dtype), training=False)
        for i, s in enumerate(chunk):
            results.append(
                codec.decode(out.heatmap[i], out.reg[i], cfg.decode.topk, cfg.decode.score_thresh, s.height, s.width)
            )
    return results


def evaluate(model: ToyDetector, data: Dataset, cfg: RunConfig):
    return eval_map(predict(model, data.samples, cfg), data.ground_truth())
