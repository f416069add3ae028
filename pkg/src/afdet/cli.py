"""``afdet`` command line: encode, decode, augment, train, eval, bench, flops, dump-heatmap.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import augment as A
from . import codec
from .config import RunConfig, iter_fields
from .data import (
    DatasetIndex,
    ImageFormatError,
    ImageRecord,
    load_coco_subset,
    read_image,
    synth_dataset,
    write_coco,
    write_image,
)
from .data.coco import DatasetError
from .io import ContainerError, atomic_write_text, load_tensors, save_tensors

log = logging.getLogger("afdet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
TARGET_KIND = "afdet-targets"


class UsageError(Exception):
    """Bad arguments or configuration (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config_help() -> str:
    lines = ["configuration keys (override with --set KEY=VALUE):"]
    for key, default, desc in iter_fields():
        if isinstance(default, tuple):
            default = list(default)
        lines.append(f"  {key} = {json.dumps(default)}  {desc}")
    return "\n".join(lines)


# -- configuration ------------------------------------------------------------


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args, base: RunConfig | None = None) -> RunConfig:
    try:
        cfg = RunConfig.load(args.config) if args.config else (base or RunConfig())
        overrides = {}
        for item in args.set or []:
            key, sep, value = item.partition("=")
            if not sep:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            overrides[key.strip()] = _parse_value(value)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if getattr(args, "out", None):
            overrides["out_dir"] = args.out
        return cfg.with_overrides(overrides) if overrides else cfg
    except (ValidationError, ValueError) as e:
        raise UsageError(f"invalid configuration: {e}") from e
    except OSError as e:
        raise UsageError(f"cannot read config: {e}") from e


def _input_samples(cfg: RunConfig, args) -> tuple[list[int], list[A.TrainSample], dict[int, int]]:
    """Images at native resolution from ``--annotations`` or the configured dataset.

    Returns image ids, samples and a class -> category id map.
    """
    ann = getattr(args, "annotations", None)
    if ann is None and cfg.dataset.source == "coco":
        ann = cfg.dataset.annotations
    if ann is not None:
        images = getattr(args, "images", None) or cfg.dataset.images
        index = load_coco_subset(ann, images)
        samples = [A.TrainSample(read_image(r.path), r.boxes, r.classes) for r in index.records]
        return [r.image_id for r in index.records], samples, index.class_to_category()
    s = cfg.dataset.synth
    samples = synth_dataset(s.n_images, cfg.image_size, cfg.num_classes, cfg.seed, min_box=s.min_box,
                            max_box=s.max_box, max_objects=s.max_objects)
    return list(range(len(samples))), samples, {c: c + 1 for c in range(cfg.num_classes)}


def _heatmap_pngs(heat: np.ndarray, out: Path, stem: str) -> list[str]:
    paths = []
    for c in range(heat.shape[0]):
        p = out / f"{stem}_c{c}.png"
        write_image(np.clip(heat[c], 0.0, 1.0), p)
        paths.append(str(p))
    return paths


def _out_dir(cfg: RunConfig, args) -> Path:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands -------------------------------------------------------------------


def cmd_encode(args) -> int:
    cfg = load_config(args)
    ids, samples, cat_of = _input_samples(cfg, args)
    out = _out_dir(cfg, args)
    written = []
    for image_id, s in zip(ids, samples):
        t = codec.encode(list(zip(s.boxes, s.classes)), s.height, s.width, cfg.num_classes, cfg.loss.alpha)
        sections = {
            "targets": {
                "class_heatmap": t.class_heatmap,
                "reg_target": t.reg_target,
                "weight_map": t.weight_map,
                "object_id": t.object_id,
                "boxes": np.asarray(t.boxes, dtype=np.float64).reshape(-1, 4),
                "classes": np.asarray(t.classes, dtype=np.int64),
            }
        }
        meta = {"kind": TARGET_KIND, "image_id": image_id, "height": s.height, "width": s.width,
                "alpha": cfg.loss.alpha, "starved": list(t.starved), "category_of_class": cat_of}
        path = out / f"targets_{image_id:06d}.afdt"
        save_tensors(path, sections, meta)
        written.append(str(path))
        if args.viz:
            _heatmap_pngs(t.class_heatmap, out, f"heatmap_{image_id:06d}")
    print(json.dumps({"written": written}))
    return EXIT_OK


def _read_targets(path):
    sections, meta = load_tensors(path)
    if meta.get("kind") != TARGET_KIND:
        raise UsageError(f"{path} is not an encoded-targets file")
    return sections["targets"], meta


def cmd_decode(args) -> int:
    cfg = load_config(args)
    results = []
    for path in args.inputs:
        t, meta = _read_targets(path)
        dets = codec.decode(t["class_heatmap"], t["reg_target"], cfg.decode.topk, cfg.decode.score_thresh,
                            meta["height"], meta["width"])
        cat_of = {int(k): v for k, v in meta.get("category_of_class", {}).items()}
        for d in dets:
            x0, y0, x1, y1 = d.box
            results.append({
                "image_id": meta["image_id"],
                "category_id": cat_of.get(d.class_id, d.class_id),
                "class": d.class_id,
                "bbox": [x0, y0, x1 - x0, y1 - y0],
                "box_xyxy": [x0, y0, x1, y1],
                "score": d.score,
            })
    text = json.dumps(results, indent=1)
    if args.out:
        atomic_write_text(Path(args.out), text)
    else:
        print(text)
    return EXIT_OK


def cmd_augment(args) -> int:
    cfg = load_config(args)
    ids, samples, cat_of = _input_samples(cfg, args)
    op = args.op
    if op in ("cutmix", "mixup") and len(samples) < 2:
        raise UsageError(f"{op} needs at least two input images")
    out = _out_dir(cfg, args)
    rng = np.random.default_rng([cfg.seed, 0xA06])
    size = cfg.image_size
    results = []
    for k, s in enumerate(samples):
        partner = samples[(k + 1) % len(samples)] if len(samples) > 1 else None
        if op in ("cutmix", "mixup") and partner.image.shape != s.image.shape:
            from .data import resize_bilinear

            partner = resize_bilinear(partner, s.height, s.width)
        lam = args.lam if args.lam is not None else A.sample_lambda(rng, cfg.augment.beta)
        if op == "cutmix":
            r = A.cutmix(s, partner, lam, rng)
        elif op == "mixup":
            r = A.mixup(s, partner, lam)
        elif op == "gridmask":
            g = cfg.augment.gridmask
            p = A.sample_gridmask_params(rng, s.height, s.width, (g.unit_min, g.unit_max), g.ratio, apply_prob=1.0)
            r = A.gridmask(s, p, rng)
        elif op == "expand":
            r = A.random_expand(s, cfg.augment.expand_max_ratio, rng=rng)
        elif op == "crop":
            r = A.random_crop(s, cfg.augment.crop_min_iou, rng=rng)
        else:
            from .pipeline import apply_pipeline

            r = apply_pipeline(s, partner, cfg.augment.model_copy(update={"enabled": True}), rng, size)
        results.append(r)

    records = []
    for image_id, r in zip(ids, results):
        path = out / f"aug_{image_id:06d}.png"
        write_image(r.image, path)
        records.append(ImageRecord(image_id, str(path), r.height, r.width, r.boxes.reshape(-1, 4),
                                   np.asarray(r.classes, dtype=np.int64)))
    index = DatasetIndex(records, {cat: c for c, cat in cat_of.items()})
    write_coco(index, out / "annotations.json", image_root=out)
    weights = {str(i): [float(w) for w in r.box_weights] for i, r in zip(ids, results)}
    atomic_write_text(out / "box_weights.json", json.dumps(weights, indent=1))
    print(json.dumps({"images": [rec.path for rec in records], "annotations": str(out / "annotations.json")}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import Trainer

    cfg = load_config(args)
    trainer = Trainer(cfg, cfg.out_dir)
    records = trainer.run(args.iterations, resume=args.resume)
    last = records[-1] if records else {}
    print(json.dumps({"iterations": trainer.iteration, "final": last, "out_dir": cfg.out_dir}))
    return EXIT_OK


def _config_for_checkpoint(args) -> RunConfig:
    base = None
    if not args.config:
        try:
            _, meta = load_tensors(args.checkpoint)
            base = RunConfig.model_validate(meta["config"]) if "config" in meta else None
        except (ContainerError, ValidationError, KeyError):
            base = None
    return load_config(args, base)


def _dataset_for(cfg: RunConfig, args):
    from .train import load_dataset

    if getattr(args, "annotations", None):
        over = {"dataset.source": "coco", "dataset.annotations": args.annotations}
        if args.images:
            over["dataset.images"] = args.images
        cfg = cfg.with_overrides(over)
    return load_dataset(cfg)


def cmd_eval(args) -> int:
    from .train import evaluate, load_model

    cfg = _config_for_checkpoint(args)
    model = load_model(cfg, args.checkpoint, ema=args.ema)
    result = evaluate(model, _dataset_for(cfg, args), cfg).as_dict()
    text = json.dumps(result, indent=1, sort_keys=True)
    if args.out:
        atomic_write_text(Path(args.out), text)
    print(text)
    return EXIT_OK


def _timeit(fn, iters: int, warmup: int) -> dict:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    ms = np.array(times) * 1e3
    return {"median_ms": float(np.median(ms)), "p95_ms": float(np.percentile(ms, 95)), "iters": iters}


def cmd_bench(args) -> int:
    from .train import build_model, detector_loss, prepare_batch

    cfg = load_config(args)
    if args.iters < 1:
        raise UsageError("--iters must be positive")
    rng = np.random.default_rng(cfg.seed)
    samples = synth_dataset(cfg.train.batch_size, cfg.image_size, cfg.num_classes, cfg.seed)
    gts = list(zip(samples[0].boxes, samples[0].classes))
    size = cfg.image_size

    heat = rng.random((80, 32, 32)) ** 8
    reg = rng.uniform(1, 30, (4, 32, 32))
    model = build_model(cfg)
    x = prepare_batch(samples, cfg, model.dtype)
    targets = [codec.encode(list(zip(s.boxes, s.classes)), size, size, cfg.num_classes, cfg.loss.alpha) for s in samples]
    out = model.forward(x, training=True)

    def loss_step():
        _, gl, gr = detector_loss(out, targets, cfg)
        return gl, gr

    report = {
        "encode": _timeit(lambda: codec.encode(gts, size, size, cfg.num_classes, cfg.loss.alpha), args.iters, args.warmup),
        "decode": _timeit(lambda: codec.decode(heat, reg, 100, cfg.decode.score_thresh), args.iters, args.warmup),
        "loss_fwd_bwd": _timeit(loss_step, args.iters, args.warmup),
        "forward": _timeit(lambda: model.forward(x, training=False), args.iters, args.warmup),
    }
    report["settings"] = {"batch_size": cfg.train.batch_size, "image_size": size, "decode_heatmap": [80, 32, 32]}
    text = json.dumps(report, indent=1)
    if args.out:
        atomic_write_text(Path(args.out), text)
    print(text)
    return EXIT_OK


def cmd_flops(args) -> int:
    from .nn import flops_count, lite_vs_plain_ratio
    from .train import build_model

    cfg = load_config(args)
    size = args.size or cfg.image_size
    if size % 16:
        raise UsageError("--size must be a multiple of 16")
    rows, _ = build_model(cfg).describe((3, size, size))
    report = flops_count(rows)
    report["input"] = [3, size, size]
    report["lite_vs_plain_ratio"] = lite_vs_plain_ratio(cfg.model.head_width, size // 4)
    text = json.dumps(report, indent=1)
    if args.out:
        atomic_write_text(Path(args.out), text)
    print(text)
    return EXIT_OK


def cmd_dump_heatmap(args) -> int:
    from .train import build_model, load_model, prepare_batch

    if args.targets:
        cfg = load_config(args)
        out = _out_dir(cfg, args)
        written = []
        for path in args.targets:
            t, meta = _read_targets(path)
            written += _heatmap_pngs(t["class_heatmap"], out, f"heatmap_{meta['image_id']:06d}")
        print(json.dumps({"written": written}))
        return EXIT_OK

    cfg = _config_for_checkpoint(args) if args.checkpoint else load_config(args)
    model = load_model(cfg, args.checkpoint, ema=args.ema) if args.checkpoint else build_model(cfg)
    data = _dataset_for(cfg, args)
    out = _out_dir(cfg, args)
    written = []
    for image_id, s in zip(data.image_ids, data.samples):
        pred = model.forward(prepare_batch([s], cfg, model.dtype), training=False)
        written += _heatmap_pngs(pred.heatmap[0], out, f"pred_{image_id:06d}")
        if args.viz:
            p = out / f"image_{image_id:06d}.png"
            write_image(s.image, p)
            written.append(str(p))
    print(json.dumps({"written": written}))
    return EXIT_OK


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (or file for decode/eval/bench/flops)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    data = _Parser(add_help=False)
    data.add_argument("--annotations", help="COCO-format annotation JSON (default: configured dataset)")
    data.add_argument("--images", help="image directory for --annotations")

    parser = _Parser(prog="afdet", description=__doc__, epilog=_config_help(), formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, parents=(common,)):
        p = sub.add_parser(name, parents=list(parents), help=help_, epilog=_config_help(), formatter_class=fmt)
        p.set_defaults(func=fn)
        return p

    p = add("encode", cmd_encode, "write training targets for each image", (common, data))
    p.add_argument("--viz", action="store_true", help="also write per-class heatmap PNGs")

    p = add("decode", cmd_decode, "decode target files into detections JSON")
    p.add_argument("inputs", nargs="+", help="files written by encode")

    p = add("augment", cmd_augment, "write augmented images and annotations", (common, data))
    p.add_argument("--op", choices=["pipeline", "cutmix", "mixup", "gridmask", "expand", "crop"], default="pipeline")
    p.add_argument("--lam", type=float, help="fixed mixing ratio (default: drawn from Beta)")

    p = add("train", cmd_train, "train the toy detector")
    p.add_argument("--iterations", type=int, help="train until this iteration (default: train.iterations)")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = add("eval", cmd_eval, "evaluate a checkpoint and print mAP JSON", (common, data))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ema", action="store_true", help="use EMA shadow weights")

    p = add("bench", cmd_bench, "time encode, decode, loss and forward")
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--warmup", type=int, default=5)

    p = add("flops", cmd_flops, "per-layer multiply-accumulate counts")
    p.add_argument("--size", type=int, help="square input size (default: image_size)")

    p = add("dump-heatmap", cmd_dump_heatmap, "render predicted or encoded heatmaps as PNG", (common, data))
    p.add_argument("--checkpoint", help="model checkpoint (default: untrained model)")
    p.add_argument("--targets", nargs="+", help="render these encoded-target files instead")
    p.add_argument("--ema", action="store_true", help="use EMA shadow weights")
    p.add_argument("--viz", action="store_true", help="also write the input images")
    return parser


def _thread_limit():
    from threadpoolctl import threadpool_limits

    raw = os.environ.get("AFDET_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"AFDET_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise UsageError("AFDET_THREADS must be at least 1")
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as e:
        print(f"afdet: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, ContainerError, ImageFormatError, ValueError, OSError) as e:
        print(f"afdet: {args.command} failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
