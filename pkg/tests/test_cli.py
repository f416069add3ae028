import json
import subprocess
import sys

import numpy as np
import pytest

from afdet.cli import main
from afdet.data import DatasetIndex, ImageRecord, load_coco_subset, read_image, synth_dataset, write_coco, write_image
from afdet.geometry import iou

from conftest import SMALL_RUN


def _sets(overrides=SMALL_RUN):
    out = []
    for k, v in overrides.items():
        out += ["--set", f"{k}={json.dumps(v)}"]
    return out


def _run(capsys, *argv):
    rc = main([str(a) for a in argv])
    return rc, capsys.readouterr()


@pytest.fixture
def coco(tmp_path):
    """Three synthetic 64x64 images plus an empty one, written as a COCO subset."""
    samples = synth_dataset(3, 64, 3, seed=4, min_box=12, max_box=28)
    img_dir = tmp_path / "images"
    records = []
    for i, s in enumerate(samples):
        p = img_dir / f"im{i}.png"
        write_image(s.image, p)
        records.append(ImageRecord(i + 1, p.name, 64, 64, s.boxes, s.classes))
    p = img_dir / "empty.png"
    write_image(np.full((3, 64, 64), 0.5), p)
    records.append(ImageRecord(99, p.name, 64, 64))
    ann = tmp_path / "ann.json"
    write_coco(DatasetIndex(records, {1: 0, 2: 1, 3: 2}), ann)
    return ann, img_dir, samples


def test_encode_decode_round_trip(tmp_path, capsys, coco):
    ann, img_dir, samples = coco
    out = tmp_path / "enc"
    rc, cap = _run(capsys, "encode", "--annotations", ann, "--images", img_dir, "--out", out, "--viz")
    assert rc == 0
    files = json.loads(cap.out)["written"]
    assert len(files) == 4

    peak = read_image(out / "heatmap_000001_c0.png")
    empty = [read_image(out / f"heatmap_000099_c{c}.png") for c in range(3)]
    assert all(e.max() == 0 for e in empty)
    lit = [read_image(out / f"heatmap_000001_c{c}.png").max() for c in range(3)]
    assert max(lit) == pytest.approx(1.0)
    assert peak.ndim >= 2

    rc, cap = _run(capsys, "decode", *files)
    assert rc == 0
    dets = json.loads(cap.out)
    for i, s in enumerate(samples):
        mine = [d for d in dets if d["image_id"] == i + 1]
        assert len(mine) == len(s.boxes)
        for box, cls in zip(s.boxes, s.classes):
            best = max(mine, key=lambda d: iou(np.array(d["box_xyxy"]), box))
            assert iou(np.array(best["box_xyxy"]), box) >= 0.99
            assert best["category_id"] == int(cls) + 1
    assert not [d for d in dets if d["image_id"] == 99]


def test_augment_writes_loadable_coco(tmp_path, capsys, coco):
    ann, img_dir, _ = coco
    out = tmp_path / "aug"
    rc, _ = _run(capsys, "augment", "--annotations", ann, "--images", img_dir, "--out", out, "--op", "cutmix", "--lam", "0.6")
    assert rc == 0
    index = load_coco_subset(out / "annotations.json", out)
    assert len(index.records) == 4
    weights = json.loads((out / "box_weights.json").read_text())
    assert set(weights) == {"1", "2", "3", "99"}


def test_gridmask_zeroes_pixels(tmp_path, capsys, coco):
    ann, img_dir, _ = coco
    out = tmp_path / "gm"
    assert _run(capsys, "augment", "--annotations", ann, "--images", img_dir, "--out", out, "--op", "gridmask")[0] == 0
    img = read_image(out / "aug_000099.png")
    assert (img == 0).all(axis=0).any()


def test_cutmix_needs_two_images(tmp_path, capsys):
    img = tmp_path / "a.png"
    write_image(np.zeros((3, 32, 32)), img)
    ann = tmp_path / "ann.json"
    write_coco(DatasetIndex([ImageRecord(1, img.name, 32, 32)], {1: 0}), ann)
    rc, cap = _run(capsys, "augment", "--annotations", ann, "--images", tmp_path, "--out", tmp_path / "o", "--op", "cutmix")
    assert rc == 1
    assert "two" in cap.err


def test_train_eval_and_heatmaps(tmp_path, capsys):
    run = tmp_path / "run"
    rc, cap = _run(capsys, "train", "--out", run, *_sets())
    assert rc == 0 and json.loads(cap.out)["iterations"] == 4
    for ema in ([], ["--ema"]):
        rc, cap = _run(capsys, "eval", "--checkpoint", run / "last.afdt", *ema)
        assert rc == 0
        res = json.loads(cap.out)
        assert set(res["mAP_per_threshold"]) == {f"{0.5 + 0.05 * i:.2f}" for i in range(10)}
        assert 0.0 <= res["mAP"] <= res["mAP@0.5"] <= 1.0
    hm = tmp_path / "hm"
    rc, cap = _run(capsys, "dump-heatmap", "--checkpoint", run / "last.afdt", "--out", hm, "--viz")
    assert rc == 0
    assert (hm / "pred_000000_c0.png").exists() and (hm / "image_000000.png").exists()


def test_untrained_model_scores_near_zero(tmp_path, capsys):
    from afdet.config import RunConfig
    from afdet.train import Trainer

    cfg = RunConfig().with_overrides({"out_dir": str(tmp_path)})
    Trainer(cfg).save_checkpoint(tmp_path / "init.afdt")
    rc, cap = _run(capsys, "eval", "--checkpoint", tmp_path / "init.afdt")
    assert rc == 0
    assert json.loads(cap.out)["mAP"] < 0.05


def test_eval_shape_mismatch_is_runtime_error(tmp_path, capsys):
    run = tmp_path / "run"
    assert _run(capsys, "train", "--out", run, "--iterations", "2", *_sets())[0] == 0
    rc, cap = _run(capsys, "eval", "--checkpoint", run / "last.afdt", "--set", "model.head_width=12")
    assert rc == 2
    assert "checkpoint shape" in cap.err


def test_bench(capsys):
    rc, cap = _run(capsys, "bench", "--iters", "5", "--warmup", "1", *_sets())
    assert rc == 0
    rep = json.loads(cap.out)
    for stage in ("encode", "decode", "loss_fwd_bwd", "forward"):
        assert rep[stage]["iters"] == 5 and rep[stage]["median_ms"] > 0
    assert rep["decode"]["median_ms"] < 10


def test_flops(capsys):
    rc, cap = _run(capsys, "flops")
    assert rc == 0
    rep = json.loads(cap.out)
    assert rep["total"] == sum(r["macs"] for r in rep["layers"])
    assert rep["lite_vs_plain_ratio"] == pytest.approx((2 * 25 * 48 + 2 * 48**2) / (25 * 48**2), abs=1e-4)


def test_help_lists_config_keys(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--help"])
    assert e.value.code == 0
    text = capsys.readouterr().out
    for key in ("optim.lr", "loss.ags_lambda", "augment.gridmask.apply_prob", "train.ema_decay"):
        assert key in text


@pytest.mark.parametrize(
    "argv, code",
    [
        (["frobnicate"], 1),
        (["flops", "--set", "optim.nope=1"], 1),
        (["flops", "--set", "image_size=100"], 1),
        (["flops", "--set", "noequals"], 1),
        (["decode", "/nonexistent/file.afdt"], 2),
        (["eval", "--checkpoint", "/nonexistent/ckpt.afdt"], 2),
        (["encode", "--annotations", "/nonexistent/ann.json"], 2),
    ],
)
def test_exit_codes(argv, code, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    try:
        rc = main(argv)
    except SystemExit as e:
        rc = e.code
    assert rc == code


def test_corrupt_container_is_runtime_error(tmp_path, capsys):
    bad = tmp_path / "bad.afdt"
    bad.write_bytes(b"not a container at all")
    assert _run(capsys, "decode", bad)[0] == 2


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "afdet", "flops", "--size", "64"], capture_output=True, text=True,
                       stdin=subprocess.DEVNULL, cwd=tmp_path, timeout=120)
    assert r.returncode == 0
    assert json.loads(r.stdout)["input"] == [3, 64, 64]
