"""Acceptance criteria for the numeric core, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
The toy overfit criterion trains for a few minutes on one core.
"""

import json
import shutil
import time
from contextlib import contextmanager

import numpy as np
import pytest

from afdet import augment as A
from afdet import losses
from afdet.augment import TrainSample
from afdet.cli import main
from afdet.codec import Detection, decode, encode, gaussian_kernel, GaussianSpec
from afdet.config import RunConfig
from afdet.data import GroundTruth, eval_map
from afdet.geometry import BBox, giou, giou_grad, iou
from afdet.losses import AgsConfig, ags_cell_map, ags_map, focal_loss, regression_loss, softmax_map
from afdet.nn import EmaState, LiteBlock, ToyDetector, VdDownsample, ema_update, flops_count, lite_vs_plain_ratio
from afdet.nn.gradcheck import grad_check, numeric_grad, relative_error
from afdet.nn.optim import LR_GAMMA, MILESTONES, lr_schedule

from conftest import ACCEPTANCE, SMALL_RUN, random_box
from nn_helpers import bn_check, conv_check, layer_input_check, upsample_check
from test_codec import random_scene
from test_data import random_eval_case
from test_geometry import raster_iou
from test_losses import noisy_pred, two_object_targets

SEEDS = range(20)


@contextmanager
def criterion(name):
    info = {}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException as e:
        ACCEPTANCE.append((name, False, f"{type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''}"))
        raise
    info.setdefault("time", f"{time.perf_counter() - t0:.2f}s")
    ACCEPTANCE.append((name, True, ", ".join(f"{k}={v}" for k, v in info.items())))


def test_constant_fidelity():
    with criterion("constant fidelity") as info:
        c = RunConfig()
        assert c.loss.w_loc == 1.0 and c.loss.w_reg == 5.0
        assert losses.W_LOC == 1.0 and losses.W_REG == 5.0
        assert c.optim.momentum == 0.9
        assert c.optim.weight_decay == 0.0004
        assert c.optim.lr == 0.015 and c.optim.gamma == LR_GAMMA == 0.1
        assert lr_schedule(MILESTONES[0] - 1) == 0.015
        assert lr_schedule(MILESTONES[0]) == 0.015 * 0.1
        assert MILESTONES[0] == 11250
        assert c.model.lite_kernels == (5, 1, 1, 5)
        kernels = [layer.conv.params["weight"].shape[-1] for layer in LiteBlock(4, 4).layers]
        assert kernels == [5, 1, 1, 5]
        assert c.model.head_width == 48
        assert ToyDetector(3).describe((3, 64, 64))[0][-1].out_shape[0] == 4
        info["checked"] = "w_loc w_reg momentum wd lr kernels head_width"


def _giou_formula(a, b):
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    hull = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter / union - (hull - union) / hull


def test_giou_oracle_equivalence():
    with criterion("GIoU oracle equivalence") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(1000):
            a, b = (np.r_[np.sort(rng.choice(65, 2, replace=False)), np.sort(rng.choice(65, 2, replace=False))][[0, 2, 1, 3]]
                    for _ in range(2))
            assert iou(a.astype(float), b.astype(float)) == raster_iou(a, b)
            worst = max(worst, abs(giou(a.astype(float), b.astype(float)) - _giou_formula(a.astype(float), b.astype(float))))
        elapsed = time.perf_counter() - t0
        assert worst <= 1e-9
        assert elapsed < 2.0
        info.update(pairs=1000, max_giou_diff=f"{worst:.1e}", time=f"{elapsed:.2f}s")


def _giou_grad_err(seed):
    rng = np.random.default_rng(seed)
    while True:
        p, g = random_box(rng, min_side=4), random_box(rng, min_side=4)
        gaps = (np.abs(np.subtract.outer(p[[0, 2]], g[[0, 2]])).min(), np.abs(np.subtract.outer(p[[1, 3]], g[[1, 3]])).min())
        if min(gaps) > 1e-3:
            break
    return relative_error(giou_grad(p, g), numeric_grad(lambda z: giou(z, g), p))


def _focal_err(seed):
    r = np.random.default_rng(seed)
    target = r.random((2, 8, 8)) ** 3
    target[0, 3, 4] = target[1, 6, 1] = 1.0
    return grad_check(lambda p: focal_loss(p, target), r.uniform(0.05, 0.95, (2, 8, 8)))


def _regression_err(seed, enabled):
    t = two_object_targets()
    r = np.random.default_rng(seed)
    pred = noisy_pred(t, r)
    ags = ags_cell_map(r.normal(size=(2, 16, 16)), t) if enabled else None
    coords = np.flatnonzero(np.broadcast_to(t.object_id >= 0, (4, 16, 16)))
    return grad_check(lambda p: regression_loss(p, t, ags, AgsConfig(0.5, enabled)), pred, coords=coords)


def _block_err(cls, seed):
    rng = np.random.default_rng(seed)
    blk = cls(3, 4, rng=rng, dtype=np.float64)
    return layer_input_check(blk, rng.normal(size=(2, 3, 6, 6)), seed)


def test_gradient_suite():
    checks = {
        "giou_grad": _giou_grad_err,
        "focal_loss": _focal_err,
        "regression_ags_off": lambda s: _regression_err(s, False),
        "regression_ags_on": lambda s: _regression_err(s, True),
        "conv2d": lambda s: conv_check(s, ("full", "depthwise", "grouped")[s % 3], 1 + s % 2, (1, 3, 5)[s % 3]),
        "batchnorm": bn_check,
        "upsample": upsample_check,
        "lite_block": lambda s: _block_err(LiteBlock, s),
        "vd_block": lambda s: _block_err(VdDownsample, s),
    }
    with criterion("gradient suite") as info:
        t0 = time.perf_counter()
        worst = {name: max(fn(s) for s in SEEDS) for name, fn in checks.items()}
        elapsed = time.perf_counter() - t0
        bad = {k: v for k, v in worst.items() if not v < 1e-5}
        assert not bad, f"relative error too large: {bad}"
        assert elapsed < 60.0, f"took {elapsed:.1f}s"
        info.update(seeds=len(SEEDS), max_rel_err=f"{max(worst.values()):.1e}", time=f"{elapsed:.1f}s")


def test_ags_reductions():
    with criterion("AGS reweighting reductions") as info:
        t = two_object_targets()
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            pred = noisy_pred(t, rng)
            ags = ags_cell_map(rng.normal(size=(2, 16, 16)), t)
            off = regression_loss(pred, t, None, AgsConfig(0.5, enabled=False))
            zero = regression_loss(pred, t, ags, AgsConfig(0.0, enabled=True))
            assert off[0] == zero[0]
            np.testing.assert_array_equal(off[1], zero[1])

            # one owned cell with s = 0 under lambda = 1 stops responding to its prediction
            rows, cols = np.nonzero(t.object_id >= 0)
            k = int(rng.integers(len(rows)))
            r, c = rows[k], cols[k]
            ags[r, c] = 0.0
            cfg = AgsConfig(1.0)
            base, grad = regression_loss(pred, t, ags, cfg)
            assert not grad[:, r, c].any()
            moved = pred.copy()
            moved[:, r, c] = rng.uniform(0.5, 40, 4)
            assert regression_loss(moved, t, ags, cfg)[0] == base
        info["seeds"] = len(SEEDS)


def test_encode_decode_round_trip():
    with criterion("encode/decode round trip") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(99)
        n_boxes = recovered = 0
        for _ in range(200):
            gts = random_scene(rng, n=int(rng.integers(1, 5)), min_sep_cells=2)
            t = encode(gts, 128, 128, 3)
            dets = decode(t.class_heatmap, t.reg_target, H=128, W=128)
            for box, cls in gts:
                n_boxes += 1
                best = max(dets, key=lambda d: iou(d.box, box))
                if iou(best.box, box) >= 0.99 and best.class_id == cls:
                    recovered += 1
        elapsed = time.perf_counter() - t0
        assert recovered == n_boxes, f"{recovered}/{n_boxes} recovered"
        assert elapsed < 10.0
        info.update(images=200, boxes=f"{recovered}/{n_boxes}", time=f"{elapsed:.2f}s")


def test_toy_overfit(tmp_path, capsys):
    with criterion("toy overfit") as info:
        t0 = time.perf_counter()
        out = tmp_path / "overfit"
        sets = ["--set", "loss.ags_enabled=false", "--set", "train.iterations=500", "--set", "train.batch_size=4",
                "--set", "dataset.synth.n_images=8", "--set", "image_size=128"]
        assert main(["train", "--out", str(out), *sets]) == 0
        capsys.readouterr()
        records = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
        at10 = next(r["total"] for r in records if r["iter"] == 10)
        final = records[-1]["total"]
        assert main(["eval", "--checkpoint", str(out / "last.afdt")]) == 0
        result = json.loads(capsys.readouterr().out)
        elapsed = time.perf_counter() - t0
        ratio = final / at10
        info.update(iters=len(records), loss_ratio=f"{ratio:.3f}", map50=f"{result['mAP@0.5']:.3f}",
                    time=f"{elapsed:.0f}s")
        assert len(records) <= 500
        assert ratio <= 0.10, f"final/iter10 loss ratio {ratio:.3f}"
        assert result["mAP@0.5"] >= 0.9, f"mAP@0.5 {result['mAP@0.5']:.3f}"
        assert elapsed < 300, f"took {elapsed:.0f}s"


def test_ags_properties():
    with criterion("AGS map properties") as info:
        kernel = gaussian_kernel(GaussianSpec(5, 4, 1.5, 2.5), 10, 12)
        for seed in range(200):
            rng = np.random.default_rng(seed)
            logits = rng.normal(0, 4, (5, 10, 12))
            full = softmax_map(logits)
            assert abs(full.sum() - 1.0) <= 1e-9
            argmax = np.argmax(full)
            assert np.argmax(softmax_map(logits[rng.permutation(5)])) == argmax
            assert np.argmax(softmax_map(logits + rng.uniform(-100, 100))) == argmax
            masked = ags_map(logits, kernel)
            assert masked.sum() <= 1.0 + 1e-9
            assert np.argmax(ags_map(logits[rng.permutation(5)], kernel)) == np.argmax(masked)
        info["seeds"] = 200


def test_ema_law():
    with criterion("EMA update law") as info:
        params = {"w": np.array([3.0, -1.0, 0.25])}
        st = EmaState(0.0, {"w": np.zeros(3)})
        ema_update(st, params)
        assert np.array_equal(st.shadow["w"], params["w"])
        st = EmaState(1.0, {"w": np.array([7.0, 8.0, 9.0])})
        for _ in range(10):
            ema_update(st, params)
        assert np.array_equal(st.shadow["w"], [7.0, 8.0, 9.0])
        worst = 0.0
        # the error must stay well above one ulp for 100 steps
        for lam in (0.9, 0.95, 0.9998):
            st = EmaState(lam, {"w": np.array([10.0, -4.0, 2.0])})
            err = np.abs(st.shadow["w"] - params["w"]).max()
            for _ in range(100):
                ema_update(st, params)
                new = np.abs(st.shadow["w"] - params["w"]).max()
                worst = max(worst, abs(new / err - lam))
                err = new
        assert worst <= 1e-9
        info["max_ratio_dev"] = f"{worst:.1e}"


def test_cutmix_mixup_laws():
    with criterion("CutMix/MixUp laws") as info:
        rng = np.random.default_rng(5)
        a = TrainSample(rng.random((3, 48, 64)), [[2, 2, 20, 30]], [0])
        b = TrainSample(rng.random((3, 48, 64)), [[30, 10, 60, 40]], [1])
        for mix in (lambda l: A.mixup(a, b, l), lambda l: A.cutmix(a, b, l, rng)):
            one, zero = mix(1.0), mix(0.0)
            assert np.array_equal(one.image, a.image) and np.array_equal(one.boxes, a.boxes)
            assert np.array_equal(zero.image, b.image) and np.array_equal(zero.boxes, b.boxes)
        H, W = 48, 64
        fracs = []
        lam = 0.6
        while len(fracs) < 10_000:
            mask, clipped = A.cutmix_patch(H, W, lam, rng)
            if not clipped:
                assert abs(mask.mean() - (1 - lam)) <= 2 / min(H, W)
                fracs.append(mask.mean())
        for _ in range(2000):
            l = rng.uniform(0.02, 0.98)
            mask, clipped = A.cutmix_patch(H, W, l, rng)
            if not clipped:
                assert abs(mask.mean() - (1 - l)) <= 2 / min(H, W)
        rel = abs(np.mean(fracs) - (1 - lam)) / (1 - lam)
        assert rel <= 0.01
        info.update(draws=len(fracs), mean_rel_err=f"{rel:.4f}")


def test_evaluator():
    with criterion("evaluator") as info:
        gts = [GroundTruth(np.array([[0, 0, 10, 10], [20, 20, 40, 30]]), np.array([0, 1])),
               GroundTruth(np.array([[5, 5, 15, 25]]), np.array([1]))]
        perfect = [[Detection(BBox(*map(float, b)), int(c), 1.0) for b, c in zip(g.boxes, g.classes)] for g in gts]
        assert eval_map(perfect, gts).map == 1.0
        assert eval_map([[], []], gts).map == 0.0
        hand = [GroundTruth(np.array([[0, 0, 10, 10], [50, 50, 60, 60]]), np.array([0, 0]))]
        assert eval_map([[Detection(BBox(0.0, 0.0, 10.0, 9.0), 0, 0.8)]], hand).map50 == 0.5
        for seed in range(50):
            rng = np.random.default_rng(seed)
            dets, g = random_eval_case(rng)
            scale = float(rng.uniform(1e-3, 1e3))
            scaled = [[Detection(d.box, d.class_id, d.score * scale) for d in ds] for ds in dets]
            assert eval_map(dets, g) == eval_map(scaled, g)
        info["scale_cases"] = 50


def test_flops():
    with criterion("FLOPs counter") as info:
        ratio = lite_vs_plain_ratio(48, 32)
        expected = (2 * 25 * 48 + 2 * 48**2) / (25 * 48**2)
        assert abs(ratio - expected) <= 1e-4
        m = ToyDetector(3)
        small = flops_count(m.describe((3, 64, 64))[0])
        big = flops_count(m.describe((3, 128, 128))[0])
        assert small["total"] == sum(r["macs"] for r in small["layers"])
        assert all(b["macs"] == 4 * s["macs"] for s, b in zip(small["layers"], big["layers"]))
        assert big["total"] == 4 * small["total"]
        info.update(ratio=f"{ratio:.6f}", expected=f"{expected:.6f}")


def _snapshot(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_determinism_and_resume(tmp_path, capsys):
    with criterion("determinism and resume") as info:
        sets = []
        for k, v in {**SMALL_RUN, "augment.enabled": True, "train.iterations": 6}.items():
            sets += ["--set", f"{k}={json.dumps(v)}"]
        out = tmp_path / "run"
        assert main(["train", "--out", str(out), *sets]) == 0
        first = _snapshot(out)
        shutil.rmtree(out)
        assert main(["train", "--out", str(out), *sets]) == 0
        assert _snapshot(out) == first

        shutil.rmtree(out)
        assert main(["train", "--out", str(out), "--iterations", "2", *sets]) == 0
        assert main(["train", "--out", str(out), "--resume", str(out / "ckpt_000002.afdt"), *sets]) == 0
        resumed = _snapshot(out)
        assert resumed == first
        capsys.readouterr()
        info["files_compared"] = len(first)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
