import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afdet import augment as A
from afdet.augment import GridMaskParams, TrainSample
from afdet.config import AugmentConfig
from afdet.geometry import pairwise_iou
from afdet.pipeline import apply_pipeline


def sample(rng, H=32, W=32, n=3):
    boxes = []
    for _ in range(n):
        x0, y0 = rng.uniform(0, W - 6), rng.uniform(0, H - 6)
        boxes.append([x0, y0, rng.uniform(x0 + 4, W), rng.uniform(y0 + 4, H)])
    return TrainSample(rng.random((3, H, W)), np.array(boxes), rng.integers(0, 3, n))


def test_sample_lengths_validated():
    with pytest.raises(ValueError):
        TrainSample(np.zeros((3, 4, 4)), np.zeros((2, 4)), np.zeros(1))


def test_mixup_endpoints_and_identity(rng):
    a, b = sample(rng), sample(rng)
    out = A.mixup(a, b, 1.0)
    np.testing.assert_array_equal(out.image, a.image)
    np.testing.assert_array_equal(out.boxes, a.boxes)
    out = A.mixup(a, b, 0.0)
    np.testing.assert_array_equal(out.image, b.image)
    assert len(out.boxes) == len(b.boxes)
    out = A.mixup(a, b, 0.3)
    assert np.abs(out.image - (0.3 * a.image + 0.7 * b.image)).max() == 0
    np.testing.assert_allclose(out.box_weights, [0.3] * 3 + [0.7] * 3)


def test_mixup_white_black():
    white = TrainSample(np.ones((3, 8, 8)))
    black = TrainSample(np.zeros((3, 8, 8)))
    np.testing.assert_array_equal(A.mixup(white, black, 0.5).image, 0.5)


def test_mixup_shape_mismatch(rng):
    with pytest.raises(ValueError):
        A.mixup(sample(rng, 16, 16), sample(rng, 16, 20), 0.5)


def test_cutmix_endpoints(rng):
    a, b = sample(rng), sample(rng)
    out = A.cutmix(a, b, 1.0, rng)
    np.testing.assert_array_equal(out.image, a.image)
    np.testing.assert_array_equal(out.boxes, a.boxes)
    out = A.cutmix(a, b, 0.0, rng)
    np.testing.assert_array_equal(out.image, b.image)
    np.testing.assert_array_equal(out.boxes, b.boxes)
    # a patch clipped to nothing leaves a untouched
    out = A.cutmix(a, b, 0.5, patch=(40, 40, 60, 60))
    np.testing.assert_array_equal(out.image, a.image)


def test_cutmix_box_rules():
    a = TrainSample(np.zeros((3, 40, 40)), [[0, 0, 10, 10], [20, 20, 30, 30]], [0, 1])
    b = TrainSample(np.ones((3, 40, 40)), [[18, 18, 36, 36], [0, 30, 8, 38]], [2, 2])
    out = A.cutmix(a, b, 0.5, patch=(16, 16, 32, 32))
    assert out.image[:, 16:32, 16:32].min() == 1 and out.image.sum() == 3 * 256
    np.testing.assert_array_equal(out.boxes, [[0, 0, 10, 10], [18, 18, 32, 32]])
    assert out.classes.tolist() == [0, 2]
    share = 256 / 1600
    np.testing.assert_allclose(out.box_weights, [1 - share, share])


def test_cutmix_area_per_draw(rng):
    H = W = 64
    for _ in range(500):
        lam = rng.uniform(0.05, 0.95)
        mask, clipped = A.cutmix_patch(H, W, lam, rng)
        if not clipped:
            assert abs(mask.mean() - (1 - lam)) <= 2 / min(H, W)
    # lam = 0.75, unclipped: quarter of the pixels
    mask = A._rect_mask(32, 32, (8, 8, 24, 24))
    assert mask.mean() == 0.25


def test_cutmix_area_law_mean():
    rng = np.random.default_rng(7)
    lam, fracs = 0.6, []
    while len(fracs) < 10_000:
        mask, clipped = A.cutmix_patch(48, 48, lam, rng)
        if not clipped:
            fracs.append(mask.mean())
    assert abs(np.mean(fracs) - (1 - lam)) <= 0.01 * (1 - lam)


def test_beta_mean():
    rng = np.random.default_rng(3)
    draws = [A.sample_lambda(rng) for _ in range(100_000)]
    assert abs(np.mean(draws) - 0.5) < 0.01


def test_gridmask_count():
    s = TrainSample(np.ones((3, 32, 32)))
    out = A.gridmask(s, GridMaskParams(8, 0.5, apply_prob=1.0), np.random.default_rng(0))
    zero = out.image[0] == 0
    assert zero.mean() == 0.25
    assert zero[:4, :4].all() and not zero[4:8, :].any()


def test_gridmask_identity_cases(rng):
    s = sample(rng)
    out = A.gridmask(s, GridMaskParams(8, 0.5, apply_prob=0.0), rng)
    assert out is s
    nearly_one = A.gridmask(s, GridMaskParams(8, 0.999, apply_prob=1.0), rng)
    # hole of 0.008 px still drops column/row 0 of each unit: it tends to nothing as r -> 1
    assert (nearly_one.image == 0).mean() <= (1 / 8) ** 2
    np.testing.assert_array_equal(nearly_one.boxes, s.boxes)


def test_gridmask_params_validation():
    with pytest.raises(ValueError):
        GridMaskParams(1, 0.5).validate(32, 32)
    with pytest.raises(ValueError):
        GridMaskParams(8, 1.0).validate(32, 32)
    with pytest.raises(ValueError):
        GridMaskParams(8, 0.5, offset_x=8).validate(32, 32)


def test_expand(rng):
    s = sample(rng)
    same = A.random_expand(s, ratio=1.0, offset=(0, 0))
    np.testing.assert_array_equal(same.image, s.image)
    np.testing.assert_array_equal(same.boxes, s.boxes)
    big = A.random_expand(s, 2.0, ratio=2.0, offset=(16, 16))
    assert big.image.shape == (3, 64, 64)
    np.testing.assert_array_equal(big.boxes, s.boxes + 16)
    np.testing.assert_array_equal(big.image[:, 16:48, 16:48], s.image)
    rnd = A.random_expand(s, 3.0, rng=rng)
    np.testing.assert_allclose(pairwise_iou(rnd.boxes, rnd.boxes), pairwise_iou(s.boxes, s.boxes), atol=1e-12)
    with pytest.raises(ValueError):
        A.random_expand(s, 0.5, rng=rng)


def test_crop_full_window_identity(rng):
    s = sample(rng)
    out = A.random_crop(s, window=(0, 0, 32, 32))
    np.testing.assert_array_equal(out.image, s.image)
    np.testing.assert_array_equal(out.boxes, s.boxes)


def test_crop_fallback_when_no_center_survives():
    s = TrainSample(np.random.default_rng(0).random((3, 32, 32)), [[0, 0, 2, 2]], [0])

    class EdgeRng:
        # every window excludes the lone box center at (1, 1)
        def __init__(self):
            self.inner = np.random.default_rng(1)

        def uniform(self, lo, hi):
            return self.inner.uniform(lo, hi)

        def integers(self, lo, hi):
            return max(lo, hi - 1)

    out = A.random_crop(s, rng=EdgeRng())
    assert out is s


def test_crop_survivors_centers_inside(rng):
    for _ in range(200):
        s = sample(rng, 48, 48, 4)
        cx = (s.boxes[:, 0] + s.boxes[:, 2]) / 2
        window = A._crop_window(rng, 48, 48)
        out = A.crop_to_window(s, window)
        if out is None:
            continue
        x0, y0, x1, y1 = window
        assert out.image.shape[1:] == (y1 - y0, x1 - x0)
        assert np.all(out.boxes >= 0)
        assert np.all(out.boxes[:, [0, 2]] <= x1 - x0) and np.all(out.boxes[:, [1, 3]] <= y1 - y0)
        assert len(out.boxes) <= ((cx >= x0) & (cx < x1)).sum()


def test_crop_min_iou_validation(rng):
    with pytest.raises(ValueError):
        A.random_crop(sample(rng), 1.5, rng)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_pipeline_range_labels_determinism(seed):
    base = np.random.default_rng(seed)
    s, p = sample(base, 48, 48, 3), sample(base, 48, 48, 2)
    cfg = AugmentConfig(enabled=True, mix_prob=1.0, expand_prob=1.0, crop_prob=1.0)
    out = apply_pipeline(s, p, cfg, np.random.default_rng([seed, 1]), 32)
    again = apply_pipeline(s, p, cfg, np.random.default_rng([seed, 1]), 32)
    np.testing.assert_array_equal(out.image, again.image)
    np.testing.assert_array_equal(out.boxes, again.boxes)
    assert out.image.shape == (3, 32, 32)
    assert out.image.min() >= 0 and out.image.max() <= 1
    if len(out.boxes):
        assert np.all(out.boxes[:, 2] >= out.boxes[:, 0]) and np.all(out.boxes[:, 3] >= out.boxes[:, 1])
        assert out.boxes.min() >= 0 and out.boxes[:, [0, 2]].max() <= 32 and out.boxes[:, [1, 3]].max() <= 32
        assert np.all((out.box_weights > 0) & (out.box_weights <= 1))
