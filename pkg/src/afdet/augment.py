"""Detection-aware augmentation.

All stochastic operations take an explicit ``numpy.random.Generator``;
nothing reads global random state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import iou

BETA_A = 1.5
GRIDMASK_PROB = 0.7
MAX_CROP_TRIES = 50


@dataclass
class TrainSample:
    image: np.ndarray  # 3 x H x W in [0, 1]
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    box_weights: np.ndarray | None = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if self.box_weights is None:
            self.box_weights = np.ones(len(self.boxes))
        self.box_weights = np.asarray(self.box_weights, dtype=np.float64).reshape(-1)
        if not len(self.boxes) == len(self.classes) == len(self.box_weights):
            raise ValueError("boxes, classes and box_weights must have equal length")

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]

    def select(self, keep: np.ndarray) -> "TrainSample":
        return TrainSample(self.image, self.boxes[keep], self.classes[keep], self.box_weights[keep])


@dataclass(frozen=True)
class GridMaskParams:
    unit: int
    ratio: float
    offset_x: int = 0
    offset_y: int = 0
    apply_prob: float = GRIDMASK_PROB

    def validate(self, H: int, W: int) -> None:
        if not 2 <= self.unit <= min(H, W):
            raise ValueError(f"grid unit {self.unit} outside [2, {min(H, W)}]")
        if not 0 < self.ratio < 1:
            raise ValueError(f"grid keep ratio must lie in (0, 1), got {self.ratio}")
        if not (0 <= self.offset_x < self.unit and 0 <= self.offset_y < self.unit):
            raise ValueError("grid offsets must lie in [0, unit)")


def sample_lambda(rng: np.random.Generator, a: float = BETA_A) -> float:
    return float(rng.beta(a, a))


def _check_same_shape(a: TrainSample, b: TrainSample) -> None:
    if a.image.shape != b.image.shape:
        raise ValueError(f"images differ in shape: {a.image.shape} vs {b.image.shape}")


def _concat(parts: list[TrainSample], image: np.ndarray) -> TrainSample:
    out = TrainSample(
        image,
        np.concatenate([p.boxes for p in parts]),
        np.concatenate([p.classes for p in parts]),
        np.concatenate([p.box_weights for p in parts]),
    )
    return out.select(out.box_weights > 0)


def mixup(a: TrainSample, b: TrainSample, lam: float) -> TrainSample:
    _check_same_shape(a, b)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixing ratio must lie in [0, 1], got {lam}")
    image = lam * a.image + (1 - lam) * b.image
    return _concat(
        [replace(a, box_weights=a.box_weights * lam), replace(b, box_weights=b.box_weights * (1 - lam))],
        np.clip(image, 0.0, 1.0),
    )


def cutmix_patch(H: int, W: int, lam: float, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """Sample the pasted region for :func:`cutmix`.

    The patch is ``W*sqrt(1-lam)`` by ``H*sqrt(1-lam)`` with a center drawn
    uniformly over the image. A pixel is covered when its center falls
    inside the (clipped) patch, so the expected covered count of an
    unclipped patch equals its continuous area. Returns the boolean mask
    and whether clipping occurred.
    """
    cut = math.sqrt(max(1.0 - lam, 0.0))
    pw, ph = W * cut, H * cut
    cx, cy = rng.uniform(0, W), rng.uniform(0, H)
    x0, x1 = cx - pw / 2, cx + pw / 2
    y0, y1 = cy - ph / 2, cy + ph / 2
    clipped = x0 < 0 or y0 < 0 or x1 > W or y1 > H
    return _rect_mask(H, W, (x0, y0, x1, y1)), clipped


def _rect_mask(H: int, W: int, rect) -> np.ndarray:
    x0, y0, x1, y1 = rect
    xs = np.arange(W) + 0.5
    ys = np.arange(H) + 0.5
    return ((ys >= y0) & (ys < y1))[:, None] & ((xs >= x0) & (xs < x1))[None, :]


def _mask_bounds(mask: np.ndarray):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if len(rows) == 0:
        return None
    return float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1)


def _centers_inside(boxes: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros(0, dtype=bool)
    H, W = mask.shape
    cx = np.clip(((boxes[:, 0] + boxes[:, 2]) / 2).astype(int), 0, W - 1)
    cy = np.clip(((boxes[:, 1] + boxes[:, 3]) / 2).astype(int), 0, H - 1)
    return mask[cy, cx]


def _clip_boxes(boxes: np.ndarray, rect) -> np.ndarray:
    x0, y0, x1, y1 = rect
    out = boxes.copy()
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], x0, x1)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], y0, y1)
    return out


def _nondegenerate(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])


def cutmix(
    a: TrainSample,
    b: TrainSample,
    lam: float,
    rng: np.random.Generator | None = None,
    patch=None,
) -> TrainSample:
    """Paste a rectangle of ``b`` into ``a``.

    ``patch`` may fix the pasted rectangle ``(x0, y0, x1, y1)`` instead of
    sampling it. Boxes of ``a`` survive when their center is outside the
    pasted region; boxes of ``b`` survive when their center is inside it
    and are clipped to it. Box weights are scaled by the realised area
    share of each source.
    """
    _check_same_shape(a, b)
    H, W = a.height, a.width
    if patch is not None:
        mask = _rect_mask(H, W, patch)
    elif lam >= 1.0:
        mask = np.zeros((H, W), dtype=bool)
    elif lam <= 0.0:
        mask = np.ones((H, W), dtype=bool)
    else:
        if rng is None:
            raise ValueError("cutmix needs a random generator to sample its patch")
        mask, _ = cutmix_patch(H, W, lam, rng)

    share_b = float(mask.mean())
    image = np.where(mask[None], b.image, a.image)
    bounds = _mask_bounds(mask)

    keep_a = ~_centers_inside(a.boxes, mask)
    part_a = a.select(keep_a)
    part_a = replace(part_a, box_weights=part_a.box_weights * (1 - share_b))
    if bounds is None:
        part_b = b.select(np.zeros(len(b.boxes), dtype=bool))
    else:
        part_b = b.select(_centers_inside(b.boxes, mask))
        part_b = replace(part_b, boxes=_clip_boxes(part_b.boxes, bounds), box_weights=part_b.box_weights * share_b)
        part_b = part_b.select(_nondegenerate(part_b.boxes))
    return _concat([part_a, part_b], image)


def gridmask_mask(H: int, W: int, p: GridMaskParams) -> np.ndarray:
    """Boolean ``H x W`` array, True where pixels are dropped."""
    hole = p.unit * (1 - p.ratio)
    xs = (np.arange(W) + p.offset_x) % p.unit < hole
    ys = (np.arange(H) + p.offset_y) % p.unit < hole
    return ys[:, None] & xs[None, :]


def gridmask(s: TrainSample, p: GridMaskParams, rng: np.random.Generator) -> TrainSample:
    p.validate(s.height, s.width)
    if rng.random() >= p.apply_prob:
        return s
    drop = gridmask_mask(s.height, s.width, p)
    return replace(s, image=np.where(drop[None], 0.0, s.image).astype(s.image.dtype, copy=False))


def sample_gridmask_params(
    rng: np.random.Generator, H: int, W: int, unit_range=(16, 48), ratio: float = 0.5, apply_prob: float = GRIDMASK_PROB
) -> GridMaskParams:
    lo = max(2, unit_range[0])
    hi = max(lo, min(unit_range[1], H, W))
    unit = int(rng.integers(lo, hi + 1))
    return GridMaskParams(
        unit=unit,
        ratio=ratio,
        offset_x=int(rng.integers(0, unit)),
        offset_y=int(rng.integers(0, unit)),
        apply_prob=apply_prob,
    )


def random_expand(
    s: TrainSample,
    max_ratio: float = 2.0,
    fill=(0.485, 0.456, 0.406),
    rng: np.random.Generator | None = None,
    ratio: float | None = None,
    offset: tuple[int, int] | None = None,
) -> TrainSample:
    """Place the image on a larger filled canvas.

    ``ratio`` and ``offset`` (as ``(top, left)``) override the sampled values.
    """
    if max_ratio < 1:
        raise ValueError(f"max_ratio must be at least 1, got {max_ratio}")
    if ratio is None:
        ratio = float(rng.uniform(1.0, max_ratio)) if max_ratio > 1 else 1.0
    H, W = s.height, s.width
    nh, nw = int(round(H * ratio)), int(round(W * ratio))
    if offset is None:
        top = int(rng.integers(0, nh - H + 1))
        left = int(rng.integers(0, nw - W + 1))
    else:
        top, left = offset
    if top < 0 or left < 0 or top + H > nh or left + W > nw:
        raise ValueError(f"offset {(top, left)} does not fit the image in a {nh}x{nw} canvas")
    canvas = np.empty((s.image.shape[0], nh, nw), dtype=s.image.dtype)
    canvas[:] = np.asarray(fill, dtype=s.image.dtype)[:, None, None]
    canvas[:, top : top + H, left : left + W] = s.image
    boxes = s.boxes + np.array([left, top, left, top], dtype=np.float64)
    return replace(s, image=canvas, boxes=boxes)


def _crop_window(rng: np.random.Generator, H: int, W: int, min_scale: float = 0.3):
    scale = rng.uniform(min_scale, 1.0)
    aspect = rng.uniform(0.5, 2.0)
    ch = int(min(H, max(1, round(H * scale / math.sqrt(aspect)))))
    cw = int(min(W, max(1, round(W * scale * math.sqrt(aspect)))))
    y0 = int(rng.integers(0, H - ch + 1))
    x0 = int(rng.integers(0, W - cw + 1))
    return x0, y0, x0 + cw, y0 + ch


def crop_to_window(s: TrainSample, window, min_iou_keep: float = 0.0) -> TrainSample | None:
    """Crop to an integer window ``(x0, y0, x1, y1)``; None when no box survives.

    A box survives when its center lies inside the window and the IoU of its
    clipped part with the original is at least ``min_iou_keep``.
    """
    x0, y0, x1, y1 = (int(v) for v in window)
    if len(s.boxes) == 0:
        return None
    cx = (s.boxes[:, 0] + s.boxes[:, 2]) / 2
    cy = (s.boxes[:, 1] + s.boxes[:, 3]) / 2
    inside = (cx >= x0) & (cx < x1) & (cy >= y0) & (cy < y1)
    clipped = _clip_boxes(s.boxes, (x0, y0, x1, y1))
    overlap = np.atleast_1d(iou(clipped, s.boxes)) if len(clipped) else np.zeros(0)
    keep = inside & (overlap >= min_iou_keep) & _nondegenerate(clipped)
    if not keep.any():
        return None
    boxes = clipped[keep] - np.array([x0, y0, x0, y0], dtype=np.float64)
    return TrainSample(s.image[:, y0:y1, x0:x1].copy(), boxes, s.classes[keep], s.box_weights[keep])


def random_crop(
    s: TrainSample, min_iou_keep: float = 0.0, rng: np.random.Generator | None = None, window=None
) -> TrainSample:
    """Crop a random window, retrying up to 50 times; falls back to the input."""
    if not 0.0 <= min_iou_keep <= 1.0:
        raise ValueError(f"min_iou_keep must lie in [0, 1], got {min_iou_keep}")
    if window is not None:
        out = crop_to_window(s, window, min_iou_keep)
        return s if out is None else out
    for _ in range(MAX_CROP_TRIES):
        out = crop_to_window(s, _crop_window(rng, s.height, s.width), min_iou_keep)
        if out is not None:
            return out
    return s
