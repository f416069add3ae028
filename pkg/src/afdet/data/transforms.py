"""Per-channel normalization and bilinear resizing."""

from __future__ import annotations

import numpy as np

from ..augment import TrainSample

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def normalize(image: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError(f"std components must be positive, got {std.tolist()}")
    out = (image - mean[:, None, None]) / std[:, None, None]
    return out.astype(image.dtype, copy=False)


def denormalize(image: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    return (image * std[:, None, None] + mean[:, None, None]).astype(image.dtype, copy=False)


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centers, edge clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output extents must be positive, got {out_h}x{out_w}")
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    y0, y1, fy = _axis_weights(h, out_h)
    x0, x1, fx = _axis_weights(w, out_w)
    img = image.astype(np.float64)
    rows = img[:, y0, :] * (1 - fy)[None, :, None] + img[:, y1, :] * fy[None, :, None]
    out = rows[:, :, x0] * (1 - fx)[None, None, :] + rows[:, :, x1] * fx[None, None, :]
    return out.astype(image.dtype)


def resize_bilinear(sample: TrainSample, out_h: int, out_w: int) -> TrainSample:
    image = resize_image(sample.image, out_h, out_w)
    sy, sx = out_h / sample.height, out_w / sample.width
    boxes = sample.boxes * np.array([sx, sy, sx, sy])
    return TrainSample(image, boxes, sample.classes.copy(), sample.box_weights.copy())
