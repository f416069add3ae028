"""Axis-aligned box arithmetic.

Boxes are ``(x_min, y_min, x_max, y_max)`` in continuous pixel
coordinates. Every function accepts a single box or an array of boxes
with a trailing dimension of 4 and broadcasts like numpy.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np


class BBox(NamedTuple):
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    def is_valid(self) -> bool:
        return self.x_min <= self.x_max and self.y_min <= self.y_max

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)


class DegenerateBoxError(ValueError):
    """Raised when a gradient is requested at a zero-width or zero-height box."""


def _as_boxes(b, dtype=None) -> np.ndarray:
    arr = np.asarray(b, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    if arr.shape[-1:] != (4,):
        raise ValueError(f"boxes must have a trailing dimension of 4, got shape {arr.shape}")
    return arr


def _scalar_or_array(x: np.ndarray):
    return float(x) if x.ndim == 0 else x


def box_area(b) -> np.ndarray | float:
    b = _as_boxes(b)
    w = np.maximum(b[..., 2] - b[..., 0], 0)
    h = np.maximum(b[..., 3] - b[..., 1], 0)
    return _scalar_or_array(w * h)


def _inter_union(a: np.ndarray, b: np.ndarray):
    iw = np.maximum(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0)
    ih = np.maximum(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    return inter, area_a + area_b - inter


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(np.broadcast(num, den).shape, dtype=np.result_type(num, den))
    np.divide(num, den, out=out, where=den > 0)
    return out


def iou(a, b):
    """Intersection over union; 0 when the union is empty."""
    a, b = _as_boxes(a), _as_boxes(b)
    inter, union = _inter_union(a, b)
    return _scalar_or_array(_safe_div(inter, union))


def pairwise_iou(a, b) -> np.ndarray:
    """IoU matrix of shape ``(len(a), len(b))``."""
    a = _as_boxes(a).reshape(-1, 4)
    b = _as_boxes(b).reshape(-1, 4)
    return np.asarray(iou(a[:, None, :], b[None, :, :])).reshape(len(a), len(b))


def giou(pred, gt):
    """Generalized IoU: ``iou - (enclosing - union) / enclosing``.

    Returns 0 when the enclosing box has zero area.
    """
    p, g = _as_boxes(pred), _as_boxes(gt)
    inter, union = _inter_union(p, g)
    ew = np.maximum(p[..., 2], g[..., 2]) - np.minimum(p[..., 0], g[..., 0])
    eh = np.maximum(p[..., 3], g[..., 3]) - np.minimum(p[..., 1], g[..., 1])
    enclosing = ew * eh
    value = _safe_div(inter, union) - _safe_div(enclosing - union, enclosing)
    return _scalar_or_array(np.where(enclosing > 0, value, 0.0))


def _step(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # derivative of max(a, b) w.r.t. a; exact ties split evenly
    return np.where(a > b, 1.0, np.where(a == b, 0.5, 0.0))


def giou_grad(pred, gt) -> np.ndarray:
    """Analytic gradient of :func:`giou` with respect to ``pred``'s coordinates.

    Returns an array with the same shape as ``pred`` holding
    ``d giou / d (x_min, y_min, x_max, y_max)``. Where an edge of ``pred``
    coincides exactly with the corresponding edge of ``gt`` (or the
    intersection has exactly zero extent) the two one-sided derivatives are
    averaged, which is what a central difference measures.

    Raises:
        DegenerateBoxError: if any ``pred`` box has zero width or height.
    """
    p, g = np.broadcast_arrays(_as_boxes(pred), _as_boxes(gt))
    x1, y1, x2, y2 = (p[..., i] for i in range(4))
    gx1, gy1, gx2, gy2 = (g[..., i] for i in range(4))
    w, h = x2 - x1, y2 - y1
    if np.any(w <= 0) or np.any(h <= 0):
        raise DegenerateBoxError("giou_grad requires a prediction with positive width and height")

    ix1, iy1 = np.maximum(x1, gx1), np.maximum(y1, gy1)
    ix2, iy2 = np.minimum(x2, gx2), np.minimum(y2, gy2)
    iw_raw, ih_raw = ix2 - ix1, iy2 - iy1
    iw, ih = np.maximum(iw_raw, 0), np.maximum(ih_raw, 0)
    zero = np.zeros_like(iw)
    rw, rh = _step(iw_raw, zero), _step(ih_raw, zero)

    inter = iw * ih
    union = w * h + (gx2 - gx1) * (gy2 - gy1) - inter
    ew = np.maximum(x2, gx2) - np.minimum(x1, gx1)
    eh = np.maximum(y2, gy2) - np.minimum(y1, gy1)
    enc = ew * eh

    # d(iw)/d(x1), d(iw)/d(x2), d(ih)/d(y1), d(ih)/d(y2)
    d_iw = (-rw * _step(x1, gx1), rw * _step(gx2, x2))
    d_ih = (-rh * _step(y1, gy1), rh * _step(gy2, y2))
    d_inter = np.stack([ih * d_iw[0], iw * d_ih[0], ih * d_iw[1], iw * d_ih[1]], axis=-1)
    d_area = np.stack([-h, -w, h, w], axis=-1)
    d_union = d_area - d_inter
    d_enc = np.stack(
        [
            -eh * _step(gx1, x1),
            -ew * _step(gy1, y1),
            eh * _step(x2, gx2),
            ew * _step(y2, gy2),
        ],
        axis=-1,
    )

    # giou = I/U - 1 + U/E
    inter, union, enc = inter[..., None], union[..., None], enc[..., None]
    grad = d_inter / union - inter * d_union / union**2 + d_union / enc - union * d_enc / enc**2
    return grad.astype(p.dtype, copy=False)
