"""Gaussian target encoding and heatmap decoding for a single stride-4 head."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import BBox

STRIDE = 4
DEFAULT_ALPHA = 0.54
DEFAULT_TOPK = 100
DEFAULT_SCORE_THRESH = 0.01


@dataclass(frozen=True)
class GaussianSpec:
    """Elliptical Gaussian bump on the feature grid.

    ``support_x``/``support_y`` are the half-extents (in cells) of the
    elliptical region outside which the kernel is exactly zero. They
    default to three standard deviations, floored at one cell.
    """

    center_x: float
    center_y: float
    sigma_x: float
    sigma_y: float
    support_x: float | None = None
    support_y: float | None = None

    def __post_init__(self):
        if not (self.sigma_x > 0 and self.sigma_y > 0):
            raise ValueError(f"sigmas must be positive, got ({self.sigma_x}, {self.sigma_y})")
        if self.support_x is None:
            object.__setattr__(self, "support_x", max(3.0 * self.sigma_x, 1.0))
        if self.support_y is None:
            object.__setattr__(self, "support_y", max(3.0 * self.sigma_y, 1.0))
        if self.support_x < 1 or self.support_y < 1:
            raise ValueError("kernel support must cover at least one cell per axis")


@dataclass
class EncodedTargets:
    class_heatmap: np.ndarray  # C x h x w
    reg_target: np.ndarray  # 4 x h x w, (left, top, right, bottom) in input pixels
    weight_map: np.ndarray  # h x w
    object_id: np.ndarray  # h x w, -1 is background
    boxes: np.ndarray  # n x 4
    classes: np.ndarray  # n
    kernels: list[np.ndarray] = field(default_factory=list)
    starved: list[int] = field(default_factory=list)  # objects left without any owned cell

    @property
    def num_classes(self) -> int:
        return self.class_heatmap.shape[0]

    @property
    def feature_shape(self) -> tuple[int, int]:
        return self.weight_map.shape


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_id: int
    score: float


def feature_size(H: int, W: int, stride: int = STRIDE) -> tuple[int, int]:
    return math.ceil(H / stride), math.ceil(W / stride)


def gaussian_kernel(spec: GaussianSpec, h: int, w: int, dtype=np.float64) -> np.ndarray:
    """Render ``spec`` on an ``h x w`` grid, peak-normalized to 1."""
    if not (0 <= spec.center_x < w and 0 <= spec.center_y < h):
        raise ValueError(f"kernel center ({spec.center_x}, {spec.center_y}) lies outside a {h}x{w} map")
    dx = np.arange(w, dtype=np.float64) - spec.center_x
    dy = np.arange(h, dtype=np.float64) - spec.center_y
    expo = dx[None, :] ** 2 / (2 * spec.sigma_x**2) + dy[:, None] ** 2 / (2 * spec.sigma_y**2)
    kernel = np.exp(-expo)
    inside = (dx[None, :] / spec.support_x) ** 2 + (dy[:, None] / spec.support_y) ** 2 <= 1.0
    kernel = np.where(inside, kernel, 0.0)
    cx = min(max(int(math.floor(spec.center_x + 0.5)), 0), w - 1)
    cy = min(max(int(math.floor(spec.center_y + 0.5)), 0), h - 1)
    peak = kernel[cy, cx]
    if peak > 0:
        kernel = kernel / peak
        kernel[cy, cx] = 1.0
    return kernel.astype(dtype, copy=False)


def gaussian_spec_for_box(box, h: int, w: int, alpha: float = DEFAULT_ALPHA, stride: int = STRIDE) -> GaussianSpec:
    """Kernel for a box given in input pixels: peak at the nearest cell to the box center."""
    x0, y0, x1, y1 = (float(v) for v in box)
    cx = min(max(math.floor((x0 + x1) / 2 / stride + 0.5), 0), w - 1)
    cy = min(max(math.floor((y0 + y1) / 2 / stride + 0.5), 0), h - 1)
    sigma_x = alpha * (x1 - x0) / stride / 6
    sigma_y = alpha * (y1 - y0) / stride / 6
    return GaussianSpec(float(cx), float(cy), sigma_x, sigma_y)


def sample_weights(gt, kernel: np.ndarray, owned_mask: np.ndarray) -> np.ndarray:
    """Per-cell regression weights: ``log(area) * G / sum(G over owned cells)``."""
    if kernel.shape != owned_mask.shape:
        raise ValueError(f"kernel {kernel.shape} and mask {owned_mask.shape} differ in shape")
    x0, y0, x1, y1 = (float(v) for v in gt)
    area = (x1 - x0) * (y1 - y0)
    if area <= 0:
        raise ValueError("sample weights need a box with positive area")
    out = np.zeros(kernel.shape, dtype=np.float64)
    g = np.where(owned_mask, kernel, 0.0)
    total = g.sum()
    if total <= 0:
        return out.astype(kernel.dtype, copy=False)
    out = math.log(area) * g / total
    return out.astype(kernel.dtype, copy=False)


def encode(gts, H: int, W: int, C: int, alpha: float = DEFAULT_ALPHA, dtype=np.float64) -> EncodedTargets:
    """Build training targets for one image.

    ``gts`` is a sequence of ``(box, class_id)`` pairs with boxes in input
    pixels. A cell belongs to an object when it lies inside that object's
    kernel support and its pixel position ``(col*4, row*4)`` lies inside the
    box. Each object's own peak cell always belongs to it; other contested
    cells go to the smaller-area object.
    """
    h, w = feature_size(H, W)
    heat = np.zeros((C, h, w), dtype=dtype)
    reg = np.zeros((4, h, w), dtype=dtype)
    weight = np.zeros((h, w), dtype=dtype)
    owner = np.full((h, w), -1, dtype=np.int64)
    gts = list(gts)
    boxes = np.array([list(map(float, b)) for b, _ in gts], dtype=np.float64).reshape(-1, 4)
    classes = np.array([int(c) for _, c in gts], dtype=np.int64)

    for i, (b, c) in enumerate(zip(boxes, classes)):
        if not 0 <= c < C:
            raise ValueError(f"object {i}: class id {c} outside [0, {C})")
        if b[2] - b[0] <= 0 or b[3] - b[1] <= 0:
            raise ValueError(f"object {i}: box {b.tolist()} has zero area")
        if b[0] < 0 or b[1] < 0 or b[2] > W or b[3] > H:
            raise ValueError(f"object {i}: box {b.tolist()} exceeds the {W}x{H} image")

    px = np.arange(w, dtype=np.float64) * STRIDE
    py = np.arange(h, dtype=np.float64) * STRIDE
    kernels, peaks, candidates = [], [], []
    for b, c in zip(boxes, classes):
        spec = gaussian_spec_for_box(b, h, w, alpha)
        k = gaussian_kernel(spec, h, w)
        kernels.append(k)
        peaks.append((int(spec.center_y), int(spec.center_x)))
        np.maximum(heat[c], k, out=heat[c])
        inside = ((px >= b[0]) & (px <= b[2]))[None, :] & ((py >= b[1]) & (py <= b[3]))[:, None]
        candidates.append((k > 0) & inside)

    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    # larger first so that smaller objects overwrite contested cells
    order = sorted(range(len(boxes)), key=lambda i: (-areas[i], i))
    for i in order:
        owner[candidates[i]] = i
    for i in order:
        r, col = peaks[i]
        if candidates[i][r, col]:
            owner[r, col] = i

    gy, gx = np.meshgrid(py, px, indexing="ij")
    starved = []
    for i, b in enumerate(boxes):
        owned = owner == i
        if not owned.any():
            starved.append(i)
            continue
        weight += sample_weights(b, kernels[i], owned).astype(dtype)
        reg[0][owned] = gx[owned] - b[0]
        reg[1][owned] = gy[owned] - b[1]
        reg[2][owned] = b[2] - gx[owned]
        reg[3][owned] = b[3] - gy[owned]

    return EncodedTargets(
        class_heatmap=heat,
        reg_target=reg,
        weight_map=weight,
        object_id=owner,
        boxes=boxes,
        classes=classes,
        kernels=[k.astype(dtype, copy=False) for k in kernels],
        starved=starved,
    )


def peak_mask(heatmap: np.ndarray) -> np.ndarray:
    """Keep cells equal to the maximum of their 3x3 neighbourhood (per channel)."""
    heat = np.asarray(heatmap)
    padded = np.pad(heat, [(0, 0)] * (heat.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    h, w = heat.shape[-2:]
    hmax = heat.copy()
    for dy in range(3):
        for dx in range(3):
            np.maximum(hmax, padded[..., dy : dy + h, dx : dx + w], out=hmax)
    return np.where(heat == hmax, heat, 0)


def decode(
    class_heatmap: np.ndarray,
    reg_map: np.ndarray,
    topk: int = DEFAULT_TOPK,
    score_thresh: float = DEFAULT_SCORE_THRESH,
    H: int | None = None,
    W: int | None = None,
) -> list[Detection]:
    """Turn a post-sigmoid heatmap and side-distance map into detections.

    Output is ordered by descending score; equal scores are ordered by
    ``(channel, row, column)``.
    """
    if topk <= 0:
        raise ValueError(f"topk must be positive, got {topk}")
    heat = np.asarray(class_heatmap)
    C, h, w = heat.shape
    if reg_map.shape != (4, h, w):
        raise ValueError(f"reg_map shape {reg_map.shape} does not match heatmap grid {(h, w)}")
    H = h * STRIDE if H is None else H
    W = w * STRIDE if W is None else W

    peaks = peak_mask(heat).ravel()
    flat = np.flatnonzero(peaks >= score_thresh)
    # flat indices already ascend in (channel, row, column); stable sort keeps that for ties
    order = np.argsort(-peaks[flat], kind="stable")[:topk]
    flat = flat[order]
    cls, rem = np.divmod(flat, h * w)
    rows, cols = np.divmod(rem, w)
    sides = np.maximum(reg_map[:, rows, cols].astype(np.float64), 0.0)
    x = cols * float(STRIDE)
    y = rows * float(STRIDE)
    x0 = np.clip(x - sides[0], 0, W)
    y0 = np.clip(y - sides[1], 0, H)
    x1 = np.clip(x + sides[2], 0, W)
    y1 = np.clip(y + sides[3], 0, H)
    scores = peaks[flat]
    return [
        Detection(BBox(float(x0[i]), float(y0[i]), float(x1[i]), float(y1[i])), int(cls[i]), float(scores[i]))
        for i in range(len(flat))
    ]
