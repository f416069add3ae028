"""Synthetic rectangles dataset: noise background plus solid, class-coloured boxes."""

from __future__ import annotations

import numpy as np

from ..augment import TrainSample

PALETTE = np.array(
    [
        [0.90, 0.15, 0.15],
        [0.15, 0.80, 0.20],
        [0.20, 0.30, 0.95],
        [0.95, 0.85, 0.10],
        [0.80, 0.20, 0.85],
        [0.10, 0.85, 0.85],
        [0.95, 0.55, 0.10],
        [0.55, 0.35, 0.15],
    ]
)
NOISE_AMPLITUDE = 0.05
BACKGROUND = 0.45


def palette(num_classes: int) -> np.ndarray:
    if num_classes <= len(PALETTE):
        return PALETTE[:num_classes]
    rng = np.random.default_rng(1234)
    extra = rng.uniform(0.1, 0.95, size=(num_classes - len(PALETTE), 3))
    return np.vstack([PALETTE, extra])


def _overlaps(box, boxes, margin: int) -> bool:
    for b in boxes:
        if box[0] < b[2] + margin and b[0] < box[2] + margin and box[1] < b[3] + margin and b[1] < box[3] + margin:
            return True
    return False


def synth_sample(rng: np.random.Generator, size: int | tuple[int, int] = 128, num_classes: int = 3,
                 min_box: int = 16, max_box: int = 56, max_objects: int = 4) -> TrainSample:
    H, W = (size, size) if isinstance(size, int) else size
    colors = palette(num_classes)
    image = BACKGROUND + NOISE_AMPLITUDE * rng.uniform(-1, 1, size=(3, H, W))
    n = int(rng.integers(1, max_objects + 1))
    boxes, classes = [], []
    for _ in range(100):
        if len(boxes) == n:
            break
        bw = int(rng.integers(min_box, min(max_box, W) + 1))
        bh = int(rng.integers(min_box, min(max_box, H) + 1))
        x0 = int(rng.integers(0, W - bw + 1))
        y0 = int(rng.integers(0, H - bh + 1))
        box = (x0, y0, x0 + bw, y0 + bh)
        if _overlaps(box, boxes, margin=4):
            continue
        c = int(rng.integers(0, num_classes))
        image[:, y0 : y0 + bh, x0 : x0 + bw] = colors[c][:, None, None]
        boxes.append(box)
        classes.append(c)
    return TrainSample(np.clip(image, 0, 1).astype(np.float32), np.array(boxes, dtype=np.float64), np.array(classes))


def synth_dataset(n_images: int, size: int | tuple[int, int] = 128, num_classes: int = 3, seed: int = 0,
                  **kwargs) -> list[TrainSample]:
    """``n_images`` samples with 1-4 non-overlapping rectangles each; deterministic in ``seed``."""
    if n_images < 1:
        raise ValueError("n_images must be at least 1")
    return [synth_sample(np.random.default_rng([seed, i]), size, num_classes, **kwargs) for i in range(n_images)]
