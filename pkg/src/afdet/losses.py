"""Training objective: heatmap focal loss, AGS reweighting and GIoU regression.

Every loss returns ``(value, grad)`` where ``grad`` has the shape of the
prediction it differentiates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import STRIDE, EncodedTargets
from .geometry import giou, giou_grad

PRED_EPS = 1e-6
W_LOC = 1.0
W_REG = 5.0
AGS_LAMBDA = 0.5


@dataclass(frozen=True)
class LossBreakdown:
    loc: float
    reg: float
    total: float
    w_loc: float = W_LOC
    w_reg: float = W_REG

    def as_dict(self) -> dict:
        return {"loc": self.loc, "reg": self.reg, "total": self.total, "w_loc": self.w_loc, "w_reg": self.w_reg}


@dataclass(frozen=True)
class AgsConfig:
    lam: float = AGS_LAMBDA
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"AGS lambda must lie in [0, 1], got {self.lam}")


def focal_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Penalty-reduced focal loss over a ``C x h x w`` heatmap.

    Cells with ``target == 1`` contribute ``-(1-p)^2 log p``; all others
    ``-(1-t)^4 p^2 log(1-p)``. The sum is divided by the number of positive
    cells (at least 1). ``pred`` must already be clamped away from 0 and 1.
    """
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    p = pred
    pos = target == 1
    neg_w = (1 - target) ** 4
    log_p, log_1p = np.log(p), np.log1p(-p)
    n_pos = max(int(pos.sum()), 1)

    pos_term = -((1 - p) ** 2) * log_p
    neg_term = -neg_w * p**2 * log_1p
    loss = float(np.where(pos, pos_term, neg_term).sum()) / n_pos

    d_pos = 2 * (1 - p) * log_p - (1 - p) ** 2 / p
    d_neg = -neg_w * (2 * p * log_1p - p**2 / (1 - p))
    grad = np.where(pos, d_pos, d_neg) / n_pos
    return loss, grad.astype(pred.dtype, copy=False)


def softmax_map(loc_logits: np.ndarray) -> np.ndarray:
    """Channel max-reduce followed by a softmax over every cell of the map."""
    m = loc_logits.max(axis=0)
    e = np.exp(m - m.max())
    return e / e.sum()


def ags_map(loc_logits: np.ndarray, object_kernel: np.ndarray) -> np.ndarray:
    """AGS probability map for one object: the softmax map restricted to the kernel support.

    The result is not renormalized after masking and carries no gradient.
    """
    support = object_kernel > 0
    if not support.any():
        raise ValueError("object kernel has empty support")
    return np.where(support, softmax_map(loc_logits), 0.0)


def ags_cell_map(loc_logits: np.ndarray, targets: EncodedTargets) -> np.ndarray:
    """Per-cell AGS value at every owned cell, taken from the owning object's masked map."""
    out = np.zeros(targets.feature_shape, dtype=loc_logits.dtype)
    for i, kernel in enumerate(targets.kernels):
        owned = targets.object_id == i
        if owned.any():
            out[owned] = ags_map(loc_logits, kernel)[owned]
    return out


def reweight_giou(g, s, lam: float):
    """``1 - ((1 - lam) + lam * s) * g``."""
    return 1 - ((1 - lam) + lam * s) * g


def boxes_from_sides(sides: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Rebuild ``n x 4`` boxes from ``4 x n`` side distances at the given cells."""
    x = cols * float(STRIDE)
    y = rows * float(STRIDE)
    return np.stack([x - sides[0], y - sides[1], x + sides[2], y + sides[3]], axis=-1)


def regression_loss(
    pred_reg: np.ndarray,
    targets: EncodedTargets,
    ags: np.ndarray | None = None,
    cfg: AgsConfig | None = None,
) -> tuple[float, np.ndarray]:
    """Weighted GIoU loss over owned cells.

    ``ags`` is an ``h x w`` map of AGS values at owned cells (see
    :func:`ags_cell_map`); it is only used when ``cfg.enabled``.
    """
    cfg = cfg or AgsConfig(enabled=False)
    grad = np.zeros_like(pred_reg)
    rows, cols = np.nonzero(targets.object_id >= 0)
    if len(rows) == 0:
        return 0.0, grad

    w = targets.weight_map[rows, cols].astype(np.float64)
    gt = boxes_from_sides(targets.reg_target[:, rows, cols].astype(np.float64), rows, cols)
    pb = boxes_from_sides(pred_reg[:, rows, cols].astype(np.float64), rows, cols)
    g = giou(pb, gt)
    if cfg.enabled:
        if ags is None:
            raise ValueError("AGS is enabled but no AGS map was supplied")
        scale = (1 - cfg.lam) + cfg.lam * ags[rows, cols].astype(np.float64)
        per_cell = w * reweight_giou(g, ags[rows, cols].astype(np.float64), cfg.lam)
    else:
        scale = 1.0
        per_cell = w * (1 - g)
    norm = max(float(w.sum()), 1.0)
    loss = float(per_cell.sum()) / norm

    dg = -(w * scale) / norm
    dbox = giou_grad(pb, gt) * dg[:, None]
    # x_min = x - left, y_min = y - top, x_max = x + right, y_max = y + bottom
    grad[0, rows, cols] = -dbox[:, 0]
    grad[1, rows, cols] = -dbox[:, 1]
    grad[2, rows, cols] = dbox[:, 2]
    grad[3, rows, cols] = dbox[:, 3]
    return loss, grad


def total_loss(loc: float, reg: float, w_loc: float = W_LOC, w_reg: float = W_REG) -> LossBreakdown:
    if w_loc < 0 or w_reg < 0:
        raise ValueError("loss weights must be non-negative")
    return LossBreakdown(loc=loc, reg=reg, total=w_loc * loc + w_reg * reg, w_loc=w_loc, w_reg=w_reg)
