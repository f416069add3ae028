"""A small stride-4 anchor-free detector built from vd downsampling and lite head blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .layers import ConvBN, Conv2d, Layer, LayerSpec, LiteBlock, VdDownsample

HEAD_WIDTH = 48
BACKBONE_CHANNELS = (16, 32, 64, 64)
REG_SCALE = 16.0
REG_LOGIT_CLAMP = 8.0
LOC_PRIOR = 0.01


@dataclass
class DetectorOutput:
    loc_logits: np.ndarray  # N x C x h x w
    heatmap: np.ndarray  # sigmoid(loc_logits)
    reg: np.ndarray  # N x 4 x h x w, side distances in input pixels


class Head(Layer):
    """Two feature layers and one 1x1 output convolution."""

    def __init__(self, width, out_channels, head_type="lite", bias_init=0.0, out_std=0.01, rng=None, dtype=np.float32):
        super().__init__()
        if head_type == "lite":
            self.f1 = self.add("f1", LiteBlock(width, width, rng=rng, dtype=dtype))
            self.f2 = self.add("f2", LiteBlock(width, width, rng=rng, dtype=dtype))
        elif head_type == "conv":
            self.f1 = self.add("f1", ConvBN(width, width, 3, rng=rng, dtype=dtype))
            self.f2 = self.add("f2", ConvBN(width, width, 3, rng=rng, dtype=dtype))
        else:
            raise ValueError(f"unknown head type {head_type!r}")
        self.out = self.add("out", Conv2d(width, out_channels, 1, bias=True, rng=rng, dtype=dtype, std=out_std))
        self.out.params["bias"][:] = bias_init

    def forward(self, x, training=True):
        return self.out.forward(self.f2.forward(self.f1.forward(x, training), training), training)

    def backward(self, grad):
        return self.f1.backward(self.f2.backward(self.out.backward(grad)))

    def describe(self, in_shape, prefix=""):
        rows = []
        for name, layer in self.children.items():
            r, in_shape = layer.describe(in_shape, f"{prefix}{name}.")
            rows += r
        return rows, in_shape


class ToyDetector(Layer):
    """Strided backbone, upsampling path with lateral shortcuts, two heads.

    Backbone stages produce features at strides 2, 4, 8 and 16; the
    upsampling path returns to stride 4 adding 1x1-projected lateral
    features at strides 8 and 4. The localization head emits ``C``
    logits per cell, the regression head ``16 * exp(raw)`` side distances.
    """

    def __init__(
        self,
        num_classes: int,
        head_width: int = HEAD_WIDTH,
        channels=BACKBONE_CHANNELS,
        head_type: str = "lite",
        seed: int = 0,
        dtype=np.float32,
    ):
        super().__init__()
        rng = np.random.default_rng(seed)
        c1, c2, c3, c4 = channels
        w = head_width
        self.num_classes = num_classes
        self.dtype = np.dtype(dtype)
        self.stem = self.add("stem", ConvBN(3, c1, 3, stride=2, rng=rng, dtype=dtype))
        self.stage2 = self.add("stage2", ConvBN(c1, c2, 3, stride=2, rng=rng, dtype=dtype))
        self.stage3 = self.add("stage3", VdDownsample(c2, c3, rng=rng, dtype=dtype))
        self.stage4 = self.add("stage4", VdDownsample(c3, c4, rng=rng, dtype=dtype))
        self.top = self.add("top", ConvBN(c4, w, 1, rng=rng, dtype=dtype))
        self.lat3 = self.add("lat3", ConvBN(c3, w, 1, act=False, rng=rng, dtype=dtype))
        self.up3 = self.add("up3", LiteBlock(w, w, rng=rng, dtype=dtype))
        self.lat2 = self.add("lat2", ConvBN(c2, w, 1, act=False, rng=rng, dtype=dtype))
        self.up2 = self.add("up2", LiteBlock(w, w, rng=rng, dtype=dtype))
        prior = float(np.log(LOC_PRIOR / (1 - LOC_PRIOR)))
        self.loc_head = self.add("loc_head", Head(w, num_classes, head_type, bias_init=prior, rng=rng, dtype=dtype))
        self.reg_head = self.add("reg_head", Head(w, 4, head_type, bias_init=0.0, out_std=0.001, rng=rng, dtype=dtype))
        self._raw_reg = None

    def forward(self, x: np.ndarray, training: bool = True) -> DetectorOutput:
        if x.ndim != 4 or x.shape[2] % 16 or x.shape[3] % 16:
            raise ValueError(f"input must be N x 3 x H x W with H, W divisible by 16, got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        f1 = self.stem.forward(x, training)
        f2 = self.stage2.forward(f1, training)
        f3 = self.stage3.forward(f2, training)
        f4 = self.stage4.forward(f3, training)
        u = self.top.forward(f4, training)
        u = F.shortcut_add(F.upsample_nearest(u, 2), self.lat3.forward(f3, training))
        u = self.up3.forward(u, training)
        u = F.shortcut_add(F.upsample_nearest(u, 2), self.lat2.forward(f2, training))
        u = self.up2.forward(u, training)
        logits = self.loc_head.forward(u, training)
        raw = self.reg_head.forward(u, training)
        self._raw_reg = raw
        reg = REG_SCALE * np.exp(np.clip(raw, -REG_LOGIT_CLAMP, REG_LOGIT_CLAMP))
        return DetectorOutput(loc_logits=logits, heatmap=F.sigmoid(logits), reg=reg)

    def backward(self, grad_logits: np.ndarray, grad_reg: np.ndarray, out: DetectorOutput) -> None:
        """Accumulate parameter gradients given loss gradients w.r.t. logits and side distances."""
        raw = self._raw_reg
        grad_raw = grad_reg * out.reg * (np.abs(raw) < REG_LOGIT_CLAMP)
        gu = self.loc_head.backward(grad_logits.astype(self.dtype, copy=False))
        gu = gu + self.reg_head.backward(grad_raw.astype(self.dtype, copy=False))
        gu = self.up2.backward(gu)
        gf2 = self.lat2.backward(gu)
        gu = F.upsample_nearest_backward(gu, 2)
        gu = self.up3.backward(gu)
        gf3 = self.lat3.backward(gu)
        gu = F.upsample_nearest_backward(gu, 2)
        gf4 = self.top.backward(gu)
        gf3 = gf3 + self.stage4.backward(gf4)
        gf2 = gf2 + self.stage3.backward(gf3)
        gf1 = self.stage2.backward(gf2)
        self.stem.backward(gf1)

    def describe(self, in_shape: tuple, prefix: str = "") -> tuple[list[LayerSpec], tuple]:
        """Layer-by-layer static shapes for an input of shape ``(3, H, W)``."""
        if any(d is None for d in in_shape):
            raise ValueError(f"static shapes required, got {in_shape}")
        rows = []

        def run(name, layer, shape):
            r, out = layer.describe(shape, f"{prefix}{name}.")
            rows.extend(r)
            return out

        s1 = run("stem", self.stem, tuple(in_shape))
        s2 = run("stage2", self.stage2, s1)
        s3 = run("stage3", self.stage3, s2)
        s4 = run("stage4", self.stage4, s3)
        u = run("top", self.top, s4)
        u_up = (u[0], u[1] * 2, u[2] * 2)
        rows.append(LayerSpec(f"{prefix}up3.upsample", "upsample", u, u_up, 2))
        run("lat3", self.lat3, s3)
        rows.append(LayerSpec(f"{prefix}up3.add", "add", u_up, u_up))
        u = run("up3", self.up3, u_up)
        u_up = (u[0], u[1] * 2, u[2] * 2)
        rows.append(LayerSpec(f"{prefix}up2.upsample", "upsample", u, u_up, 2))
        run("lat2", self.lat2, s2)
        rows.append(LayerSpec(f"{prefix}up2.add", "add", u_up, u_up))
        u = run("up2", self.up2, u_up)
        loc = run("loc_head", self.loc_head, u)
        reg = run("reg_head", self.reg_head, u)
        return rows, (loc, reg)

    def state(self) -> dict[str, np.ndarray]:
        return dict(self.named_params())

    def eval_forward(self, x: np.ndarray) -> DetectorOutput:
        return self.forward(x, training=False)
