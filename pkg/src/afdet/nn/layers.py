"""Layers with explicit forward/backward passes.

Each layer owns its parameters and gradients in ordered dicts so a model
can enumerate them in declaration order. ``forward`` caches what
``backward`` needs; ``backward`` accumulates into ``grads`` and returns
the gradient with respect to the layer input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one layer for MAC counting."""

    name: str
    kind: str  # "conv", "bn", "add", "pool", "upsample", "relu"
    in_shape: tuple
    out_shape: tuple
    kernel: int = 1
    groups: int = 1


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Layer] = {}

    def add(self, name: str, layer: "Layer") -> "Layer":
        self.children[name] = layer
        return layer

    def named_params(self, prefix: str = ""):
        for k, v in self.params.items():
            yield prefix + k, v
        for cname, child in self.children.items():
            yield from child.named_params(f"{prefix}{cname}.")

    def named_grads(self, prefix: str = ""):
        for k, v in self.grads.items():
            yield prefix + k, v
        for cname, child in self.children.items():
            yield from child.named_grads(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = ""):
        for k, v in self.buffers.items():
            yield prefix + k, v
        for cname, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0)
        for child in self.children.values():
            child.zero_grad()

    def describe(self, in_shape: tuple, prefix: str = "") -> tuple[list[LayerSpec], tuple]:
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, cin, cout, kernel, stride=1, padding=None, groups=1, bias=False, rng=None, dtype=np.float32, std=None):
        super().__init__()
        self.cin, self.cout, self.kernel, self.stride, self.groups = cin, cout, kernel, stride, groups
        self.padding = kernel // 2 if padding is None else padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin // groups * kernel * kernel
        std = np.sqrt(2.0 / fan_in) if std is None else std
        self.params["weight"] = (rng.standard_normal((cout, cin // groups, kernel, kernel)) * std).astype(dtype)
        if bias:
            self.params["bias"] = np.zeros(cout, dtype=dtype)
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)
        self._x = None

    def forward(self, x, training: bool = True):
        if x.shape[1] != self.cin:
            raise ValueError(f"conv expects {self.cin} input channels, got {x.shape[1]}")
        self._x = x
        return F.conv2d_forward(x, self.params["weight"], self.params.get("bias"), self.stride, self.padding, self.groups)

    def backward(self, grad):
        gx, gw, gb = F.conv2d_backward(
            grad, self._x, self.params["weight"], self.stride, self.padding, self.groups, "bias" in self.params
        )
        self.grads["weight"] += gw
        if gb is not None:
            self.grads["bias"] += gb
        return gx

    def describe(self, in_shape, prefix=""):
        c, h, w = in_shape
        oh = F.conv_output_size(h, self.kernel, self.stride, self.padding)
        ow = F.conv_output_size(w, self.kernel, self.stride, self.padding)
        out = (self.cout, oh, ow)
        return [LayerSpec(prefix.rstrip("."), "conv", in_shape, out, self.kernel, self.groups)], out


class BatchNorm2d(Layer):
    def __init__(self, channels, dtype=np.float32):
        super().__init__()
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self._cache = None

    def forward(self, x, training: bool = True):
        out, self._cache = F.batchnorm_forward(
            x,
            self.params["gamma"],
            self.params["beta"],
            self.buffers["running_mean"],
            self.buffers["running_var"],
            training,
        )
        return out

    def backward(self, grad):
        gx, gg, gb = F.batchnorm_backward(grad, self._cache)
        self.grads["gamma"] += gg
        self.grads["beta"] += gb
        return gx

    def describe(self, in_shape, prefix=""):
        return [LayerSpec(prefix.rstrip("."), "bn", in_shape, in_shape)], in_shape


class ConvBN(Layer):
    """Convolution, batch norm and an optional ReLU."""

    def __init__(self, cin, cout, kernel, stride=1, groups=1, act=True, rng=None, dtype=np.float32):
        super().__init__()
        self.conv = self.add("conv", Conv2d(cin, cout, kernel, stride, groups=groups, rng=rng, dtype=dtype))
        self.bn = self.add("bn", BatchNorm2d(cout, dtype))
        self.act = act
        self._pre = None

    def forward(self, x, training=True):
        y = self.bn.forward(self.conv.forward(x, training), training)
        if self.act:
            self._pre = y
            return F.relu(y)
        return y

    def backward(self, grad):
        if self.act:
            grad = F.relu_backward(grad, self._pre)
        return self.conv.backward(self.bn.backward(grad))

    def describe(self, in_shape, prefix=""):
        rows, shape = self.conv.describe(in_shape, prefix + "conv.")
        bn_rows, shape = self.bn.describe(shape, prefix + "bn.")
        return rows + bn_rows, shape


class LiteBlock(Layer):
    """Depthwise 5x5, pointwise, pointwise, depthwise 5x5; BN and ReLU after each."""

    KERNELS = (5, 1, 1, 5)

    def __init__(self, cin, cout, rng=None, dtype=np.float32):
        super().__init__()
        self.cin, self.cout = cin, cout
        self.layers = [
            self.add("dw1", ConvBN(cin, cin, 5, groups=cin, rng=rng, dtype=dtype)),
            self.add("pw1", ConvBN(cin, cout, 1, rng=rng, dtype=dtype)),
            self.add("pw2", ConvBN(cout, cout, 1, rng=rng, dtype=dtype)),
            self.add("dw2", ConvBN(cout, cout, 5, groups=cout, rng=rng, dtype=dtype)),
        ]

    def forward(self, x, training=True):
        if x.shape[1] != self.cin:
            raise ValueError(f"lite block expects {self.cin} channels, got {x.shape[1]}")
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def describe(self, in_shape, prefix=""):
        rows = []
        for name, layer in self.children.items():
            r, in_shape = layer.describe(in_shape, f"{prefix}{name}.")
            rows += r
        return rows, in_shape


class VdDownsample(Layer):
    """Residual downsampling block with an average-pooled shortcut.

    main:     conv3x3/s2 -> BN -> ReLU -> conv3x3 -> BN
    shortcut: avgpool 2x2/s2 -> conv1x1 -> BN
    output:   ReLU(main + shortcut)
    """

    def __init__(self, cin, cout, rng=None, dtype=np.float32):
        super().__init__()
        self.conv1 = self.add("conv1", ConvBN(cin, cout, 3, stride=2, rng=rng, dtype=dtype))
        self.conv2 = self.add("conv2", ConvBN(cout, cout, 3, act=False, rng=rng, dtype=dtype))
        self.short = self.add("short", ConvBN(cin, cout, 1, act=False, rng=rng, dtype=dtype))
        self._sum = None

    def forward(self, x, training=True):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ValueError(f"vd downsample needs even spatial extents, got {x.shape[2:]}")
        main = self.conv2.forward(self.conv1.forward(x, training), training)
        short = self.short.forward(F.avg_pool2(x), training)
        self._sum = F.shortcut_add(main, short)
        return F.relu(self._sum)

    def backward(self, grad):
        grad = F.relu_backward(grad, self._sum)
        gx = self.conv1.backward(self.conv2.backward(grad))
        gx = gx + F.avg_pool2_backward(self.short.backward(grad))
        return gx

    def describe(self, in_shape, prefix=""):
        c, h, w = in_shape
        r1, s = self.conv1.describe(in_shape, prefix + "conv1.")
        r2, s = self.conv2.describe(s, prefix + "conv2.")
        pooled = (c, h // 2, w // 2)
        pool = [LayerSpec(prefix + "pool", "pool", in_shape, pooled, 2)]
        r3, s2 = self.short.describe(pooled, prefix + "short.")
        add = [LayerSpec(prefix + "add", "add", s, s)]
        return r1 + r2 + pool + r3 + add, s
