"""Stateless forward/backward kernels on ``N x C x H x W`` arrays."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _windows(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # N, C, oh, ow, k, k


def _check_conv(x: np.ndarray, weight: np.ndarray, groups: int) -> None:
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"expected 4-d input and weight, got {x.shape} and {weight.shape}")
    cin, cout = x.shape[1], weight.shape[0]
    if cin % groups or cout % groups:
        raise ValueError(f"groups={groups} must divide Cin={cin} and Cout={cout}")
    if weight.shape[1] != cin // groups:
        raise ValueError(f"weight {weight.shape} expects {weight.shape[1] * groups} input channels, got {cin}")
    if weight.shape[2] != weight.shape[3]:
        raise ValueError("only square kernels are supported")


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if not padding:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _offset(x: np.ndarray, i: int, j: int, stride: int, oh: int, ow: int) -> np.ndarray:
    return x[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride]


def _is_depthwise(cin: int, cout: int, groups: int) -> bool:
    return groups == cin == cout and groups > 1


def conv2d_forward(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> np.ndarray:
    """Cross-correlation; ``groups == Cin`` gives a depthwise convolution."""
    _check_conv(x, weight, groups)
    n, cin, H, W = x.shape
    cout, cg, k, _ = weight.shape
    if min(H, W) + 2 * padding < k:
        raise ValueError(f"kernel {k} larger than padded input {x.shape[2:]}")
    oh, ow = conv_output_size(H, k, stride, padding), conv_output_size(W, k, stride, padding)
    if k == 1 and padding == 0 and groups == 1:
        xs = np.ascontiguousarray(x[:, :, ::stride, ::stride]).reshape(n, cin, oh * ow)
        out = np.matmul(weight[:, :, 0, 0], xs).reshape(n, cout, oh, ow)
    elif groups == 1:
        win = _windows(x, k, stride, padding)
        out = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    elif _is_depthwise(cin, cout, groups):
        xp = _pad(x, padding)
        out = np.zeros((n, cout, oh, ow), dtype=np.result_type(x, weight))
        for i in range(k):
            for j in range(k):
                out += _offset(xp, i, j, stride, oh, ow) * weight[None, :, 0, i, j, None, None]
    else:
        og = cout // groups
        parts = []
        for g in range(groups):
            xg = x[:, g * cg : (g + 1) * cg]
            parts.append(conv2d_forward(xg, weight[g * og : (g + 1) * og], None, stride, padding, 1))
        out = np.concatenate(parts, axis=1)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return np.ascontiguousarray(out, dtype=x.dtype)


def conv2d_backward(grad_out, x, weight, stride: int = 1, padding: int = 0, groups: int = 1, with_bias: bool = True):
    """Gradients of :func:`conv2d_forward` with respect to input, weight and bias."""
    _check_conv(x, weight, groups)
    n, cin, H, W = x.shape
    cout, cg, k, _ = weight.shape
    oh, ow = conv_output_size(H, k, stride, padding), conv_output_size(W, k, stride, padding)
    if grad_out.shape != (n, cout, oh, ow):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match forward output {(n, cout, oh, ow)}")
    grad_b = grad_out.sum(axis=(0, 2, 3)) if with_bias else None
    go = np.ascontiguousarray(grad_out)

    if k == 1 and padding == 0 and groups == 1:
        xs = np.ascontiguousarray(x[:, :, ::stride, ::stride]).reshape(n, cin, oh * ow)
        g2 = go.reshape(n, cout, oh * ow)
        grad_w = np.matmul(g2, xs.transpose(0, 2, 1)).sum(axis=0)[:, :, None, None]
        gxs = np.matmul(weight[:, :, 0, 0].T, g2).reshape(n, cin, oh, ow)
        if stride == 1:
            grad_x = gxs
        else:
            grad_x = np.zeros_like(x)
            grad_x[:, :, ::stride, ::stride] = gxs
        return np.ascontiguousarray(grad_x, dtype=x.dtype), grad_w.astype(x.dtype), grad_b

    if groups != 1 and not _is_depthwise(cin, cout, groups):
        og = cout // groups
        gx, gw = np.zeros_like(x), np.zeros_like(weight)
        for g in range(groups):
            xs = slice(g * cg, (g + 1) * cg)
            os_ = slice(g * og, (g + 1) * og)
            gx[:, xs], gw[os_], _ = conv2d_backward(go[:, os_], x[:, xs], weight[os_], stride, padding, 1, False)
        return gx, gw, grad_b

    xp = _pad(x, padding)
    padded = np.zeros(xp.shape, dtype=np.result_type(x, grad_out))
    grad_w = np.zeros(weight.shape, dtype=np.result_type(x, grad_out))
    if groups == 1:
        win = _windows(x, k, stride, padding)
        grad_w[:] = np.tensordot(go, win, axes=([0, 2, 3], [0, 2, 3]))
        g2 = go.reshape(n, cout, oh * ow)
        for i in range(k):
            for j in range(k):
                contrib = np.matmul(weight[:, :, i, j].T, g2).reshape(n, cin, oh, ow)
                _offset(padded, i, j, stride, oh, ow)[...] += contrib
    else:
        for i in range(k):
            for j in range(k):
                xs = _offset(xp, i, j, stride, oh, ow)
                grad_w[:, 0, i, j] = np.einsum("nchw,nchw->c", go, xs)
                _offset(padded, i, j, stride, oh, ow)[...] += go * weight[None, :, 0, i, j, None, None]
    grad_x = padded[:, :, padding : padding + H, padding : padding + W]
    return np.ascontiguousarray(grad_x, dtype=x.dtype), grad_w.astype(x.dtype), grad_b


def batchnorm_forward(x, gamma, beta, running_mean, running_var, training: bool, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalization.

    In training mode the running statistics are updated in place
    (``running = momentum * running + (1 - momentum) * batch``).
    Returns ``(out, cache)``.
    """
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch norm in training mode needs a batch of at least 2")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out.astype(x.dtype, copy=False), (xhat, inv_std, gamma, training)


def batchnorm_backward(grad_out, cache):
    """Returns ``(grad_x, grad_gamma, grad_beta)``."""
    xhat, inv_std, gamma, training = cache
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    g = grad_out * gamma[None, :, None, None]
    if training:
        m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
        mean_g = g.sum(axis=(0, 2, 3)) / m
        mean_gx = (g * xhat).sum(axis=(0, 2, 3)) / m
        grad_x = (g - mean_g[None, :, None, None] - xhat * mean_gx[None, :, None, None]) * inv_std[None, :, None, None]
    else:
        grad_x = g * inv_std[None, :, None, None]
    return grad_x.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def upsample_nearest(x, factor: int = 2):
    if factor < 2 or int(factor) != factor:
        raise ValueError(f"upsample factor must be an integer >= 2, got {factor}")
    return x.repeat(factor, axis=2).repeat(factor, axis=3)


def upsample_nearest_backward(grad_out, factor: int = 2):
    n, c, h, w = grad_out.shape
    return grad_out.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))


def shortcut_add(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shortcut operands differ in shape: {a.shape} vs {b.shape}")
    return a + b


def avg_pool2(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"2x2 average pooling needs even extents, got {h}x{w}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avg_pool2_backward(grad_out):
    return upsample_nearest(grad_out, 2) * 0.25
