"""Differentiable layer operations on :class:`Tensor`."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import _kernels
from ..errors import DimensionError
from ._tensor import Tensor


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """Grouped 2-d cross-correlation of an NCHW batch.

    ``weight`` has shape (F, C/groups, kh, kw). Output extents follow
    ``floor((in + 2*pad - k) / stride) + 1``.
    """
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, cg, kh, kw = weight.shape
    if groups < 1 or c % groups or f % groups:
        raise DimensionError(f"channels {c} and filters {f} must be divisible by groups={groups}")
    if cg * groups != c:
        raise DimensionError(f"weight expects {cg * groups} input channels, input has {c}")
    if bias is not None and bias.shape != (f,):
        raise DimensionError(f"bias shape {bias.shape} does not match {f} filters")
    oh = conv_output_size(h, kh, sh, ph)
    ow = conv_output_size(w, kw, sw, pw)
    if oh < 1 or ow < 1:
        raise DimensionError(f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {ph},{pw}")

    xd = x.data
    if ph or pw:
        xd = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    hp, wp = xd.shape[2], xd.shape[3]
    cols = _kernels.im2col(np.ascontiguousarray(xd), kh, kw, sh, sw, oh, ow)
    k = cg * kh * kw
    cols_g = cols.reshape(groups, k, n * oh * ow)
    w_g = weight.data.reshape(groups, f // groups, k)
    out = np.matmul(w_g, cols_g).reshape(f, n, oh, ow).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data.reshape(1, f, 1, 1)

    def backward(g):
        g_g = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(groups, f // groups, n * oh * ow)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.matmul(g_g, cols_g.transpose(0, 2, 1)).reshape(weight.shape)
        if x.requires_grad:
            dcols = np.matmul(w_g.transpose(0, 2, 1), g_g).reshape(c * kh * kw, n * oh * ow)
            gxp = _kernels.col2im(np.ascontiguousarray(dcols), n, c, hp, wp, kh, kw, sh, sw, oh, ow)
            gx = gxp[:, :, ph : ph + h, pw : pw + w] if (ph or pw) else gxp
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._wrap(out, parents, backward)


class BatchNormState:
    """Affine parameters, running statistics and the last batch statistics of one BN layer."""

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum
        self.batch_mean = None
        self.batch_std = None

    @property
    def channels(self):
        return self.running_mean.shape[0]

    @property
    def running_std(self):
        return np.sqrt(self.running_var)


def batch_norm(x, state, training=False, momentum=None):
    """Per-channel normalisation of an NCHW batch.

    In training mode the batch statistics (population variance) normalise the
    input, are stored on ``state.batch_mean``/``state.batch_std``, and update the
    running buffers with ``momentum`` (0 freezes them). Eval mode uses the
    running buffers.
    """
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise DimensionError(f"batch_norm over {state.channels} channels got input {x.shape}")
    momentum = state.momentum if momentum is None else momentum
    xd = x.data
    if training:
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        state.batch_mean = mean
        state.batch_std = np.sqrt(var)
        if momentum:
            state.running_mean = ((1 - momentum) * state.running_mean + momentum * mean).astype(xd.dtype)
            state.running_var = ((1 - momentum) * state.running_var + momentum * var).astype(xd.dtype)
    else:
        mean, var = state.running_mean, state.running_var
    inv = (1.0 / np.sqrt(var + state.eps)).astype(xd.dtype).reshape(1, -1, 1, 1)
    xhat = (xd - mean.reshape(1, -1, 1, 1)) * inv
    gamma, beta = state.gamma, state.beta
    out = xhat * gamma.data.reshape(1, -1, 1, 1) + beta.data.reshape(1, -1, 1, 1)
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(1, -1, 1, 1)
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = inv * (dxhat - s1 / m - xhat * s2 / m)
            else:
                gx = dxhat * inv
        return gx, ggamma, gbeta

    return Tensor._wrap(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward)


def relu(x):
    return x.relu()


def linear(x, weight, bias=None):
    out = x @ weight.T
    return out if bias is None else out + bias


def flatten(x):
    return x.reshape(x.shape[0], -1)


def avg_pool2d(x, kernel, stride=None):
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    n, c, h, w = x.shape
    if (kh, kw) == (h, w):
        return x.mean(axis=(2, 3), keepdims=True)
    oh, ow = conv_output_size(h, kh, sh, 0), conv_output_size(w, kw, sw, 0)
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :oh, :ow]
    out = win.mean(axis=(4, 5))
    scale = 1.0 / (kh * kw)

    def backward(g):
        gx = np.zeros_like(x.data)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw] += g * scale
        return (gx,)

    return Tensor._wrap(np.ascontiguousarray(out), (x,), backward)


def max_pool2d(x, kernel, stride=None):
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    n, c, h, w = x.shape
    oh, ow = conv_output_size(h, kh, sh, 0), conv_output_size(w, kw, sw, 0)
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :oh, :ow]
    flat = win.reshape(n, c, oh, ow, kh * kw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        di, dj = np.divmod(arg, kw)
        nn, cc, yy, xx = np.indices(arg.shape)
        np.add.at(gx, (nn, cc, yy * sh + di, xx * sw + dj), g)
        return (gx,)

    return Tensor._wrap(np.ascontiguousarray(out), (x,), backward)


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._wrap(out, (x,), backward)


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._wrap(out, (x,), backward)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (N, classes)."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(logits, axis=1)
    picked = logp[(np.arange(labels.shape[0]), labels)]
    return -picked.mean()


def mse_loss(a, b):
    d = a - b
    return (d * d).mean()


def kl_div(teacher_logits, student_logits, temperature):
    """Batch-mean KL(softmax(teacher/T) || softmax(student/T))."""
    inv_t = 1.0 / temperature
    log_p = log_softmax(teacher_logits * inv_t, axis=1)
    log_q = log_softmax(student_logits * inv_t, axis=1)
    return (log_p.exp() * (log_p - log_q)).sum(axis=1).mean()


def gumbel_softmax(logits, temperature, rng):
    """softmax((logits + Gumbel noise) / temperature), differentiable in ``logits``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    noise = rng.gumbel(size=logits.shape).astype(logits.dtype)
    return softmax((logits + noise) * (1.0 / temperature), axis=-1)
