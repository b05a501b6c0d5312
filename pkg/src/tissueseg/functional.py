"""Differentiable neural-network kernels built on :mod:`tissueseg.tensor`."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, add, as_tensor, make_result, matmul, note_branch

BN_MOMENTUM = 0.1
NORM_EPS = 1e-5
LOG_FLOOR = 1e-12


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    out = matmul(x, weight.T)
    return out if bias is None else add(out, bias)


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation of a B x C x H x W input with an O x C x k x k kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Cw, k, k2 = weight.shape
    if Cw != C:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d needs an odd square kernel, got {weight.shape}")
    if pad < 0 or stride < 1:
        raise ValueError("conv2d needs pad >= 0 and stride >= 1")
    Ho, Wo = _out_size(H, k, stride, pad), _out_size(W, k, stride, pad)
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d kernel {k} too large for input {x.shape} with pad {pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    if k == 1:
        cols = xp[:, :, ::stride, ::stride].transpose(0, 2, 3, 1).reshape(B * Ho * Wo, C)
    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    wmat = weight.data.reshape(O, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, k, k)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result(out, parents, bw, "conv2d")


def maxpool2d(x: Tensor, k: int, stride: int, pad: int = 0) -> Tensor:
    """Windowed max; the gradient goes to the first maximal element in row-major window order."""
    if x.ndim != 4:
        raise ValueError(f"maxpool2d expects a 4-d input, got {x.shape}")
    if pad >= k:
        raise ValueError("maxpool2d needs pad < k")
    B, C, H, W = x.shape
    Ho, Wo = _out_size(H, k, stride, pad), _out_size(W, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride].reshape(B, C, Ho, Wo, k * k)
    arg = win.argmax(axis=-1)
    note_branch(arg)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for o in range(k * k):
            i, j = divmod(o, k)
            dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += g * (arg == o)
        return (dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp,)

    return make_result(np.ascontiguousarray(out), (x,), bw, "maxpool2d")


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation weights (n_out x n_in), align-corners-false convention."""
    A = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        if i1 == i0:
            A[i, i0] = 1.0
        else:
            A[i, i0] = 1.0 - lam
            A[i, i1] = lam
    return A


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize the last two axes with bilinear interpolation (align_corners=False)."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"bilinear_upsample: target size must be positive, got {out_h}x{out_w}")
    H, W = x.shape[-2:]
    if out_h < H or out_w < W:
        raise ValueError(f"bilinear_upsample: target {out_h}x{out_w} smaller than input {H}x{W}")
    if (out_h, out_w) == (H, W):
        return make_result(x.data.copy(), (x,), lambda g: (g,), "bilinear_upsample")
    Ah = interp_matrix(H, out_h, x.dtype)
    Aw = interp_matrix(W, out_w, x.dtype)
    out = Ah @ x.data @ Aw.T

    def bw(g):
        return (Ah.T @ g @ Aw,)

    return make_result(out, (x,), bw, "bilinear_upsample")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map."""
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    n = d.shape[-1]
    lead = tuple(range(d.ndim - 1))

    def bw(g):
        dxhat = g * gamma.data if gamma is not None else g
        gx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    parents = [x] + [p for p in (gamma, beta) if p is not None]
    return make_result(out, parents, bw, "layer_norm")


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = NORM_EPS,
) -> Tensor:
    """Per-channel batch normalization of a B x C x H x W tensor.

    In training mode the batch statistics normalize the input and the
    running buffers are updated in place as ``run = (1 - m) * run + m * batch``
    (the variance buffer receives the unbiased batch variance).  In eval mode
    the running buffers are used.
    """
    d = x.data
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if training:
        n = d.shape[0] * d.shape[2] * d.shape[3]
        mu = d.mean(axis=axes)
        xc = d - mu.reshape(shape)
        var = (xc * xc).mean(axis=axes)
        unbiased = var * n / (n - 1) if n > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        n = None
        xc = d - running_mean.reshape(shape)
        var = running_var
    inv = (1.0 / np.sqrt(var + eps)).reshape(shape)
    xhat = xc * inv
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def bw(g):
        dxhat = g * gamma.data.reshape(shape)
        if training:
            gx = inv / n * (
                n * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = dxhat * inv
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_result(out, (x, gamma, beta), bw, "batch_norm2d")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), bw, "log_softmax")


def weighted_cross_entropy(logits: Tensor, labels: np.ndarray, weights: np.ndarray, floor: float = LOG_FLOOR) -> Tensor:
    """Mean over pixels of ``-w[y] * log(softmax(logits)[y])`` with a log floor.

    ``logits`` is (B, K, H, W) or (K, H, W); ``labels`` the matching integer map.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    squeeze = logits.ndim == 3
    z = logits.data[None] if squeeze else logits.data
    y = labels[None] if labels.ndim == 2 else labels
    if z.ndim != 4 or y.shape != (z.shape[0],) + z.shape[2:]:
        raise ValueError(f"weighted_cross_entropy: logits {logits.shape} do not match labels {labels.shape}")
    K = z.shape[1]
    if y.size and (y.min() < 0 or y.max() >= K):
        raise ValueError(f"weighted_cross_entropy: label values must lie in [0, {K}), got max {y.max()}")
    weights = np.asarray(weights, dtype=z.dtype)
    if weights.shape != (K,):
        raise ValueError(f"weighted_cross_entropy: expected {K} class weights, got {weights.shape}")
    N = y.size
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1, keepdims=True))
    logp = zs - lse
    logp_y = np.take_along_axis(logp, y[:, None], axis=1)[:, 0]
    log_floor = np.log(floor)
    clamped = logp_y < log_floor
    wy = weights[y]
    loss = -(wy * np.maximum(logp_y, log_floor)).sum() / N

    def bw(g):
        coef = (-g / N) * wy * (~clamped)
        p = np.exp(logp)
        grad = -p * coef[:, None]
        np.put_along_axis(grad, y[:, None], np.take_along_axis(grad, y[:, None], axis=1) + coef[:, None], axis=1)
        return (grad[0] if squeeze else grad,)

    return make_result(np.asarray(loss, dtype=z.dtype), (logits,), bw, "weighted_cross_entropy")
