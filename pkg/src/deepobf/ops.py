"""Differentiable layer operations.

Every function takes and returns :class:`~deepobf.tensor.Tensor` objects (plain
arrays are wrapped) and registers a backward closure when an input requires
gradients. Images are laid out as ``(batch, channels, height, width)``.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Tensor, accumulate, as_tensor, result


def _out_extent(size: int, kernel: int, stride: int, padding: int, what: str) -> int:
    if stride < 1 or padding < 0 or kernel < 1:
        raise ShapeError(f"{what}: invalid kernel={kernel} stride={stride} padding={padding}")
    padded = size + 2 * padding
    if kernel > padded:
        raise ShapeError(f"{what}: window {kernel} larger than padded input {padded}")
    return (padded - kernel) // stride + 1


def _require_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what}: expected a 4-D (batch, channels, height, width) tensor, got shape {x.shape}")


# --- convolution ---------------------------------------------------------------


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with ``weight`` of shape (out, in, kh, kw) plus per-channel bias."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    _require_4d(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: kernels must be 4-D (out, in, kh, kw), got {weight.shape}")
    b, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has {c} channels but kernels expect {ci}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {co} output channels")
    oh = _out_extent(h, kh, stride, padding, "conv2d")
    ow = _out_extent(w, kw, stride, padding, "conv2d")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)
    wmat = weight.data.reshape(co, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(b, oh, ow, co).transpose(0, 3, 1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: np.ndarray) -> None:
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, co)
        if weight.requires_grad:
            accumulate(weight, (gmat.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            accumulate(bias, gmat.sum(axis=0))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(b, oh, ow, c, kh, kw)
            dxp = np.zeros(xp.shape, dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            accumulate(x, dxp[:, :, padding:padding + h, padding:padding + w])

    return result(out, parents, backward)


# --- normalisation -------------------------------------------------------------


def batchnorm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel batch normalisation over (batch, height, width).

    In training mode the batch's biased variance is used and, when
    ``update_stats`` is set, the running arrays are updated in place.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _require_4d(x, "batchnorm")
    c = x.shape[1]
    for name, arr in (("scale", gamma.data), ("shift", beta.data), ("running mean", running_mean), ("running var", running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"batchnorm: {name} has shape {arr.shape}, input has {c} channels")
    if eps <= 0:
        raise ShapeError("batchnorm: epsilon must be positive")
    axes = (0, 2, 3)
    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if n == 0:
            raise ShapeError("batchnorm: empty batch in training mode")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * var
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    xhat = (x.data - mean.astype(x.data.dtype)[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g: np.ndarray) -> None:
        if gamma.requires_grad:
            accumulate(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            accumulate(beta, g.sum(axis=axes))
        if x.requires_grad:
            gx = g * gamma.data[None, :, None, None]
            if training:
                gx = (gx - gx.mean(axis=axes, keepdims=True) - xhat * (gx * xhat).mean(axis=axes, keepdims=True))
            accumulate(x, gx * inv_std[None, :, None, None])

    return result(out, (x, gamma, beta), backward)


# --- pointwise and pooling ------------------------------------------------------


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.data.dtype)

    def backward(g: np.ndarray) -> None:
        accumulate(x, g * mask)

    return result(out, (x,), backward)


def maxpool2d(x, kernel: int, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    """Window maximum; ties route the gradient to the first maximum in row-major scan order."""
    x = as_tensor(x)
    _require_4d(x, "maxpool2d")
    stride = kernel if stride is None else stride
    b, c, h, w = x.shape
    oh = _out_extent(h, kernel, stride, padding, "maxpool2d")
    ow = _out_extent(w, kernel, stride, padding, "maxpool2d")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(b, c, oh, ow, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray) -> None:
        rows = np.arange(oh)[None, None, :, None] * stride + arg // kernel
        cols = np.arange(ow)[None, None, None, :] * stride + arg % kernel
        bi = np.arange(b)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        dxp = np.zeros(xp.shape, dtype=x.data.dtype)
        np.add.at(dxp, (np.broadcast_to(bi, arg.shape), np.broadcast_to(ci, arg.shape), rows, cols), g)
        accumulate(x, dxp[:, :, padding:padding + h, padding:padding + w])

    return result(np.ascontiguousarray(out), (x,), backward)


def avgpool2d(x, kernel: int, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    """Window mean; zero padding counts toward the divisor."""
    x = as_tensor(x)
    _require_4d(x, "avgpool2d")
    stride = kernel if stride is None else stride
    b, c, h, w = x.shape
    oh = _out_extent(h, kernel, stride, padding, "avgpool2d")
    ow = _out_extent(w, kernel, stride, padding, "avgpool2d")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    out = win.mean(axis=(-2, -1)).astype(x.data.dtype)
    area = kernel * kernel

    def backward(g: np.ndarray) -> None:
        dxp = np.zeros(xp.shape, dtype=x.data.dtype)
        share = g / area
        for i in range(kernel):
            for j in range(kernel):
                dxp[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += share
        accumulate(x, dxp[:, :, padding:padding + h, padding:padding + w])

    return result(np.ascontiguousarray(out), (x,), backward)


def global_avgpool(x) -> Tensor:
    """Mean over the spatial extent, keeping a 1x1 map: (b, c, h, w) -> (b, c, 1, 1)."""
    x = as_tensor(x)
    _require_4d(x, "global_avgpool")
    h, w = x.shape[2], x.shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True).astype(x.data.dtype)

    def backward(g: np.ndarray) -> None:
        accumulate(x, np.broadcast_to(g / (h * w), x.shape))

    return result(out, (x,), backward)


def flatten(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = x.data.reshape(shape[0], -1)

    def backward(g: np.ndarray) -> None:
        accumulate(x, g.reshape(shape))

    return result(out, (x,), backward)


# --- merges ---------------------------------------------------------------------


def concat_channels(xs: Sequence) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise ShapeError("concat_channels: no inputs")
    for t in xs:
        _require_4d(t, "concat_channels")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: extents {t.shape} and {ref} differ outside the channel axis")
    if len(xs) == 1:
        return xs[0]
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(g: np.ndarray) -> None:
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            accumulate(t, g[:, lo:hi])

    return result(out, tuple(xs), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: extents {a.shape} and {b.shape} differ")
    out = a.data + b.data

    def backward(g: np.ndarray) -> None:
        accumulate(a, g)
        accumulate(b, g)

    return result(out, (a, b), backward)


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    out = x.data * factor

    def backward(g: np.ndarray) -> None:
        accumulate(x, g * factor)

    return result(out, (x,), backward)


# --- classifier -----------------------------------------------------------------


def linear(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with weight shaped (classes, features)."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear: expected 2-D input and weights, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: {x.shape[1]} features but weights expect {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match {weight.shape[0]} classes")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            accumulate(x, g @ weight.data)
        if weight.requires_grad:
            accumulate(weight, g.T @ x.data)
        if bias is not None and bias.requires_grad:
            accumulate(bias, g.sum(axis=0))

    return result(out, parents, backward)


# --- losses ---------------------------------------------------------------------


def _check_labels(labels: np.ndarray, n: int, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ShapeError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits) -> Tensor:
    logits = as_tensor(logits)
    p = np.exp(_log_softmax(logits.data))

    def backward(g: np.ndarray) -> None:
        accumulate(logits, p * (g - (g * p).sum(axis=1, keepdims=True)))

    return result(p, (logits,), backward)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean over samples of the negative log-probability of the true class."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross-entropy expects (batch, classes) logits, got {logits.shape}")
    n, k = logits.shape
    labels = _check_labels(labels, n, k)
    logp = _log_softmax(logits.data.astype(np.float64))
    loss = -logp[np.arange(n), labels].mean()

    def backward(g: np.ndarray) -> None:
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        accumulate(logits, d * (float(g) / n))

    return result(np.float64(loss), (logits,), backward)


def l1_loss(pred, target) -> Tensor:
    """Mean absolute difference over all elements."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: extents {pred.shape} and {target.shape} differ")
    diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
    loss = np.abs(diff).mean() if diff.size else np.float64(0.0)
    sign = np.sign(diff)

    def backward(g: np.ndarray) -> None:
        d = sign * (float(g) / diff.size)
        accumulate(pred, d)
        accumulate(target, -d)

    return result(np.float64(loss), (pred, target), backward)


def one_hot(labels, classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out
