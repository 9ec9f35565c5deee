"""Forward and backward passes for the layer types used by the networks.

Activations are NCHW numpy arrays, filters are (out, in, kh, kw). Every
function keeps the dtype of its inputs, so models run in float32 while the
gradient checker can push float64 through the very same code.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError, ShapeError

TRAIN = "train"
INFER = "infer"


def output_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    """Spatial output size of a convolution or pooling window sweep."""
    return (size + 2 * pad - kernel) // stride + 1


def _windows(x, kh, kw, stride):
    # (N, C, Ho, Wo, kh, kw) strided view, no copy
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _pad(x, pad, value=0.0):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


# -- convolution ------------------------------------------------------------


def conv_forward(x, filters, bias, stride=1, pad=0):
    """Cross-correlate a batch with a filter bank and add per-channel bias.

    ``out[n,o,i,j] = bias[o] + sum_{c,u,v} x[n,c,i*s+u-pad,j*s+v-pad] * filters[o,c,u,v]``
    with zeros outside the image.
    """
    if x.ndim != 4 or filters.ndim != 4:
        raise ShapeError(f"conv expects 4-d input and filters, got {x.shape} and {filters.shape}")
    if x.shape[1] != filters.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, filters expect {filters.shape[1]}")
    if bias.shape != (filters.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {filters.shape[0]} filters")
    kh, kw = filters.shape[2:]
    ho = output_extent(x.shape[2], kh, stride, pad)
    wo = output_extent(x.shape[3], kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"filter {kh}x{kw} does not fit input {x.shape[2]}x{x.shape[3]} with pad {pad}")
    win = _windows(_pad(x, pad), kh, kw, stride)[:, :, :ho, :wo]
    out = np.tensordot(win, filters, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + bias[None, :, None, None]
    return np.ascontiguousarray(out, dtype=np.result_type(x, filters))


def conv_input_grad(grad_out, filters, input_hw, stride=1, pad=0):
    """Adjoint of :func:`conv_forward` w.r.t. its input (a transposed convolution).

    With stride 1 and no padding this is the full convolution of each output
    map with its filter, summed over maps.
    """
    n = grad_out.shape[0]
    o, c, kh, kw = filters.shape
    h, w = input_hw
    ho, wo = grad_out.shape[2:]
    # cols[n, i, j, c, u, v] is the gradient reaching padded input position (i*s+u, j*s+v)
    cols = np.tensordot(grad_out, filters, axes=([1], [0]))
    gpad = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for u in range(kh):
        for v in range(kw):
            gpad[:, :, u:u + stride * (ho - 1) + 1:stride, v:v + stride * (wo - 1) + 1:stride] += (
                cols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
            )
    return np.ascontiguousarray(gpad[:, :, pad:pad + h, pad:pad + w]) if pad else gpad


def conv_filter_grad(x, grad_out, kernel_hw, stride=1, pad=0):
    """Adjoint of :func:`conv_forward` w.r.t. the filters: input/output correlations."""
    kh, kw = kernel_hw
    ho, wo = grad_out.shape[2:]
    win = _windows(_pad(x, pad), kh, kw, stride)[:, :, :ho, :wo]
    return np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))


def conv_backward(x, filters, grad_out, stride=1, pad=0):
    """Gradients of :func:`conv_forward` w.r.t. input, filters and bias."""
    n, c, h, w = x.shape
    o, _, kh, kw = filters.shape
    if grad_out.shape != (n, o, output_extent(h, kh, stride, pad), output_extent(w, kw, stride, pad)):
        raise ShapeError(f"grad_out shape {grad_out.shape} inconsistent with conv geometry")
    grad_x = conv_input_grad(grad_out, filters, (h, w), stride, pad)
    grad_filters = conv_filter_grad(x, grad_out, (kh, kw), stride, pad)
    return grad_x, grad_filters, grad_out.sum(axis=(0, 2, 3))


# -- ReLU ---------------------------------------------------------------------


def relu_forward(x):
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x, grad_out):
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


# -- pooling ------------------------------------------------------------------


class PoolIndices(NamedTuple):
    """Selected position per pooling window plus the geometry to undo it.

    ``flat`` holds the row-major offset inside the window (0 .. window**2 - 1).
    """

    flat: np.ndarray
    input_shape: tuple
    window: int
    stride: int
    pad: int


def _pool_windows(x, window, stride, pad, fill):
    ho = output_extent(x.shape[2], window, stride, pad)
    wo = output_extent(x.shape[3], window, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"pool window {window} does not fit input {x.shape[2]}x{x.shape[3]}")
    win = _windows(_pad(x, pad, fill), window, window, stride)[:, :, :ho, :wo]
    return win.reshape(*win.shape[:4], window * window)


def maxpool_forward(x, window, stride, pad=0):
    """Max over each window; ties resolve to the first position in row-major order."""
    win = _pool_windows(x, window, stride, pad, -np.inf)
    flat = win.argmax(axis=-1)
    out = np.take_along_axis(win, flat[..., None], axis=-1)[..., 0]
    return out, PoolIndices(flat, x.shape, window, stride, pad)


def maxpool_backward(indices: PoolIndices, grad_out):
    """Route each output gradient to its recorded input position, summing overlaps."""
    n, c, h, w = indices.input_shape
    k, s, p = indices.window, indices.stride, indices.pad
    ho, wo = grad_out.shape[2:]
    gpad = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=grad_out.dtype)
    for u in range(k):
        for v in range(k):
            routed = np.where(indices.flat == u * k + v, grad_out, 0)
            gpad[:, :, u:u + s * (ho - 1) + 1:s, v:v + s * (wo - 1) + 1:s] += routed
    return np.ascontiguousarray(gpad[:, :, p:p + h, p:p + w]) if p else gpad


def _region_probs(win):
    total = win.sum(axis=-1, keepdims=True)
    uniform = np.full_like(win, 1.0 / win.shape[-1])
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = np.where(total > 0, win / np.where(total > 0, total, 1), uniform)
    return probs


def stochpool_forward(x, window, stride, rng, mode=TRAIN, pad=0):
    """Stochastic pooling over non-negative activations.

    In train mode one activation per region is drawn with probability
    proportional to its value (uniformly if the region is all zero) and its
    position recorded. In infer mode the output is the probability-weighted
    average ``sum(p_i * a_i)`` and no indices are returned.
    """
    if (x < 0).any():
        raise ContractError("stochastic pooling requires non-negative activations")
    win = _pool_windows(x, window, stride, pad, 0.0)
    probs = _region_probs(win)
    if mode == INFER:
        return (probs * win).sum(axis=-1).astype(x.dtype, copy=False), None
    if mode != TRAIN:
        raise ValueError(f"unknown mode {mode!r}")
    u = rng.random(win.shape[:4])
    cdf = np.cumsum(probs, axis=-1)
    flat = np.minimum((cdf <= u[..., None]).sum(axis=-1), window * window - 1)
    out = np.take_along_axis(win, flat[..., None], axis=-1)[..., 0]
    return out, PoolIndices(flat, x.shape, window, stride, pad)


def stochpool_backward(indices: PoolIndices, grad_out):
    """Train-mode backward: gradient flows only to the sampled activation."""
    return maxpool_backward(indices, grad_out)


def stochpool_infer_backward(x, window, stride, grad_out, pad=0):
    """Gradient of the infer-mode output ``sum(a_i^2) / sum(a_j)`` per region."""
    win = _pool_windows(x, window, stride, pad, 0.0)
    total = win.sum(axis=-1, keepdims=True)
    sq = (win * win).sum(axis=-1, keepdims=True)
    safe = np.where(total > 0, total, 1)
    # d/da_i [S2/S1] = 2 a_i / S1 - S2 / S1^2 ; an all-zero region has zero output slope
    local = np.where(total > 0, 2 * win / safe - sq / (safe * safe), 0).astype(grad_out.dtype)
    n, c, h, w = x.shape
    ho, wo = grad_out.shape[2:]
    gpad = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=grad_out.dtype)
    for u in range(window):
        for v in range(window):
            gpad[:, :, u:u + stride * (ho - 1) + 1:stride, v:v + stride * (wo - 1) + 1:stride] += (
                grad_out * local[..., u * window + v]
            )
    return np.ascontiguousarray(gpad[:, :, pad:pad + h, pad:pad + w]) if pad else gpad


# -- dropout ------------------------------------------------------------------


def dropout_forward(x, p, rng, mode=TRAIN):
    """Zero each element with probability ``p`` in training; scale by ``1 - p`` at inference.

    Returns the output and the multiplier used, which ``dropout_backward``
    applies to the incoming gradient.
    """
    if not 0 <= p < 1:
        raise ContractError(f"dropout probability must lie in [0, 1), got {p}")
    if mode == INFER:
        scale = x.dtype.type(1 - p)
        return x * scale, scale
    if mode != TRAIN:
        raise ValueError(f"unknown mode {mode!r}")
    mask = (rng.random(x.shape) >= p).astype(x.dtype)
    return x * mask, mask


def dropout_backward(mask, grad_out):
    return grad_out * mask


# -- fully connected ------------------------------------------------------------


def fc_forward(x, weights, bias):
    """``out = x @ W.T + b`` with ``x`` flattened to (batch, in_units)."""
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != weights.shape[1]:
        raise ShapeError(f"fc expects {weights.shape[1]} inputs, got {flat.shape[1]}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weights.shape[0]} outputs")
    return flat @ weights.T + bias


def fc_backward(x, weights, grad_out):
    flat = x.reshape(x.shape[0], -1)
    grad_x = (grad_out @ weights).reshape(x.shape)
    return grad_x, grad_out.T @ flat, grad_out.sum(axis=0)


# -- softmax / loss -----------------------------------------------------------


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, labels):
    """Softmax probabilities, cross-entropy loss and its gradient.

    Accepts a single logit vector with an integer label, or a (batch, classes)
    matrix with a label array; for batches the loss is the batch mean and the
    gradient is scaled accordingly.
    """
    single = logits.ndim == 1
    logits2 = logits[None] if single else logits
    labels = np.atleast_1d(np.asarray(labels))
    classes = logits2.shape[1]
    if labels.shape != (logits2.shape[0],):
        raise ShapeError(f"{labels.shape[0]} labels for {logits2.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ContractError(f"label out of range [0, {classes})")
    probs = softmax(logits2)
    rows = np.arange(logits2.shape[0])
    # log-softmax directly, so an underflowed probability cannot produce inf
    z = logits2 - logits2.max(axis=-1, keepdims=True)
    logp = z[rows, labels] - np.log(np.exp(z).sum(axis=-1))
    loss = float(-logp.mean())
    grad = probs.copy()
    grad[rows, labels] -= 1
    grad /= logits2.shape[0]
    if single:
        return probs[0], loss, grad[0]
    return probs, loss, grad
