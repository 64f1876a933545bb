"""Differentiable neural-network primitives built on :class:`Tensor`."""
import math

import numpy as np

from fimp import kernels
from fimp.errors import DimensionError, VocabularyError
from fimp.numerics.tensor import Tensor, as_tensor, concat, mean, unbroadcast

_GELU_C = math.sqrt(2.0 / math.pi)


def relu(x):
    out = np.maximum(x.data, 0)
    return Tensor._result(out, (x,), lambda g: (g * (x.data > 0),))


def leaky_relu(x, slope=0.2):
    out = np.where(x.data > 0, x.data, slope * x.data).astype(x.dtype, copy=False)
    return Tensor._result(out, (x,), lambda g: (np.where(x.data > 0, g, slope * g),))


def sigmoid(x):
    out = 1.0 / (1.0 + np.exp(-x.data))
    return Tensor._result(out, (x,), lambda g: (g * out * (1.0 - out),))


def gelu(x):
    """Tanh approximation of the Gaussian error linear unit."""
    u = x.data
    inner = _GELU_C * (u + 0.044715 * (u * u * u))
    t = np.tanh(inner)
    out = 0.5 * u * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * u * u)
        return (g * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dinner),)

    return Tensor._result(out, (x,), backward)


def softmax_rows(x):
    """Softmax over the last axis, shifted by the row max."""
    z = x.data - x.data.max(axis=-1, keepdims=True) if x.data.size else x.data
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._result(out, (x,), backward)


def log_softmax(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return Tensor._result(out, (x,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {width}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd
    out = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._result(out, (x, gain, bias), backward)


def dropout(x, rate, rng, training=True):
    """Inverted dropout; the identity when not training or ``rate == 0``."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    keep = (rng.uniform(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return Tensor._result(x.data * keep, (x,), lambda g: (g * keep,))


def concat_last_axis(tensors):
    return concat(tensors, axis=-1)


def mean_axis(x, axis, keepdims=False):
    return mean(x, axis, keepdims)


def take_rows(x, index):
    """Gather ``x[index]`` along axis 0.

    The backward scatter-add groups positions by row and reduces them with
    the segment kernel in ascending position order, so it is deterministic.
    """
    index = np.asarray(index, dtype=np.int64)
    out = x.data[index]

    def backward(g):
        order, indptr = kernels.grouping(index.ravel(), x.shape[0])
        flat = g.reshape((index.size,) + x.shape[1:])
        return (kernels.segment_sum(flat, order, indptr),)

    return Tensor._result(out, (x,), backward)


def embedding_lookup(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise VocabularyError(f"ids must lie in [0, {table.shape[0]}), got range "
                              f"[{ids.min()}, {ids.max()}]")
    return take_rows(table, ids)


def segment_sum(values, order, indptr):
    """Reduce rows of ``values`` into ``len(indptr) - 1`` segments.

    Within a segment rows are added in the sequence given by ``order``; see
    :func:`fimp.kernels.segment_sum`.
    """
    order = np.asarray(order, dtype=np.int64)
    indptr = np.asarray(indptr, dtype=np.int64)
    out = kernels.segment_sum(values.data, order, indptr)
    counts = np.diff(indptr)
    seg_of_row = np.empty(len(order), dtype=np.int64)
    seg_of_row[order] = np.repeat(np.arange(len(counts)), counts)

    def backward(g):
        return (g[seg_of_row],)

    return Tensor._result(out, (values,), backward)


def segment_mean(values, order, indptr):
    """Segment average; empty segments yield zero rows."""
    total = segment_sum(values, order, indptr)
    counts = np.maximum(np.diff(np.asarray(indptr)), 1).astype(values.dtype)
    shape = (len(counts),) + (1,) * (values.ndim - 1)
    return total / counts.reshape(shape)


def segment_softmax(scores, order, indptr):
    """Softmax of per-row scores within each segment (shifted by the segment max)."""
    order = np.asarray(order, dtype=np.int64)
    indptr = np.asarray(indptr, dtype=np.int64)
    counts = np.diff(indptr)
    seg_of_row = np.empty(len(order), dtype=np.int64)
    seg_of_row[order] = np.repeat(np.arange(len(counts)), counts)
    shift = kernels.segment_max(scores.data, order, indptr)[seg_of_row]
    e = (scores - Tensor(shift, dtype=scores.dtype)).exp()
    denom = take_rows(segment_sum(e, order, indptr), seg_of_row)
    return e / denom


def mse(pred, target, weight=None):
    """Mean squared error; with ``weight`` (0/1 mask) only weighted entries count."""
    target = as_tensor(target, dtype=pred.dtype)
    diff = pred - target
    sq = diff * diff
    if weight is None:
        return sq.mean()
    weight = np.broadcast_to(np.asarray(weight, dtype=pred.dtype), pred.shape)
    denom = weight.sum()
    if denom == 0:
        return (sq * 0.0).sum()
    return (sq * weight).sum() / float(denom)


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under softmax ``logits``."""
    targets = np.asarray(targets, dtype=np.int64)
    logp = log_softmax(logits)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(targets)), targets] = 1.0
    return -(logp * onehot).sum() / float(len(targets))


def linear(x, weight, bias=None):
    out = x @ weight
    return out if bias is None else out + bias


__all__ = [
    "relu", "leaky_relu", "sigmoid", "gelu", "softmax_rows", "log_softmax", "layer_norm",
    "dropout", "concat_last_axis", "mean_axis", "take_rows", "embedding_lookup",
    "segment_sum", "segment_mean", "segment_softmax", "mse", "cross_entropy", "linear",
    "unbroadcast",
]
