"""Multi-head attention and pre-norm transformer blocks.

``cross_attend(dest, src)`` takes queries from ``dest`` and keys/values from
``src``; ``self_attend(x)`` is literally ``cross_attend(x, x)``, so the two
agree bitwise. All functions accept arbitrary leading batch axes.

Exactness notes. Projections use a row-wise product (see
:func:`fimp.numerics.tensor.matmul`), so permuting destination rows permutes
the output bitwise. Reductions over the key axis run in storage order; with
``canonical_keys=True`` keys are first sorted by content, which makes the
output bitwise invariant to any reordering of ``src`` rows.
"""
from __future__ import annotations

import math

import numpy as np

from fimp.errors import ConfigError, DimensionError
from fimp.numerics import (
    Module,
    dropout,
    gelu,
    init_weight,
    layer_norm,
    parameter,
    softmax_rows,
)
from fimp.numerics.tensor import getitem

SCALES = ("head", "model")


class AttentionParams(Module):
    """Query/key/value/output projections (each ``d x d``) split over ``num_heads`` heads.

    ``scale="head"`` divides logits by ``sqrt(head_dim)``; ``scale="model"``
    divides by ``sqrt(d)`` regardless of the head count.
    """

    def __init__(self, d, num_heads, rng, dropout=0.0, scale="head", canonical_keys=False):
        if d % num_heads:
            raise ConfigError(f"num_heads: {num_heads} does not divide d={d}")
        if scale not in SCALES:
            raise ConfigError(f"scale: expected one of {SCALES}, got {scale!r}")
        self.d = d
        self.num_heads = num_heads
        self.head_dim = d // num_heads
        self.dropout = dropout
        self.scale = scale
        self.canonical_keys = canonical_keys
        self.W_Q = init_weight(rng.child(0), d, d)
        self.W_K = init_weight(rng.child(1), d, d)
        self.W_V = init_weight(rng.child(2), d, d)
        self.W_O = init_weight(rng.child(3), d, d)
        self._rng = rng.child(4)

    @property
    def scaling(self):
        return 1.0 / math.sqrt(self.head_dim if self.scale == "head" else self.d)


def _split_heads(x, heads):
    *lead, f, d = x.shape
    return x.reshape(tuple(lead) + (f, heads, d // heads)).swapaxes(-3, -2)


def _merge_heads(x):
    *lead, h, f, hd = x.shape
    return x.swapaxes(-3, -2).reshape(tuple(lead) + (f, h * hd))


def _canonical_key_order(src):
    """Per-batch permutation sorting key rows lexicographically by content."""
    data = src.data.reshape((-1,) + src.shape[-2:])
    order = np.empty(data.shape[:2], dtype=np.int64)
    for b, rows in enumerate(data):
        order[b] = np.lexsort(rows.T[::-1])
    return order.reshape(src.shape[:-1])


def _gather_keys(x, order):
    lead = np.indices(order.shape, sparse=True)
    return getitem(x, tuple(lead[:-1]) + (order,))


def cross_attend(dest, src, params, key_mask=None, training=False):
    """Attend from ``dest`` rows (queries) to ``src`` rows (keys and values).

    Args:
        dest: ``(..., f_i, d)`` tensor.
        src: ``(..., f_j, d)`` tensor.
        key_mask: optional boolean ``(..., f_j)``; false entries are ignored.

    Returns:
        ``(out, weights)`` with ``out`` of shape ``(..., f_i, d)`` and
        ``weights`` of shape ``(..., heads, f_i, f_j)`` (rows sum to one).
    """
    if dest.shape[-1] != params.d or src.shape[-1] != params.d:
        raise DimensionError(f"cross_attend: widths of dest {dest.shape} and src {src.shape} "
                             f"must both equal d={params.d}")
    order = None
    if params.canonical_keys:
        order = _canonical_key_order(src)
        src = _gather_keys(src, order)
        if key_mask is not None:
            key_mask = np.take_along_axis(np.asarray(key_mask), order, axis=-1)

    h = params.num_heads
    q = _split_heads(dest @ params.W_Q, h)
    k = _split_heads(src @ params.W_K, h)
    v = _split_heads(src @ params.W_V, h)
    logits = (q @ k.swapaxes(-1, -2)) * params.scaling
    if key_mask is not None:
        bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, -1e30).astype(logits.dtype)
        logits = logits + bias[..., None, None, :]
    weights = softmax_rows(logits)
    attended = dropout(weights, params.dropout, params._rng, training)
    out = _merge_heads(attended @ v) @ params.W_O

    captured = weights.data
    if order is not None:
        inverse = np.argsort(order, axis=-1)
        captured = np.take_along_axis(captured, inverse[..., None, None, :], axis=-1)
    return out, captured


def self_attend(x, params, key_mask=None, training=False):
    return cross_attend(x, x, params, key_mask, training)


class TransformerBlockParams(Module):
    """Pre-norm block: attention sublayer then a ``d -> 4d -> d`` GELU feed-forward."""

    def __init__(self, d, num_heads, rng, dropout=0.0, attn_dropout=0.0, scale="head",
                 canonical_keys=False):
        self.attn = AttentionParams(d, num_heads, rng.child(0), attn_dropout, scale, canonical_keys)
        self.ln1_gain = parameter(np.ones(d))
        self.ln1_bias = parameter(np.zeros(d))
        self.ln2_gain = parameter(np.ones(d))
        self.ln2_bias = parameter(np.zeros(d))
        self.ff_w1 = init_weight(rng.child(1), d, 4 * d)
        self.ff_b1 = parameter(np.zeros(4 * d))
        self.ff_w2 = init_weight(rng.child(2), 4 * d, d)
        self.ff_b2 = parameter(np.zeros(d))
        self.dropout = dropout
        self._rng = rng.child(3)

    @property
    def d(self):
        return self.attn.d

    def config(self):
        return {"d": self.d, "num_heads": self.attn.num_heads, "dropout": self.dropout,
                "attn_dropout": self.attn.dropout, "scale": self.attn.scale}


def transformer_block(x, params, src=None, key_mask=None, training=False):
    """Apply one block; ``src`` switches to cross mode.

    In cross mode queries and the residual stream come from ``x`` and keys
    and values from ``layer_norm(src)``. Returns ``(out, attention_weights)``.
    """
    p = params
    h = layer_norm(x, p.ln1_gain, p.ln1_bias)
    kv = h if src is None else layer_norm(src, p.ln1_gain, p.ln1_bias)
    a, weights = cross_attend(h, kv, p.attn, key_mask, training)
    x = x + dropout(a, p.dropout, p._rng, training)
    h = layer_norm(x, p.ln2_gain, p.ln2_bias)
    ff = gelu(h @ p.ff_w1 + p.ff_b1) @ p.ff_w2 + p.ff_b2
    return x + dropout(ff, p.dropout, p._rng, training), weights


def encoder_forward(x, blocks, key_mask=None, training=False):
    """Self-mode stack. Returns the final state and the list of per-block hidden inputs."""
    hidden = []
    for block in blocks:
        hidden.append(x)
        x, _ = transformer_block(x, block, key_mask=key_mask, training=training)
    return x, hidden


def cross_stack(dest, src_hidden, blocks, key_mask=None, training=False, capture=None):
    """Cross-mode stack: block ``l`` attends from the dest stream to ``src_hidden[l]``.

    ``src_hidden[l]`` is the source's input to block ``l`` under the
    self-mode stack, so when dest equals src every block sees exactly what
    :func:`encoder_forward` sees.
    """
    x = dest
    for block, src in zip(blocks, src_hidden):
        x, weights = transformer_block(x, block, src=src, key_mask=key_mask, training=training)
        if capture is not None:
            capture.append(weights)
    return x
