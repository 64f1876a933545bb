"""Cross-node attention message passing.

Each round, every edge ``j -> i`` produces a message ``H_ji`` (``f_i x d``)
by running the message creator's blocks with queries from node ``i`` and
keys/values from node ``j``. Messages into a node are averaged (or summed)
and concatenated with the node's previous state along the embedding axis,
then projected back to width ``d``.

Edges are processed as one batch in (destination, source) order, so each
destination reduces its messages in ascending source-id order regardless of
how the graph stores its edges.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fimp.attention import TransformerBlockParams, cross_stack, transformer_block
from fimp.errors import ConfigError, DimensionError
from fimp.numerics import (
    Linear,
    Module,
    Tensor,
    concat_last_axis,
    init_weight,
    parameter,
    segment_mean,
    segment_sum,
    take_rows,
)
from fimp.tokenizer import NodeTokenSequence

AGGREGATIONS = ("mean", "sum")
TASKS = ("regression", "classification")


class MessageCreator(Module):
    """Ordered transformer blocks run in cross mode to create messages.

    ``mode`` is ``"fresh"`` for randomly initialised blocks or
    ``"foundation"`` for blocks copied from a pretrained encoder.
    """

    def __init__(self, blocks, mode="fresh"):
        if not blocks:
            raise ConfigError("blocks: a message creator needs at least one block")
        if mode not in ("fresh", "foundation"):
            raise ConfigError(f"mode: expected 'fresh' or 'foundation', got {mode!r}")
        self.blocks = list(blocks)
        self.mode = mode

    @classmethod
    def fresh(cls, d, num_heads, num_blocks, rng, **block_kwargs):
        return cls([TransformerBlockParams(d, num_heads, rng.child(i), **block_kwargs)
                    for i in range(num_blocks)])

    @property
    def d(self):
        return self.blocks[0].d

    def source_stream(self, src, num_blocks=None, key_mask=None, training=False):
        """Inputs to each block when ``src`` runs through the stack in self mode."""
        blocks = self.blocks[:num_blocks]
        hidden = [src]
        for block in blocks[:-1]:
            src, _ = transformer_block(src, block, key_mask=key_mask, training=training)
            hidden.append(src)
        return hidden


def _tokens(x):
    return x.tokens if isinstance(x, NodeTokenSequence) else x


def create_message(dest, src, creator, num_blocks=None, capture=None, training=False):
    """Message ``H_ji`` from source ``src`` to destination ``dest`` (both ``f x d``)."""
    dest, src = _tokens(dest), _tokens(src)
    if dest.shape[-1] != creator.d or src.shape[-1] != creator.d:
        raise DimensionError(f"create_message: widths {dest.shape[-1]} and {src.shape[-1]} "
                             f"must equal creator width {creator.d}")
    blocks = creator.blocks[:num_blocks]
    src_hidden = creator.source_stream(src, num_blocks, training=training)
    return cross_stack(dest, src_hidden, blocks, training=training, capture=capture)


def aggregate_messages(messages, mode="mean", shape=None):
    """Elementwise mean (or sum) of a list of equally shaped messages, in list order.

    An empty list gives a zero matrix of ``shape``.
    """
    if mode not in AGGREGATIONS:
        raise ConfigError(f"aggregation: expected one of {AGGREGATIONS}, got {mode!r}")
    if not messages:
        if shape is None:
            raise DimensionError("aggregate_messages: empty list needs an explicit shape")
        return Tensor(np.zeros(shape))
    first = messages[0].shape
    for m in messages[1:]:
        if m.shape != first:
            raise DimensionError(f"aggregate_messages: shapes {first} and {m.shape} disagree")
    total = messages[0] * 1.0
    for m in messages[1:]:
        total = total + m
    return total / float(len(messages)) if mode == "mean" else total


def combine_update(h_prev, h_agg, w_comb):
    """``concat(h_prev, h_agg) @ w_comb`` with the concat along the embedding axis."""
    if h_prev.shape != h_agg.shape:
        raise DimensionError(f"combine_update: h_prev {h_prev.shape} and h_agg {h_agg.shape} differ")
    d = h_prev.shape[-1]
    if w_comb.shape != (2 * d, d):
        raise DimensionError(f"combine_update: W_comb must be {(2 * d, d)}, got {w_comb.shape}")
    return concat_last_axis([h_prev, h_agg]) @ w_comb


class ReadoutHead(Module):
    """Per-token regression (``d -> c``) or mean-pooled classification (``d -> classes``)."""

    def __init__(self, task, d, out_dim, rng):
        if task not in TASKS:
            raise ConfigError(f"task: expected one of {TASKS}, got {task!r}")
        self.task = task
        self.linear = Linear(d, out_dim, rng)


def readout(states, head, task, valid=None):
    """Map final node states to predictions.

    Regression returns ``(..., f, c)`` values for every token (callers select
    masked positions); classification returns ``(n, classes)`` logits from
    the mean over valid tokens.
    """
    if head.task != task:
        raise ConfigError(f"task: head was built for {head.task!r}, asked for {task!r}")
    if task == "regression":
        return head.linear(states)
    if valid is None:
        pooled = states.mean(axis=-2)
    else:
        w = np.asarray(valid, dtype=states.dtype)
        w = w / np.maximum(w.sum(axis=-1, keepdims=True), 1)
        pooled = (states * w[..., None]).sum(axis=-2)
    return head.linear(pooled)


@dataclass
class AttentionCapture:
    """Cross-attention weights recorded during a forward pass.

    ``layers[k][l]`` has shape ``(E, heads, f, f)`` for GNN round ``k`` and
    creator block ``l``; row ``e`` belongs to edge ``src[e] -> dst[e]``.
    """

    src: np.ndarray
    dst: np.ndarray
    layers: list = field(default_factory=list)

    def per_edge(self):
        """Mean weight matrix per edge over rounds, blocks and heads: ``(E, f, f)``."""
        stacked = np.stack([np.stack(blocks) for blocks in self.layers])
        return stacked.mean(axis=(0, 1, 3))


class FimpModel(Module):
    """Tokenizer, message creator(s), per-round combine projections and a readout head."""

    def __init__(self, tokenizer, creator, num_layers, head, rng, share_creator=True,
                 aggregation="mean", blocks_per_message=None, combine_init="random"):
        if num_layers < 1:
            raise ConfigError(f"num_layers: must be >= 1, got {num_layers}")
        if aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation: expected one of {AGGREGATIONS}, got {aggregation!r}")
        d = tokenizer.d
        if creator.d != d:
            raise DimensionError(f"creator width {creator.d} differs from tokenizer width {d}")
        self.tokenizer = tokenizer
        self.creators = [creator] if share_creator else [creator] + [
            MessageCreator.fresh(d, creator.blocks[0].attn.num_heads, len(creator.blocks), rng.child(10 + k))
            for k in range(1, num_layers)]
        self.num_layers = num_layers
        self.aggregation = aggregation
        self.blocks_per_message = blocks_per_message
        self.combine = [self._combine_weight(d, combine_init, rng.child(20 + k)) for k in range(num_layers)]
        self.head = head

    @staticmethod
    def _combine_weight(d, how, rng):
        if how == "random":
            return init_weight(rng, 2 * d, d)
        if how == "average":
            eye = np.eye(d) / 2.0
            return parameter(np.concatenate([eye, eye]))
        if how == "identity":
            return parameter(np.concatenate([np.eye(d), np.zeros((d, d))]))
        raise ConfigError(f"combine_init: unknown value {how!r}")

    def creator(self, k):
        return self.creators[k if len(self.creators) > 1 else 0]


def receptive_sets(g, targets, num_layers):
    """Sorted node sets ``S_0 ⊇ ... ⊇ S_K = targets`` where ``S_{k-1}`` adds in-neighbors of ``S_k``."""
    sets = [np.unique(np.asarray(targets, dtype=np.int64))]
    for _ in range(num_layers):
        cur = sets[0]
        keep = np.isin(g.dst, cur)
        sets.insert(0, np.union1d(cur, g.src[keep]))
    return sets


def fimp_forward(g, tokens, model, valid=None, capture=False, training=False, targets=None):
    """Run ``model.num_layers`` rounds of message passing over graph ``g``.

    Args:
        tokens: ``(n, f, d)`` initial node token tensor.
        valid: optional ``(n, f)`` booleans marking real (non-padding) tokens.
        targets: optional node ids whose final states are wanted. Only their
            receptive field is computed and the result has one row per
            sorted unique target; values equal the full computation exactly.

    Returns:
        ``(states, capture)`` where ``capture`` is an :class:`AttentionCapture`
        or ``None``.
    """
    if tokens.shape[0] != g.num_nodes:
        raise DimensionError(f"{tokens.shape[0]} token sequences for a graph of {g.num_nodes} nodes")
    if capture and targets is not None:
        raise ConfigError("capture: attention capture needs the full graph (targets=None)")
    order, _ = g.sorted_edges()
    src_all, dst_all = g.src[order], g.dst[order]
    key_mask = None if valid is None else np.asarray(valid, dtype=bool)
    reduce = segment_mean if model.aggregation == "mean" else segment_sum
    record = None
    if targets is None:
        sets = [np.arange(g.num_nodes)] * (model.num_layers + 1)
        h = tokens
    else:
        sets = receptive_sets(g, targets, model.num_layers)
        h = take_rows(tokens, sets[0])

    for k in range(model.num_layers):
        inputs, outputs = sets[k], sets[k + 1]
        local = np.full(g.num_nodes, -1, dtype=np.int64)
        local[inputs] = np.arange(len(inputs))
        keep = np.isin(dst_all, outputs) if targets is not None else slice(None)
        src_e, dst_e = src_all[keep], dst_all[keep]
        # edges stay in (dst, src) order; offsets over the output rows
        indptr = np.concatenate([[0], np.cumsum(np.bincount(np.searchsorted(outputs, dst_e),
                                                            minlength=len(outputs)))])
        positions = np.arange(len(src_e), dtype=np.int64)
        h_out = h if targets is None else take_rows(h, local[outputs])
        if capture and record is None:
            record = AttentionCapture(src_e, dst_e)
        creator = model.creator(k)
        nb = model.blocks_per_message
        if len(src_e):
            in_mask = None if key_mask is None else key_mask[inputs]
            src_hidden = [take_rows(s, local[src_e]) for s in
                          creator.source_stream(h, nb, key_mask=in_mask, training=training)]
            weights = [] if capture else None
            messages = cross_stack(take_rows(h, local[dst_e]), src_hidden, creator.blocks[:nb],
                                   key_mask=None if key_mask is None else key_mask[src_e],
                                   training=training, capture=weights)
            if capture:
                record.layers.append(weights)
            agg = reduce(messages, positions, indptr)
        else:
            agg = Tensor(np.zeros(h_out.shape), dtype=h_out.dtype)
        h = combine_update(h_out, agg, model.combine[k])
    return h, record
