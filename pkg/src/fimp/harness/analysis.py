"""Attention and embedding exports for trained models."""
from __future__ import annotations

import os

import numpy as np

from fimp.errors import ConfigError
from fimp.harness.runners import fimp_embeddings
from fimp.message_passing import fimp_forward
from fimp.numerics import no_grad


def capture_attention(model, data, graph, mask=None):
    """Forward pass over the whole graph with cross-attention recorded."""
    with no_grad():
        tokens = model.tokenizer.embed(data.values, data.ids, mask, data.coords)
        _, record = fimp_forward(graph, tokens, model, capture=True)
    return record


def _group_mean(values, dst_groups, src_groups, num_groups):
    """``(G, G)`` mean of per-edge values by (destination group, source group); NaN where no edge."""
    total = np.zeros((num_groups, num_groups))
    count = np.zeros((num_groups, num_groups))
    np.add.at(total, (dst_groups, src_groups), values)
    np.add.at(count, (dst_groups, src_groups), 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)


def _feature_group_mean(per_edge, dst_groups, src_groups, num_groups):
    f_dst, f_src = per_edge.shape[1:]
    total = np.zeros((num_groups, num_groups, f_dst, f_src))
    count = np.zeros((num_groups, num_groups))
    np.add.at(total, (dst_groups, src_groups), per_edge)
    np.add.at(count, (dst_groups, src_groups), 1)
    out = np.full_like(total, np.nan)
    hit = count > 0
    out[hit] = total[hit] / count[hit][:, None, None]
    return out


def export_attention(capture, group_labels, cohort_split=None, num_groups=None):
    """Aggregate captured cross-attention into group-level matrices.

    Each edge is reduced to one number: its attention weights averaged over
    GNN rounds, creator blocks, heads and token positions. ``group`` is the
    ``(G, G)`` mean of that number over edges by (destination group, source
    group). ``feature`` keeps the token axes: ``(G, G, f, f)`` mean weight
    matrices, the view that shows which source features a destination
    feature attends to.

    ``cohort_split`` is an optional boolean per node; edges are assigned to a
    cohort by their destination node, giving ``cohort_a`` (False),
    ``cohort_b`` (True) and ``difference`` (b minus a) entries.
    """
    if capture is None:
        raise ConfigError("capture_attention: attention was not captured for this run")
    labels = np.asarray(group_labels, dtype=np.int64)
    g = int(num_groups) if num_groups is not None else int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= g:
        raise ConfigError(f"group_labels: values must lie in [0, {g})")
    per_edge = capture.per_edge()
    scalar = per_edge.mean(axis=(1, 2))
    dg, sg = labels[capture.dst], labels[capture.src]
    out = {"group": _group_mean(scalar, dg, sg, g),
           "feature": _feature_group_mean(per_edge, dg, sg, g)}
    if cohort_split is not None:
        split = np.asarray(cohort_split, dtype=bool)
        if split.shape != labels.shape:
            raise ConfigError(f"cohort_split: expected one flag per node ({labels.shape[0]}), got {split.shape}")
        in_b = split[capture.dst]
        a = _group_mean(scalar[~in_b], dg[~in_b], sg[~in_b], g)
        b = _group_mean(scalar[in_b], dg[in_b], sg[in_b], g)
        out.update(cohort_a=a, cohort_b=b, difference=b - a)
    return out


def feature_table(tokenizer):
    """Per-feature-id embedding table ``(f_max, d)``: learned for scalar data, fixed positions otherwise."""
    if tokenizer.P is not None:
        return np.array(tokenizer.P.data)
    return np.array(tokenizer._fixed_pe)


def write_matrix(path, matrix, row_label="row"):
    """Comma-delimited matrix with a header row (``row_label,0,1,...``) and the row index first."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(",".join([row_label] + [str(j) for j in range(matrix.shape[1])]) + "\n")
        for i, row in enumerate(matrix):
            fh.write(",".join([str(i)] + [repr(float(v)) for v in row]) + "\n")
    return path


def read_matrix(path):
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)[:, 1:]


def export_embeddings(model, what, path, data=None, graph=None):
    """Write the feature-id table (``what="feature-table"``) or mean-pooled node
    states (``what="node"``, needs ``data`` and ``graph``) as a delimited matrix.

    ``model`` may be a FIMP model, a foundation model or a bare tokenizer for
    the feature table.
    """
    if what == "feature-table":
        tokenizer = getattr(model, "tokenizer", model)
        return write_matrix(path, feature_table(tokenizer), "feature_id")
    if what == "node":
        if data is None or graph is None:
            raise ConfigError("what: node embeddings need a dataset and graph")
        return write_matrix(path, fimp_embeddings(model, data, graph), "node")
    raise ConfigError(f"what: expected 'feature-table' or 'node', got {what!r}")
