"""Vector-embedding GNN baselines and masked-signal imputation.

Baselines see each node as one flattened feature vector encoded to width
``d``; the layers follow the usual GCN, GraphSAGE, GIN and GAT update rules.
Neighbor sums are reduced with the segment kernel in (destination, source)
order.
"""
from __future__ import annotations

import warnings

import numpy as np

from fimp.errors import ConfigError, DimensionError
from fimp.numerics import (
    Linear,
    Module,
    Tensor,
    concat_last_axis,
    dropout,
    init_weight,
    leaky_relu,
    parameter,
    relu,
    segment_mean,
    segment_softmax,
    segment_sum,
    take_rows,
)

ARCHITECTURES = ("gcn", "sage", "gin", "gat")
IMPUTATIONS = ("noise", "mean", "interpolate")


class _EdgeIndex:
    """Edges sorted by (destination, source) with CSR offsets over destinations."""

    def __init__(self, g, self_loops=False):
        if self_loops:
            g = g.with_self_loops()
        order, indptr = g.sorted_edges()
        self.src = g.src[order]
        self.dst = g.dst[order]
        self.indptr = indptr
        self.positions = np.arange(len(order), dtype=np.int64)
        self.num_nodes = g.num_nodes

    def gather_sum(self, x, src_weight=None):
        msgs = take_rows(x, self.src)
        if src_weight is not None:
            msgs = msgs * src_weight
        return segment_sum(msgs, self.positions, self.indptr)

    def gather_mean(self, x):
        return segment_mean(take_rows(x, self.src), self.positions, self.indptr)


def _check_width(h, width, layer):
    if h.shape[-1] != width:
        raise DimensionError(f"{layer}: input width {h.shape[-1]} does not match weights ({width})")


class GCNLayer(Module):
    def __init__(self, d_in, d_out, rng):
        self.lin = Linear(d_in, d_out, rng)


def gcn_layer(h, g, params, activation=True, index=None):
    """Symmetric-normalised neighbor average with self-loops, then linear (+ReLU)."""
    _check_width(h, params.lin.weight.shape[0], "gcn_layer")
    index = index or _EdgeIndex(g, self_loops=True)
    deg = np.diff(index.indptr).astype(h.dtype)
    norm = (1.0 / np.sqrt(deg[index.src] * deg[index.dst]))[:, None]
    out = params.lin(index.gather_sum(h, norm))
    return relu(out) if activation else out


class SAGELayer(Module):
    def __init__(self, d_in, d_out, rng):
        self.lin = Linear(2 * d_in, d_out, rng)


def sage_layer(h, g, params, activation=True, index=None):
    """``concat(self, mean of neighbors)`` then linear (+ReLU)."""
    _check_width(h, params.lin.weight.shape[0] // 2, "sage_layer")
    index = index or _EdgeIndex(g)
    out = params.lin(concat_last_axis([h, index.gather_mean(h)]))
    return relu(out) if activation else out


class GINLayer(Module):
    def __init__(self, d_in, d_out, rng):
        self.eps = parameter(np.zeros(1))
        self.mlp1 = Linear(d_in, d_out, rng.child(0))
        self.mlp2 = Linear(d_out, d_out, rng.child(1))


def gin_layer(h, g, params, activation=True, index=None):
    """Two-layer perceptron of ``(1 + eps) * self + sum of neighbors``."""
    _check_width(h, params.mlp1.weight.shape[0], "gin_layer")
    index = index or _EdgeIndex(g)
    pooled = h * (params.eps + 1.0) + index.gather_sum(h)
    out = params.mlp2(relu(params.mlp1(pooled)))
    return relu(out) if activation else out


class GATLayer(Module):
    def __init__(self, d_in, d_out, rng, self_loops=True, slope=0.2):
        self.W = init_weight(rng.child(0), d_in, d_out)
        self.a = parameter(rng.child(1).normal((2 * d_out, 1), scale=(2 * d_out) ** -0.5))
        self.bias = parameter(np.zeros(d_out))
        self.self_loops = self_loops
        self.slope = slope


def gat_attention(h, g, params, index=None):
    """Per-edge coefficients ``alpha`` (aligned with ``index`` edge order) and projected features."""
    _check_width(h, params.W.shape[0], "gat_layer")
    if params.a.shape[0] != 2 * params.W.shape[1]:
        raise DimensionError(f"gat_layer: attention vector has length {params.a.shape[0]}, "
                             f"expected {2 * params.W.shape[1]}")
    index = index or _EdgeIndex(g, self_loops=params.self_loops)
    z = h @ params.W
    pair = concat_last_axis([take_rows(z, index.dst), take_rows(z, index.src)])
    scores = leaky_relu(pair @ params.a, params.slope)
    alpha = segment_softmax(scores, index.positions, index.indptr)
    return alpha, z, index


def gat_layer(h, g, params, activation=True, index=None):
    """Attention-weighted sum of projected neighbors, softmax-normalised per destination."""
    alpha, z, index = gat_attention(h, g, params, index)
    out = segment_sum(take_rows(z, index.src) * alpha, index.positions, index.indptr) + params.bias
    return relu(out) if activation else out


_LAYERS = {"gcn": (GCNLayer, gcn_layer), "sage": (SAGELayer, sage_layer),
           "gin": (GINLayer, gin_layer), "gat": (GATLayer, gat_layer)}


class VectorGnn(Module):
    """Input encoder, ``K`` message-passing layers and a linear readout."""

    def __init__(self, arch, in_dim, d, out_dim, num_layers, rng, dropout=0.0):
        if arch not in ARCHITECTURES:
            raise ConfigError(f"model: unknown baseline {arch!r}; expected one of {ARCHITECTURES}")
        if num_layers < 1:
            raise ConfigError(f"num_layers: must be >= 1, got {num_layers}")
        self.arch = arch
        self.encoder = Linear(in_dim, d, rng.child(0))
        cls = _LAYERS[arch][0]
        self.layers = [cls(d, d, rng.child(1, k)) for k in range(num_layers)]
        self.head = Linear(d, out_dim, rng.child(2))
        self.dropout = dropout
        self._rng = rng.child(3)

    def embed(self, x, g, training=False):
        """Final node embeddings ``(n, d)`` before the readout."""
        fn = _LAYERS[self.arch][1]
        self_loops = self.arch == "gcn" or (self.arch == "gat" and self.layers[0].self_loops)
        index = _EdgeIndex(g, self_loops=self_loops)
        h = relu(self.encoder(Tensor(np.asarray(x), dtype=self.encoder.weight.dtype)))
        for layer in self.layers:
            h = dropout(h, self.dropout, self._rng, training)
            h = fn(h, g, layer, index=index)
        return h

    def __call__(self, x, g, training=False):
        return self.head(self.embed(x, g, training))


def impute_masked(signal, mask, strategy, rng=None, patch_len=20):
    """Fill the timepoints of masked patches.

    ``mask`` holds one boolean per patch of ``patch_len`` timepoints.
    Strategies: ``noise`` draws standard normal values; ``mean`` uses the mean
    of the unmasked timepoints; ``interpolate`` draws straight lines between
    the nearest unmasked timepoints, holding the end values constant beyond
    them. With every patch masked, ``mean`` and ``interpolate`` fall back to
    zeros and warn.
    """
    if strategy not in IMPUTATIONS:
        raise ConfigError(f"strategy: expected one of {IMPUTATIONS}, got {strategy!r}")
    signal = np.asarray(signal, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if len(mask) * patch_len != len(signal):
        raise DimensionError(f"{len(mask)} patches of {patch_len} do not cover {len(signal)} timepoints")
    hidden = np.repeat(mask, patch_len)
    out = signal.copy()
    if not hidden.any():
        return out
    if strategy == "noise":
        if rng is None:
            raise ConfigError("rng: noise imputation needs a random stream")
        out[hidden] = rng.normal(int(hidden.sum()))
        return out
    if hidden.all():
        warnings.warn(f"every patch is masked; {strategy} imputation falls back to zeros", stacklevel=2)
        out[:] = 0.0
        return out
    if strategy == "mean":
        out[hidden] = signal[~hidden].mean()
    else:
        t = np.arange(len(signal))
        out[hidden] = np.interp(t[hidden], t[~hidden], signal[~hidden])
    return out
