"""Spatial-proximity graphs and their on-disk format.

Graphs are directed. ``edges`` is an ``(E, 2)`` array of ``(source,
destination)`` pairs kept in the order given; ``indptr``/``neighbors`` is the
per-destination neighbor index built from it (destination-major, edge-list
order within a destination). Code that needs an order-independent reduction
sorts by source id itself.

File layout (JSON document)::

    {
      "format": "fimp-graph", "version": 1,
      "num_nodes": n, "coord_dim": 2 | 3,
      "coords": [[x, y(, z)], ...],
      "edges": [[src, dst], ...],
      "labels": [int, ...] | null,
      "feature_ids": [[int, ...], ...] | null,
      "features": {"shape": [n, f, c], "data": nested arrays}
                | {"shape": [n, f, c], "path": "name.f32", "dtype": "<f4"}
                | null
    }

A ``path`` blob holds little-endian float32 values in node-major,
feature-major, channel-minor order, resolved relative to the JSON file.
"""
from __future__ import annotations

import json
import os
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from fimp import kernels
from fimp.errors import ConfigError, FormatError

FORMAT_NAME = "fimp-graph"
FORMAT_VERSION = 1


@dataclass(eq=False)
class Graph:
    num_nodes: int
    coords: np.ndarray
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    node_labels: np.ndarray | None = None
    node_features: np.ndarray | None = None
    feature_ids: np.ndarray | None = None

    def __post_init__(self):
        self.num_nodes = int(self.num_nodes)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(self.num_nodes, -1)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= self.num_nodes):
            raise ConfigError(f"edges: endpoint outside [0, {self.num_nodes})")
        if len(np.unique(self.edges, axis=0)) != len(self.edges):
            raise ConfigError("edges: duplicate directed edge")
        if self.node_labels is not None:
            self.node_labels = np.asarray(self.node_labels, dtype=np.int64)
        if self.node_features is not None:
            self.node_features = np.asarray(self.node_features, dtype=np.float32)
            if self.node_features.ndim == 2:
                self.node_features = self.node_features[:, :, None]
        if self.feature_ids is not None:
            self.feature_ids = np.asarray(self.feature_ids, dtype=np.int64)
        order, indptr = kernels.grouping(self.dst, self.num_nodes)
        self.indptr = indptr
        self.neighbors = self.src[order]

    @property
    def src(self):
        return self.edges[:, 0]

    @property
    def dst(self):
        return self.edges[:, 1]

    @property
    def num_edges(self):
        return len(self.edges)

    def in_neighbors(self, i):
        return self.neighbors[self.indptr[i]:self.indptr[i + 1]]

    def in_degree(self):
        return np.diff(self.indptr)

    def out_degree(self):
        return np.bincount(self.src, minlength=self.num_nodes)

    def sorted_edges(self):
        """Edge indices ordered by (destination, source) plus CSR offsets over destinations."""
        order = np.lexsort((self.src, self.dst))
        return order, self.indptr

    def with_self_loops(self):
        present = set(map(tuple, self.edges[self.src == self.dst].tolist()))
        loops = [(i, i) for i in range(self.num_nodes) if (i, i) not in present]
        edges = np.concatenate([self.edges, np.asarray(loops, dtype=np.int64).reshape(-1, 2)])
        return self._replace(edges=edges)

    def permuted(self, perm):
        """Relabel so that old node ``perm[i]`` becomes new node ``i``."""
        perm = np.asarray(perm, dtype=np.int64)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(len(perm))
        return Graph(
            self.num_nodes, self.coords[perm], inverse[self.edges],
            None if self.node_labels is None else self.node_labels[perm],
            None if self.node_features is None else self.node_features[perm],
            None if self.feature_ids is None else self.feature_ids[perm],
        )

    def _replace(self, **changes):
        fields = dict(num_nodes=self.num_nodes, coords=self.coords, edges=self.edges,
                      node_labels=self.node_labels, node_features=self.node_features,
                      feature_ids=self.feature_ids)
        fields.update(changes)
        return Graph(**fields)


def _edges_from(src, dst):
    return np.stack([np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64)], axis=1)


def build_knn_graph(coords, k, symmetric=False, **node_data):
    """Edges ``i -> j`` from every node to its ``k`` nearest other nodes.

    Distance ties go to the smaller node id. Every out-degree is ``k``. With
    ``symmetric`` the edge set is united with its reverse.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ConfigError(f"k: must be a positive integer, got {k!r}")
    if k >= n:
        raise ConfigError(f"k: must be smaller than num_nodes={n}, got {k}")
    if not np.all(np.isfinite(coords)):
        raise ConfigError("coords: non-finite coordinate")
    nearest = kernels.knn(coords, k)
    src = np.repeat(np.arange(n), k)
    dst = nearest.reshape(-1)
    edges = _edges_from(src, dst)
    if symmetric:
        edges = np.unique(np.concatenate([edges, edges[:, ::-1]]), axis=0)
    return Graph(n, coords, edges, **node_data)


def build_radius_graph(coords, radius, **node_data):
    """Directed edges both ways between every pair at distance <= ``radius``."""
    if not radius > 0:
        raise ConfigError(f"radius: must be positive, got {radius!r}")
    coords = np.asarray(coords, dtype=np.float64)
    src, dst = kernels.radius_pairs(coords, radius)
    return Graph(len(coords), coords, _edges_from(src, dst), **node_data)


def sample_subgraph(g, seeds, num_hops, rng=None):
    """Induced subgraph on everything within ``num_hops`` of ``seeds``.

    Hops follow edges in either direction. Returns ``(subgraph, node_ids)``
    where ``node_ids[new] = old`` in ascending old-id order. ``rng`` is
    accepted for sampler-interface compatibility; the neighborhood is taken
    in full.
    """
    seeds = np.unique(np.asarray(seeds, dtype=np.int64))
    if len(seeds) == 0:
        raise ConfigError("seeds: at least one seed node is required")
    if num_hops < 0:
        raise ConfigError(f"num_hops: must be >= 0, got {num_hops}")
    if seeds.min() < 0 or seeds.max() >= g.num_nodes:
        raise ConfigError(f"seeds: ids must lie in [0, {g.num_nodes})")
    adjacency = [[] for _ in range(g.num_nodes)]
    for s, d in g.edges.tolist():
        adjacency[s].append(d)
        adjacency[d].append(s)
    depth = {int(s): 0 for s in seeds}
    queue = deque(int(s) for s in seeds)
    while queue:
        u = queue.popleft()
        if depth[u] == num_hops:
            continue
        for v in adjacency[u]:
            if v not in depth:
                depth[v] = depth[u] + 1
                queue.append(v)
    node_ids = np.array(sorted(depth), dtype=np.int64)
    local = np.full(g.num_nodes, -1, dtype=np.int64)
    local[node_ids] = np.arange(len(node_ids))
    keep = (local[g.src] >= 0) & (local[g.dst] >= 0)
    sub = Graph(
        len(node_ids), g.coords[node_ids], local[g.edges[keep]],
        None if g.node_labels is None else g.node_labels[node_ids],
        None if g.node_features is None else g.node_features[node_ids],
        None if g.feature_ids is None else g.feature_ids[node_ids],
    )
    return sub, node_ids


# -- serialization -------------------------------------------------------

def save_graph(g, path, inline_features=False):
    """Write ``g`` as JSON; features go to a sibling ``.f32`` blob unless inlined."""
    path = os.fspath(path)
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "num_nodes": g.num_nodes,
        "coord_dim": int(g.coords.shape[1]),
        "coords": g.coords.tolist(),
        "edges": g.edges.tolist(),
        "labels": None if g.node_labels is None else g.node_labels.tolist(),
        "feature_ids": None if g.feature_ids is None else g.feature_ids.tolist(),
        "features": None,
    }
    if g.node_features is not None:
        feats = np.asarray(g.node_features, dtype="<f4")
        if inline_features:
            doc["features"] = {"shape": list(feats.shape), "data": feats.tolist()}
        else:
            blob = os.path.splitext(os.path.basename(path))[0] + ".f32"
            _atomic_write(os.path.join(os.path.dirname(path) or ".", blob), feats.tobytes(order="C"))
            doc["features"] = {"shape": list(feats.shape), "path": blob, "dtype": "<f4"}
    _atomic_write(path, json.dumps(doc).encode())
    return path


def load_graph(path):
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            doc = json.loads(fh.read())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc.msg}", exc.pos) from None
    if doc.get("format") != FORMAT_NAME:
        raise FormatError(f"{path}: format field is {doc.get('format')!r}, expected {FORMAT_NAME!r}")
    if doc.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {doc.get('version')!r}")
    n = int(doc["num_nodes"])
    coords = np.asarray(doc["coords"], dtype=np.float64).reshape(n, int(doc["coord_dim"]))
    features = None
    spec = doc.get("features")
    if spec is not None:
        shape = tuple(spec["shape"])
        if "data" in spec:
            features = np.asarray(spec["data"], dtype=np.float32).reshape(shape)
        else:
            blob = os.path.join(os.path.dirname(path) or ".", spec["path"])
            with open(blob, "rb") as fh:
                raw = fh.read()
            expected = int(np.prod(shape)) * 4
            if len(raw) != expected:
                raise FormatError(f"{blob}: expected {expected} bytes for shape {shape}, got {len(raw)}",
                                  min(len(raw), expected))
            features = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return Graph(n, coords, np.asarray(doc["edges"], dtype=np.int64).reshape(-1, 2),
                 doc.get("labels"), features, doc.get("feature_ids"))


def _atomic_write(path, payload):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
