"""Deterministic synthetic datasets for the three node-feature modalities.

* ``genes``: cells on a 2D layout with scalar per-gene values. A cell's value
  for gene ``r`` is its type prototype at ``r`` plus ``coupling`` times the
  mean prototype of its graph neighbors at ``r``, plus Gaussian noise.
* ``patches``: 16x16 single-channel texture images whose family depends on
  the node class; same-class nodes cluster in space; radius graph.
* ``signal``: regions in 3D with 320-sample signals built from a shared bank
  of sinusoids whose phases vary smoothly over space; k-NN graph.

Every draw comes from an :class:`~fimp.numerics.Rng` child stream keyed by
purpose, so a spec fully determines its dataset. ``world_seed`` fixes the
shared generative structure (gene prototypes, the signal bank) while
``seed`` drives layout and noise, so samples drawn under different seeds
come from the same underlying process.
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from fimp.errors import ConfigError
from fimp.graph import Graph, build_knn_graph, build_radius_graph, save_graph
from fimp.numerics import Rng
from fimp.tokenizer import extract_patches

DOMAINS = ("genes", "patches", "signal")


@dataclass
class SynthSpec:
    domain: str
    num_nodes: int
    f: int
    c: int
    num_classes: int = 1
    graph_rule: str = "knn"
    k: int = 6
    radius: float = 0.1
    noise: float = 0.1
    seed: int = 0
    world_seed: int = 0
    coupling: float = 0.5
    image_size: int = 16
    patch: int = 4
    timepoints: int = 320
    patch_len: int = 20

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ConfigError(f"domain: expected one of {DOMAINS}, got {self.domain!r}")
        if self.graph_rule not in ("knn", "radius"):
            raise ConfigError(f"graph_rule: expected 'knn' or 'radius', got {self.graph_rule!r}")
        if self.graph_rule == "knn" and self.k < 1:
            raise ConfigError(f"k: must be a positive integer, got {self.k}")

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def default_spec(domain, **overrides):
    """Desk-scale defaults: 500 gene cells, 200 image nodes, 64 signal regions."""
    if domain == "genes":
        spec = SynthSpec("genes", num_nodes=500, f=32, c=1, num_classes=4, k=6,
                         noise=0.1, coupling=0.5)
    elif domain == "patches":
        spec = SynthSpec("patches", num_nodes=200, f=16, c=16, num_classes=4,
                         graph_rule="radius", radius=0.05, noise=1.0, coupling=0.0)
    elif domain == "signal":
        spec = SynthSpec("signal", num_nodes=64, f=16, c=20, num_classes=1, k=5,
                         noise=0.1, coupling=0.8)
    else:
        raise ConfigError(f"domain: expected one of {DOMAINS}, got {domain!r}")
    return spec.replace(**overrides) if overrides else spec


def _graph_for(spec, coords):
    if spec.graph_rule == "knn":
        return build_knn_graph(coords, spec.k, symmetric=True)
    return build_radius_graph(coords, spec.radius)


def gene_prototypes(spec):
    """Per-class gene profiles ``(num_classes, f)``, drawn from the world seed."""
    return Rng(spec.world_seed, (1,)).normal((spec.num_classes, spec.f))


def tissue_domains(coords, num_classes, rng, domains_per_class=3):
    """Cell types from a Voronoi partition of the layout; each region gets one type."""
    num_domains = num_classes * domains_per_class
    centers = rng.child(0).uniform((num_domains, coords.shape[1]))
    region_type = rng.child(1).permutation(np.arange(num_domains) % num_classes)
    d2 = ((coords[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
    return region_type[np.argmin(d2, axis=1)]


def gen_genes(spec):
    """Cells with scalar gene values; returns ``(graph, labels)``.

    Cell types occupy contiguous spatial regions, so adjacent cells mostly
    share a type and the neighbor term correlates with the cell's own values.
    """
    if spec.domain != "genes":
        raise ConfigError(f"domain: gen_genes needs domain 'genes', got {spec.domain!r}")
    rng = Rng(spec.seed)
    coords = rng.child(2).uniform((spec.num_nodes, 2))
    labels = tissue_domains(coords, spec.num_classes, rng.child(3))
    g = _graph_for(spec, coords)
    protos = gene_prototypes(spec)
    own = protos[labels]
    neighbor_mean = np.zeros_like(own)
    for i in range(spec.num_nodes):
        nbrs = g.in_neighbors(i)
        if len(nbrs):
            neighbor_mean[i] = own[np.sort(nbrs)].mean(axis=0)
    values = own + spec.coupling * neighbor_mean
    values = values + rng.child(4).normal(values.shape, scale=spec.noise)
    features = values.astype(np.float32)[:, :, None]
    ids = np.broadcast_to(np.arange(spec.f), (spec.num_nodes, spec.f))
    return Graph(g.num_nodes, coords, g.edges, labels, features, ids), labels


def _texture(cls, size, rng):
    """One texture image of family ``cls % 4`` with random phase/placement jitter."""
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    family = cls % 4
    variant = cls // 4
    phase = rng.uniform((), 0, 2 * math.pi)
    if family == 0:
        period = 4.0 + 2 * variant
        img = np.sin(2 * math.pi * y / period + phase)
    elif family == 1:
        period = 4.0 + 2 * variant
        img = np.sign(np.sin(2 * math.pi * x / period + phase) * np.sin(2 * math.pi * y / period + phase))
    elif family == 2:
        img = np.zeros((size, size))
        for cx, cy in rng.uniform((3, 2), 0, size):
            img += np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * (1.5 + variant) ** 2))
        img = 2 * img / max(img.max(), 1e-9) - 1
    else:
        angle = rng.uniform((), 0, 2 * math.pi)
        img = (np.cos(angle) * (x - size / 2) + np.sin(angle) * (y - size / 2)) / (size / 2)
        img = np.clip(img, -1, 1)
    return img


def gen_patches(spec):
    """Texture images per node; returns ``(graph, labels)``.

    Features are stored as ``(n, f, c)`` patch rows (row-major grid, pixel
    order within a patch row-major) so tokenizers and baselines share them.
    """
    if spec.domain != "patches":
        raise ConfigError(f"domain: gen_patches needs domain 'patches', got {spec.domain!r}")
    rng = Rng(spec.seed)
    n, size, p = spec.num_nodes, spec.image_size, spec.patch
    labels = rng.child(3).integers(0, spec.num_classes, n)
    angles = 2 * math.pi * np.arange(spec.num_classes) / spec.num_classes
    centers = 0.5 + 0.3 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    coords = centers[labels] + rng.child(2).normal((n, 2), scale=0.08)
    images = np.stack([_texture(int(c), size, rng.child(5, i)) for i, c in enumerate(labels)])
    images = images + rng.child(4).normal(images.shape, scale=spec.noise)
    g = _graph_for(spec, coords)
    features = np.stack([extract_patches(im, p) for im in images]).astype(np.float32)
    ids = np.broadcast_to(np.arange(features.shape[1]), features.shape[:2])
    return Graph(n, coords, g.edges, labels, features, ids), labels


def images_from_features(features, image_size=16, patch=4):
    """Invert the patch layout of :func:`gen_patches` back to ``(n, H, W)`` images."""
    n = len(features)
    side = image_size // patch
    grid = features.reshape(n, side, side, patch, patch).transpose(0, 1, 3, 2, 4)
    return grid.reshape(n, image_size, image_size)


SIGNAL_BANK_SIZE = 24


def signal_bank(spec, size=SIGNAL_BANK_SIZE):
    """Shared bank: periods (samples), amplitudes, spatial phase gradients and offsets."""
    rng = Rng(spec.world_seed, (1,))
    periods = np.exp(rng.child(0).uniform(size, math.log(8.0), math.log(160.0)))
    amps = rng.child(1).uniform(size, 0.5, 1.0) / math.sqrt(size / 2)
    gradients = rng.child(2).normal((size, 3), scale=0.8)
    offsets = rng.child(3).uniform(size, 0, 2 * math.pi)
    return periods, amps, gradients, offsets


def gen_signal(spec):
    """Region signals; returns ``(graph, None)``.

    Phase of bank component ``b`` at a region with coordinates ``x`` is
    ``offset_b + (1 - coupling) * 2*pi * (gradient_b . x + jitter)``; with
    ``coupling = 1`` every region carries the same signal.
    """
    if spec.domain != "signal":
        raise ConfigError(f"domain: gen_signal needs domain 'signal', got {spec.domain!r}")
    if spec.graph_rule == "knn" and spec.k < 1:
        raise ConfigError(f"k: must be a positive integer, got {spec.k}")
    if spec.timepoints % spec.patch_len:
        raise ConfigError(f"timepoints: {spec.timepoints} is not a multiple of patch_len={spec.patch_len}")
    rng = Rng(spec.seed)
    n = spec.num_nodes
    coords = rng.child(2).uniform((n, 3))
    g = _graph_for(spec, coords)
    periods, amps, gradients, offsets = signal_bank(spec)
    jitter = rng.child(3).normal((n, len(periods)), scale=0.05)
    phase = offsets + (1.0 - spec.coupling) * 2 * math.pi * (coords @ gradients.T + jitter)
    t = np.arange(spec.timepoints, dtype=np.float64)
    clean = np.einsum("b,nbt->nt", amps,
                      np.sin(2 * math.pi * t[None, None, :] / periods[None, :, None] + phase[:, :, None]))
    signal = clean + rng.child(4).normal(clean.shape, scale=spec.noise)
    features = signal.reshape(n, spec.timepoints // spec.patch_len, spec.patch_len).astype(np.float32)
    ids = np.broadcast_to(np.arange(features.shape[1]), features.shape[:2])
    return Graph(n, coords, g.edges, None, features, ids), None


GENERATORS = {"genes": gen_genes, "patches": gen_patches, "signal": gen_signal}


def generate(spec):
    return GENERATORS[spec.domain](spec)


def unstructured_samples(spec, num_samples, seed_offset=1_000_003):
    """Graph-free samples from the same process (a fresh, larger layout; edges dropped).

    Returns ``(features, coords, labels)``.
    """
    big = spec.replace(num_nodes=num_samples, seed=spec.seed + seed_offset)
    g, labels = generate(big)
    return g.node_features, g.coords, labels


def write_dataset(spec, out_dir, name=None):
    """Generate ``spec`` and write ``<name>.json`` (+ ``.f32`` blob) and ``<name>.spec.json``."""
    os.makedirs(out_dir, exist_ok=True)
    name = name or f"{spec.domain}"
    g, _ = generate(spec)
    path = save_graph(g, os.path.join(out_dir, f"{name}.json"))
    with open(os.path.join(out_dir, f"{name}.spec.json"), "w") as fh:
        json.dump({"generator": spec.domain, "spec": spec.to_dict()}, fh, indent=2, sort_keys=True)
    return path
