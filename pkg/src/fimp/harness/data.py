"""Dataset loading, node splits and model construction for the task runners."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from fimp.baselines import VectorGnn, impute_masked
from fimp.errors import ConfigError, TransferError
from fimp.foundation import model_from_checkpoint, load_checkpoint, transfer_to_message_creator, transfer_tokenizer
from fimp.graph import Graph, load_graph
from fimp.message_passing import FimpModel, MessageCreator, ReadoutHead
from fimp.synthdata import default_spec, generate
from fimp.tokenizer import Tokenizer

DOMAIN_VARIANT = {"genes": "scalar", "patches": "patch", "signal": "temporal"}


@dataclass
class Dataset:
    graph: Graph
    variant: str
    labels: np.ndarray | None

    def fimp_graph(self, self_loops):
        """Graph for FIMP message passing; self-loops let a node attend to its own tokens."""
        return self.graph.with_self_loops() if self_loops else self.graph

    @property
    def values(self):
        return self.graph.node_features

    @property
    def ids(self):
        return self.graph.feature_ids

    @property
    def coords(self):
        return self.graph.coords if self.variant == "temporal" else None

    @property
    def num_nodes(self):
        return self.graph.num_nodes

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if self.labels is not None and len(self.labels) else 0


def load_dataset(cfg):
    """Resolve ``cfg.dataset`` to a :class:`Dataset`.

    The tokenizer variant comes from the generator sidecar (``<name>.spec.json``)
    when present; otherwise scalar for ``c = 1``, patch when both ``f`` and
    ``c`` are perfect squares, temporal otherwise.
    """
    if not cfg.dataset:
        raise ConfigError("dataset: no dataset path given")
    if cfg.dataset.startswith("synth:"):
        domain = cfg.dataset.split(":", 1)[1]
        if domain not in DOMAIN_VARIANT:
            raise ConfigError(f"dataset: unknown synthetic domain {domain!r}")
        g, labels = generate(default_spec(domain, **cfg.dataset_overrides))
        return Dataset(g, DOMAIN_VARIANT[domain], None if labels is None else np.asarray(labels))
    if not os.path.exists(cfg.dataset):
        raise FileNotFoundError(f"dataset: {cfg.dataset} does not exist")
    g = load_graph(cfg.dataset)
    variant = None
    sidecar = os.path.splitext(cfg.dataset)[0] + ".spec.json"
    if os.path.exists(sidecar):
        with open(sidecar) as fh:
            variant = DOMAIN_VARIANT.get(json.load(fh).get("generator"))
    if variant is None:
        f, c = g.node_features.shape[1:]
        if c == 1:
            variant = "scalar"
        elif all(int(round(np.sqrt(v))) ** 2 == v for v in (f, c)):
            variant = "patch"
        else:
            variant = "temporal"
    labels = None if g.node_labels is None else np.asarray(g.node_labels)
    return Dataset(g, variant, labels)


def make_splits(n, fractions, rng):
    """Disjoint train/val/test node index arrays (sorted) from a seeded permutation."""
    perm = rng.permutation(n)
    n_train = int(np.floor(fractions[0] * n + 1e-9))
    n_val = int(np.floor(fractions[1] * n + 1e-9))
    parts = perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]
    return tuple(np.sort(p) for p in parts)


def build_tokenizer(cfg, data, rng):
    f_max = int(data.ids.max()) + 1
    c = data.values.shape[-1]
    return Tokenizer(data.variant, cfg.d, f_max, rng, c=c, combine=cfg.combine,
                     patch_len=c, coord_dim=data.graph.coords.shape[1])


def build_fimp(cfg, data, task, out_dim, rng, combine_init=None):
    """FIMP-base (fresh creator and tokenizer) or FIMP-foundation (both transferred)."""
    combine_init = combine_init or cfg.combine_init
    if cfg.model == "fimp-foundation":
        if not cfg.checkpoint:
            raise ConfigError("checkpoint: fimp-foundation needs a pretrained checkpoint path")
        if not os.path.exists(cfg.checkpoint):
            raise FileNotFoundError(f"checkpoint: {cfg.checkpoint} does not exist")
        source = model_from_checkpoint(load_checkpoint(cfg.checkpoint))
        tokenizer = transfer_tokenizer(source)
        check_tokenizer_fits(tokenizer, data)
        creator = transfer_to_message_creator(source, d=tokenizer.d)
    else:
        tokenizer = build_tokenizer(cfg, data, rng.child(0))
        creator = MessageCreator.fresh(cfg.d, cfg.num_heads, cfg.num_blocks, rng.child(1),
                                       dropout=cfg.dropout)
    head = ReadoutHead(task, tokenizer.d, out_dim, rng.child(2))
    return FimpModel(tokenizer, creator, cfg.num_layers, head, rng.child(3),
                     aggregation=cfg.aggregation, blocks_per_message=cfg.blocks_per_message or None,
                     combine_init=combine_init)


def check_tokenizer_fits(tokenizer, data):
    c = data.values.shape[-1]
    if tokenizer.c != c:
        raise TransferError(f"pretrained tokenizer expects c={tokenizer.c} channels, data has {c}")
    if tokenizer.variant != data.variant:
        raise TransferError(f"pretrained tokenizer is {tokenizer.variant!r}, data needs {data.variant!r}")
    if int(data.ids.max()) >= tokenizer.f_max:
        raise TransferError(f"feature id {int(data.ids.max())} exceeds pretrained table size {tokenizer.f_max}")


def build_baseline(cfg, data, out_dim, rng):
    n, f, c = data.values.shape
    return VectorGnn(cfg.model, f * c, cfg.d, out_dim, cfg.num_layers, rng, dropout=cfg.dropout)


def fill_masked(values, mask, strategy, rng):
    """Baseline inputs: masked features replaced by zeros or an imputation strategy."""
    values = np.asarray(values)
    if strategy == "zero":
        return np.where(mask[..., None], 0.0, values).astype(values.dtype)
    n, f, c = values.shape
    out = np.empty_like(values)
    for i in range(n):
        filled = impute_masked(values[i].ravel(), mask[i], strategy, rng.child(i), patch_len=c)
        out[i] = filled.reshape(f, c)
    return out
