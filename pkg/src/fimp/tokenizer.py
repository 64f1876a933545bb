"""Node tokenization: raw node features to a sequence of feature tokens.

A node with ``f`` features of ``c`` channels becomes an ``f x d`` token
matrix. Each token combines a value embedding (the feature's raw values
projected by ``W``, or the learned mask token when the feature is hidden)
with a positional term that identifies the feature:

* ``scalar``: one value per feature (``c = 1``); the positional term is a
  learned row of an id-embedding table.
* ``patch``: image patches of ``c = p*p*ch`` pixels; fixed 2D sinusoidal
  encoding of the patch's grid cell.
* ``temporal``: signal segments of ``c = patch_len`` samples; a learned
  projection of the node's spatial coordinates plus a sinusoidal encoding of
  the segment index.

``combine="add"`` sums the two parts; ``combine="concat"`` concatenates
them to width ``2d`` and projects back to ``d``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fimp.errors import ConfigError, DimensionError, ShapeError, VocabularyError
from fimp.numerics import Module, Tensor, concat_last_axis, embedding_lookup, init_weight, parameter, where
from fimp.numerics.tensor import get_default_dtype

VARIANTS = ("scalar", "patch", "temporal")
COMBINES = ("add", "concat")
DEFAULT_FEATURE_CAP = 50
DEFAULT_PATCH_LEN = 20


def sinusoidal_encoding(num_positions, d):
    """Standard 1D sine/cosine table of shape ``(num_positions, d)``."""
    pos = np.arange(num_positions, dtype=np.float64)[:, None]
    freq = np.exp(-math.log(10000.0) * np.arange(0, d, 2, dtype=np.float64) / d)
    table = np.zeros((num_positions, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: d // 2])
    return table


def sinusoidal_encoding_2d(rows, cols, d):
    """2D table for a row-major ``rows x cols`` grid: first half encodes the row, second the column."""
    if d % 4:
        raise ConfigError(f"d: 2D sinusoidal encoding needs d divisible by 4, got {d}")
    row_table = sinusoidal_encoding(rows, d // 2)
    col_table = sinusoidal_encoding(cols, d // 2)
    grid_r, grid_c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.concatenate([row_table[grid_r.ravel()], col_table[grid_c.ravel()]], axis=1)


class Tokenizer(Module):
    """Learned tokenizer parameters for one data modality."""

    def __init__(self, variant, d, f_max, rng, c=1, combine="add", grid=None,
                 patch_len=DEFAULT_PATCH_LEN, coord_dim=3):
        if variant not in VARIANTS:
            raise ConfigError(f"variant: expected one of {VARIANTS}, got {variant!r}")
        if combine not in COMBINES:
            raise ConfigError(f"combine: expected one of {COMBINES}, got {combine!r}")
        self.variant = variant
        self.combine = combine
        self.d = int(d)
        self.f_max = int(f_max)
        self.patch_len = int(patch_len)
        if variant == "temporal":
            c = self.patch_len
        self.c = int(c)
        self.W = init_weight(rng.child(1), self.c, self.d)
        self.mask_token = parameter(rng.child(2).normal(self.d, scale=0.02))
        self.P = None
        self.W_coord = None
        self.W_cat = None
        self._fixed_pe = None
        if variant == "scalar":
            self.P = parameter(rng.child(3).normal((self.f_max, self.d), scale=1.0))
        elif variant == "patch":
            self.grid = tuple(grid) if grid is not None else _square_grid(self.f_max)
            if self.grid[0] * self.grid[1] != self.f_max:
                raise ConfigError(f"grid: {self.grid} does not hold f_max={self.f_max} patches")
            self._fixed_pe = sinusoidal_encoding_2d(*self.grid, self.d)
        else:
            self.W_coord = init_weight(rng.child(4), coord_dim, self.d)
            self._fixed_pe = sinusoidal_encoding(self.f_max, self.d)
        if combine == "concat":
            self.W_cat = init_weight(rng.child(5), 2 * self.d, self.d)

    def config(self):
        out = {"variant": self.variant, "d": self.d, "f_max": self.f_max, "c": self.c,
               "combine": self.combine, "patch_len": self.patch_len}
        if self.variant == "patch":
            out["grid"] = list(self.grid)
        if self.variant == "temporal":
            out["coord_dim"] = int(self.W_coord.shape[0])
        return out

    def positional(self, ids, coords=None):
        """Positional term for feature ``ids`` (shape ``(..., f)``) -> ``(..., f, d)``."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.f_max):
            raise VocabularyError(f"feature ids must lie in [0, {self.f_max}), got range "
                                  f"[{ids.min()}, {ids.max()}]")
        if self.variant == "scalar":
            return embedding_lookup(self.P, ids)
        table = Tensor(self._fixed_pe[ids], dtype=self.W.dtype)
        if self.variant == "patch":
            return table
        if coords is None:
            raise ConfigError("coords: the temporal tokenizer needs node coordinates")
        coords = np.asarray(coords)
        if coords.ndim == 1:  # one node: a single spatial row shared by its tokens
            return table + Tensor(coords[None], dtype=self.W.dtype) @ self.W_coord
        spatial = Tensor(coords, dtype=self.W.dtype) @ self.W_coord
        return table + spatial.reshape(spatial.shape[:-1] + (1, self.d))

    def embed(self, values, ids, mask=None, coords=None):
        """Token tensor ``(..., f, d)`` for raw ``values`` of shape ``(..., f, c)``.

        Positions where ``mask`` is true take the mask token in place of their
        value embedding; the positional term is kept.
        """
        values = np.asarray(values)
        if values.shape[-1] != self.c:
            raise DimensionError(f"values: last axis must be c={self.c}, got shape {values.shape}")
        value_emb = Tensor(values, dtype=self.W.dtype) @ self.W
        if mask is not None and np.any(mask):
            value_emb = where(np.asarray(mask, dtype=bool)[..., None], self.mask_token, value_emb)
        pos = self.positional(ids, coords)
        if self.combine == "add":
            return value_emb + pos
        if pos.shape != value_emb.shape:
            pos = pos + Tensor(np.zeros(value_emb.shape), dtype=value_emb.dtype)
        return concat_last_axis([value_emb, pos]) @ self.W_cat


def _square_grid(f):
    side = int(round(math.sqrt(f)))
    if side * side != f:
        raise ConfigError(f"grid: f_max={f} is not square; pass grid explicitly")
    return side, side


@dataclass
class NodeTokenSequence:
    """Tokens of one node plus what is needed to re-embed them under a new mask."""

    tokens: Tensor
    feature_ids: np.ndarray
    mask: np.ndarray
    raw_targets: np.ndarray
    params: Tokenizer
    coords: np.ndarray | None = None

    def __post_init__(self):
        f = self.tokens.shape[0]
        if not (len(self.feature_ids) == len(self.mask) == f):
            raise DimensionError("tokens, feature_ids and mask must have equal length")

    @property
    def num_features(self):
        return self.tokens.shape[0]


def tokenize_scalar(values, feature_ids, params):
    """One token per scalar feature: ``combine(value * W, P[id])``."""
    if params.variant != "scalar":
        raise ConfigError(f"variant: tokenize_scalar needs a scalar tokenizer, got {params.variant!r}")
    values = np.asarray(values, dtype=get_default_dtype()).reshape(-1, 1)
    ids = np.asarray(feature_ids, dtype=np.int64)
    if len(ids) != len(values):
        raise DimensionError(f"{len(values)} values but {len(ids)} feature ids")
    tokens = params.embed(values, ids)
    return NodeTokenSequence(tokens, ids, np.zeros(len(ids), dtype=bool), values.copy(), params)


def extract_patches(image, p):
    """Row-major ``(f, p*p*ch)`` patch matrix of an ``H x W (x ch)`` image."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, ch = image.shape
    if h % p or w % p:
        raise ShapeError(f"image of size {h}x{w} is not divisible into {p}x{p} patches")
    grid = image.reshape(h // p, p, w // p, p, ch).transpose(0, 2, 1, 3, 4)
    return grid.reshape((h // p) * (w // p), p * p * ch)


def tokenize_patches(image, patch, params):
    """Patch tokens ``flatten(patch) @ W + PE2d(row, col)``."""
    if params.variant != "patch":
        raise ConfigError(f"variant: tokenize_patches needs a patch tokenizer, got {params.variant!r}")
    patches = extract_patches(image, patch).astype(get_default_dtype())
    if patches.shape[1] != params.c:
        raise DimensionError(f"patch size gives c={patches.shape[1]} but tokenizer has c={params.c}")
    ids = np.arange(len(patches))
    tokens = params.embed(patches, ids)
    return NodeTokenSequence(tokens, ids, np.zeros(len(ids), dtype=bool), patches, params)


def segment_signal(signal, patch_len=DEFAULT_PATCH_LEN):
    signal = np.asarray(signal)
    if len(signal) % patch_len:
        raise ShapeError(f"signal length {len(signal)} is not divisible by patch_len={patch_len}")
    return signal.reshape(-1, patch_len)


def tokenize_temporal(signal, coords, params):
    """Segment tokens ``segment @ W + coords @ W_coord + PE1d(index)``."""
    if params.variant != "temporal":
        raise ConfigError(f"variant: tokenize_temporal needs a temporal tokenizer, got {params.variant!r}")
    segments = segment_signal(signal, params.patch_len).astype(get_default_dtype())
    ids = np.arange(len(segments))
    coords = np.asarray(coords, dtype=np.float64)
    tokens = params.embed(segments, ids, coords=coords)
    return NodeTokenSequence(tokens, ids, np.zeros(len(ids), dtype=bool), segments, params, coords)


def num_masked(ratio, f):
    if not 0 <= ratio < 1:
        raise ConfigError(f"mask_ratio: must lie in [0, 1), got {ratio}")
    return int(math.floor(ratio * f + 1e-9))


def apply_mask(seq, ratio, rng):
    """Hide ``floor(ratio * f)`` features chosen uniformly without replacement."""
    f = seq.num_features
    chosen = rng.choice(f, num_masked(ratio, f), replace=False)
    mask = np.zeros(f, dtype=bool)
    mask[chosen] = True
    if not mask.any():
        return seq
    tokens = seq.params.embed(seq.raw_targets, seq.feature_ids, mask, seq.coords)
    return NodeTokenSequence(tokens, seq.feature_ids, mask, seq.raw_targets, seq.params, seq.coords)


def sample_masks(valid, ratio, rng):
    """Boolean masks ``(n, f)`` hiding ``floor(ratio * f_i)`` valid positions per row."""
    valid = np.asarray(valid, dtype=bool)
    n, f = valid.shape
    keys = rng.uniform((n, f))
    keys[~valid] = np.inf
    ranks = np.argsort(np.argsort(keys, axis=1, kind="stable"), axis=1, kind="stable")
    counts = np.array([num_masked(ratio, int(v)) for v in valid.sum(axis=1)])
    return ranks < counts[:, None]


def select_nonzero(values, cap=DEFAULT_FEATURE_CAP, rng=None):
    """Indices of nonzero features, subsampled to at most ``cap`` (sorted ascending)."""
    idx = np.flatnonzero(np.asarray(values) != 0)
    if len(idx) > cap:
        if rng is None:
            raise ConfigError("rng: subsampling nonzero features needs a random stream")
        idx = np.sort(rng.choice(idx, cap, replace=False))
    return idx
