"""Miniature transformer foundation model, checkpoints and weight transfer.

Checkpoint layout (all integers little-endian)::

    offset 0   8 bytes   magic b"FIMPCKPT"
    offset 8   uint32    format version (currently 1)
    offset 12  uint64    header length H in bytes
    offset 20  H bytes   UTF-8 JSON header
    offset 20+H          tensor payload

The header holds ``{"hyperparams": {...}, "tensors": [{"name", "shape",
"dtype", "offset", "nbytes"}, ...]}``; ``offset`` is relative to the start
of the payload and ``dtype`` is ``"<f4"`` or ``"<f8"``. Tensors are stored
C-ordered. Files are written to a temporary name and renamed into place.
"""
from __future__ import annotations

import copy
import json
import os
import struct
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from fimp.attention import TransformerBlockParams, encoder_forward
from fimp.errors import DivergenceError, FormatError, TransferError
from fimp.message_passing import MessageCreator
from fimp.numerics import Adam, Linear, Module, Rng, mse, precision
from fimp.tokenizer import Tokenizer, sample_masks

MAGIC = b"FIMPCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class FoundationModel(Module):
    """Tokenizer, self-attention encoder blocks and a per-token reconstruction head."""

    def __init__(self, tokenizer, blocks, rng):
        self.tokenizer = tokenizer
        self.blocks = list(blocks)
        self.head = Linear(tokenizer.d, tokenizer.c, rng.child(99))

    @classmethod
    def build(cls, tokenizer_kwargs, num_blocks, num_heads, rng, dropout=0.0):
        tokenizer = Tokenizer(rng=rng.child(0), **tokenizer_kwargs)
        blocks = [TransformerBlockParams(tokenizer.d, num_heads, rng.child(1, i), dropout=dropout)
                  for i in range(num_blocks)]
        return cls(tokenizer, blocks, rng)

    def hyperparams(self):
        return {"tokenizer": self.tokenizer.config(), "num_blocks": len(self.blocks),
                "block": self.blocks[0].config()}

    def encode(self, values, ids, mask=None, coords=None, valid=None, training=False):
        tokens = self.tokenizer.embed(values, ids, mask, coords)
        out, _ = encoder_forward(tokens, self.blocks, key_mask=valid, training=training)
        return out

    def __call__(self, values, ids, mask=None, coords=None, valid=None, training=False):
        return self.head(self.encode(values, ids, mask, coords, valid, training))


@dataclass
class Samples:
    """Unstructured (graph-free) training samples for pretraining.

    ``values`` is ``(N, f, c)``; ``ids`` defaults to ``arange(f)`` per sample.
    """

    values: np.ndarray
    ids: np.ndarray | None = None
    coords: np.ndarray | None = None
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        n, f = self.values.shape[:2]
        if self.ids is None:
            self.ids = np.broadcast_to(np.arange(f), (n, f))
        if self.valid is None:
            self.valid = np.ones((n, f), dtype=bool)

    def __len__(self):
        return len(self.values)

    def take(self, idx):
        return Samples(self.values[idx], self.ids[idx],
                       None if self.coords is None else self.coords[idx], self.valid[idx])


@dataclass
class PretrainConfig:
    mask_ratio: float = 0.8
    epochs: int = 10
    lr: float = 1e-3
    batch: int = 64
    seed: int = 0
    max_steps: int | None = None


@dataclass
class PretrainResult:
    model: FoundationModel
    step_losses: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)


def masked_loss(model, batch, mask, training=True):
    """Mean squared error over masked, valid positions only."""
    pred = model(batch.values, batch.ids, mask, batch.coords, batch.valid, training=training)
    weight = (mask & batch.valid)[..., None]
    return mse(pred, batch.values, weight)


def pretrain(model, samples, cfg):
    """Masked-reconstruction pretraining with Adam; returns the model and its loss curve."""
    rng = Rng(cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr)
    result = PretrainResult(model)
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        perm = rng.child(epoch, 0).permutation(len(samples))
        mask_rng = rng.child(epoch, 1)
        losses = []
        for start in range(0, len(samples), cfg.batch):
            batch = samples.take(perm[start:start + cfg.batch])
            mask = sample_masks(batch.valid, cfg.mask_ratio, mask_rng)
            opt.zero_grad()
            loss = masked_loss(model, batch, mask)
            value = float(loss.data)
            if not np.isfinite(value):
                raise DivergenceError(f"pretraining loss became {value} at step {step}", step)
            loss.backward()
            opt.step()
            losses.append(value)
            result.step_losses.append(value)
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        result.epoch_losses.append(float(np.mean(losses)) if losses else 0.0)
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    model.eval()
    return result


# -- checkpoints ------------------------------------------------------------

@dataclass
class FoundationCheckpoint:
    version: int
    hyperparams: dict
    tensors: OrderedDict


def save_checkpoint(model, path):
    path = os.fspath(path)
    entries, chunks, offset = [], [], 0
    for name, p in model.named_parameters().items():
        arr = np.ascontiguousarray(p.data)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"hyperparams": model.hyperparams(), "tensors": entries}).encode()
    payload = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    """Parse a checkpoint file; raises :class:`FormatError` on any corruption."""
    with open(os.fspath(path), "rb") as fh:
        raw = fh.read()
    if len(raw) < _PREFIX.size:
        raise FormatError("file shorter than the fixed prefix", len(raw))
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 8)
    start = _PREFIX.size
    if len(raw) < start + header_len:
        raise FormatError(f"header truncated: need {header_len} bytes", len(raw))
    try:
        header = json.loads(raw[start:start + header_len])
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("header is not valid JSON", start) from None
    base = start + header_len
    tensors = OrderedDict()
    for entry in header["tensors"]:
        name = entry["name"]
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}", base + entry["offset"])
        dtype = np.dtype(entry["dtype"])
        if dtype.str not in ("<f4", "<f8"):
            raise FormatError(f"{name}: unsupported dtype {entry['dtype']}", base + entry["offset"])
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if nbytes != entry["nbytes"]:
            raise FormatError(f"{name}: byte length {entry['nbytes']} does not match shape {shape}",
                              base + entry["offset"])
        lo = base + entry["offset"]
        if lo + nbytes > len(raw):
            raise FormatError(f"{name}: payload truncated", len(raw))
        tensors[name] = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize,
                                      offset=lo).reshape(shape).astype(dtype.newbyteorder("="))
    return FoundationCheckpoint(version, header["hyperparams"], tensors)


def model_from_checkpoint(ckpt):
    """Rebuild a :class:`FoundationModel`; extra tensors in the file are ignored with a warning."""
    hp = ckpt.hyperparams
    block = hp["block"]
    tok = dict(hp["tokenizer"])
    dtype = next(iter(ckpt.tensors.values())).dtype if ckpt.tensors else np.float32
    with precision(dtype):
        model = FoundationModel.build(tok, hp["num_blocks"], block["num_heads"], Rng(0),
                                      dropout=block.get("dropout", 0.0))
    for b in model.blocks:
        b.attn.scale = block.get("scale", "head")
        b.attn.dropout = block.get("attn_dropout", 0.0)
    missing = [k for k in model.named_parameters() if k not in ckpt.tensors]
    if missing:
        raise FormatError(f"checkpoint lacks declared tensors: {missing}")
    extra = model.load_state_dict(ckpt.tensors)
    if extra:
        warnings.warn(f"checkpoint has tensors the model does not declare; ignored: {extra}",
                      stacklevel=2)
    model.eval()
    return model


def load_foundation_model(path):
    return model_from_checkpoint(load_checkpoint(path))


def _as_model(source):
    if isinstance(source, FoundationModel):
        return source
    if isinstance(source, FoundationCheckpoint):
        return model_from_checkpoint(source)
    return load_foundation_model(source)


def _block_shape(name, d):
    """Shape a transformer-block tensor must have at width ``d``."""
    if name.startswith("attn."):
        return (d, d)
    return {"ff_w1": (d, 4 * d), "ff_b1": (4 * d,), "ff_w2": (4 * d, d)}.get(name, (d,))


def transfer_to_message_creator(source, d=None):
    """Copy the encoder blocks of a pretrained model into a cross-mode message creator.

    ``source`` may be a model, a parsed checkpoint or a checkpoint path. With
    ``d`` given, every block tensor must be compatible with that width.
    """
    model = _as_model(source)
    if d is not None:
        offending = [f"blocks.{i}.{name}{tuple(p.shape)}"
                     for i, block in enumerate(model.blocks)
                     for name, p in block.named_parameters().items()
                     if p.shape != _block_shape(name, d)]
        if offending:
            raise TransferError(f"pretrained width {model.tokenizer.d} != target width {d}; "
                                f"offending tensors: {offending}")
    blocks = [_clone_module(b) for b in model.blocks]
    return MessageCreator(blocks, mode="foundation")


def transfer_tokenizer(source):
    """Independent copy of the pretrained tokenizer (embedding and positional tables)."""
    return _clone_module(_as_model(source).tokenizer)


def _clone_module(module):
    clone = copy.deepcopy(module)
    for p in clone.parameters():
        p.grad = None
    return clone


__all__ = ["FoundationModel", "Samples", "PretrainConfig", "PretrainResult", "pretrain",
           "masked_loss", "FoundationCheckpoint", "save_checkpoint", "load_checkpoint",
           "model_from_checkpoint", "load_foundation_model", "transfer_to_message_creator",
           "transfer_tokenizer"]
