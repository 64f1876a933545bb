"""Foundation-model pretraining on unstructured synthetic samples."""
from __future__ import annotations

import dataclasses
import os
import time
from dataclasses import dataclass, field

from fimp.errors import ConfigError
from fimp.foundation import FoundationModel, PretrainConfig, Samples, pretrain, save_checkpoint
from fimp.harness.data import DOMAIN_VARIANT
from fimp.numerics import Rng
from fimp.synthdata import default_spec, unstructured_samples


@dataclass
class PretrainRunConfig:
    """What to pretrain on and how; ``domain`` picks the synthetic generator."""

    domain: str = "genes"
    dataset_overrides: dict = field(default_factory=dict)
    num_samples: int = 5000
    d: int = 32
    num_heads: int = 2
    num_blocks: int = 1
    combine: str = "add"
    mask_ratio: float = 0.8
    epochs: int = 10
    lr: float = 1e-3
    batch: int = 64
    seed: int = 0
    schema_version: int = 1

    def __post_init__(self):
        if self.domain not in DOMAIN_VARIANT:
            raise ConfigError(f"domain: expected one of {tuple(DOMAIN_VARIANT)}, got {self.domain!r}")
        if self.num_samples < 1:
            raise ConfigError(f"num_samples: must be >= 1, got {self.num_samples}")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"config: unknown field(s) {unknown}")
        return cls(**data)


def build_foundation(pcfg, values, coords):
    spec = default_spec(pcfg.domain, **pcfg.dataset_overrides)
    variant = DOMAIN_VARIANT[pcfg.domain]
    n, f, c = values.shape
    tok = {"variant": variant, "d": pcfg.d, "f_max": f, "c": c, "combine": pcfg.combine,
           "patch_len": c, "coord_dim": coords.shape[1]}
    if variant == "patch":
        side = spec.image_size // spec.patch
        tok["grid"] = (side, side)
    return FoundationModel.build(tok, pcfg.num_blocks, pcfg.num_heads, Rng(pcfg.seed, (1,)))


def run_pretraining(pcfg, out_path=None):
    """Pretrain on ``num_samples`` graph-free samples; optionally write a checkpoint.

    Returns ``(model, result, seconds)``.
    """
    t0 = time.perf_counter()
    spec = default_spec(pcfg.domain, **pcfg.dataset_overrides)
    values, coords, _ = unstructured_samples(spec, pcfg.num_samples)
    model = build_foundation(pcfg, values, coords)
    samples = Samples(values, coords=coords if DOMAIN_VARIANT[pcfg.domain] == "temporal" else None)
    cfg = PretrainConfig(mask_ratio=pcfg.mask_ratio, epochs=pcfg.epochs, lr=pcfg.lr,
                         batch=pcfg.batch, seed=pcfg.seed)
    result = pretrain(model, samples, cfg)
    if out_path:
        os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
        save_checkpoint(model, out_path)
    return model, result, time.perf_counter() - t0
