"""Run configuration and metrics report records."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

from fimp.errors import ConfigError

SCHEMA_VERSION = 1
TASKS = ("reconstruction", "classification", "zero_shot")
FIMP_KINDS = ("fimp-base", "fimp-foundation")
BASELINE_KINDS = ("gcn", "sage", "gat", "gin")
MODEL_KINDS = FIMP_KINDS + BASELINE_KINDS
BASELINE_FILLS = ("zero", "noise", "mean", "interpolate")


@dataclass
class RunConfig:
    """Everything that determines one experiment.

    ``dataset`` is a graph file path, or ``synth:<domain>`` to generate the
    default synthetic dataset in memory (``dataset_overrides`` adjusts the
    generator spec). ``checkpoint`` points at a pretrained foundation model.
    """

    task: str = "reconstruction"
    model: str = "fimp-base"
    dataset: str = ""
    dataset_overrides: dict = field(default_factory=dict)
    splits: tuple = (0.7, 0.1, 0.2)
    mask_ratio: float = 0.5
    epochs: int = 150
    lr: float = 3e-3
    batch: int = 64
    seed: int = 0
    checkpoint: str = ""
    d: int = 32
    num_heads: int = 2
    num_blocks: int = 1
    num_layers: int = 1
    aggregation: str = "mean"
    self_loops: bool = True
    combine: str = "add"
    combine_init: str = "random"
    blocks_per_message: int = 0
    freeze_tables: bool = False
    baseline_fill: str = "zero"
    dropout: float = 0.0
    weight_decay: float = 0.0
    patience: int = 10
    probe_steps: int = 500
    probe_lr: float = 0.1
    probe_fraction: float = 0.75
    capture_attention: bool = False
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.splits = tuple(float(s) for s in self.splits)
        self.validate()

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {self.schema_version}")
        if self.task not in TASKS:
            raise ConfigError(f"task: expected one of {TASKS}, got {self.task!r}")
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model: expected one of {MODEL_KINDS}, got {self.model!r}")
        if len(self.splits) != 3 or min(self.splits) < 0 or abs(sum(self.splits) - 1.0) > 1e-9:
            raise ConfigError(f"splits: need three non-negative fractions summing to 1, got {self.splits}")
        if not 0 <= self.mask_ratio < 1:
            raise ConfigError(f"mask_ratio: must lie in [0, 1), got {self.mask_ratio}")
        if self.baseline_fill not in BASELINE_FILLS:
            raise ConfigError(f"baseline_fill: expected one of {BASELINE_FILLS}, got {self.baseline_fill!r}")
        for name in ("epochs", "d", "num_heads", "num_blocks", "num_layers", "batch", "probe_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1, got {getattr(self, name)}")
        if self.patience < 0:
            raise ConfigError(f"patience: must be >= 0, got {self.patience}")
        if not 0 < self.probe_fraction < 1:
            raise ConfigError(f"probe_fraction: must lie in (0, 1), got {self.probe_fraction}")

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["splits"] = list(self.splits)
        return out

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"config: unknown field(s) {unknown}")
        return cls(**data)


def _coerce(field_type, current, raw):
    """Parse an override string against the type of the current value."""
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, (tuple, list, dict)):
        return json.loads(raw)
    return raw


def apply_overrides(data, overrides):
    """Apply ``key=value`` strings to a config dict (dotted keys reach into ``dataset_overrides``)."""
    data = dict(data)
    defaults = RunConfig().to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set: expected key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key.startswith("dataset_overrides."):
            sub = dict(data.get("dataset_overrides", {}))
            try:
                sub[key.split(".", 1)[1]] = json.loads(raw)
            except json.JSONDecodeError:
                sub[key.split(".", 1)[1]] = raw
            data["dataset_overrides"] = sub
            continue
        if key not in defaults:
            raise ConfigError(f"{key}: unknown config field")
        current = data.get(key, defaults[key])
        try:
            data[key] = _coerce(type(current), current, raw)
        except (ValueError, json.JSONDecodeError):
            raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from None
    return data


def load_config(path, overrides=()):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config: file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: {path} is not valid JSON ({exc})") from None
    if "schema_version" not in data:
        raise ConfigError(f"schema_version: missing from {path}")
    return RunConfig.from_dict(apply_overrides(data, overrides))


def save_config(cfg, path):
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)


@dataclass
class MetricsReport:
    task: str
    model: str
    seed: int
    config_hash: str
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    test_mse: float | None = None
    test_r2: float | None = None
    accuracy: float | None = None
    macro_f1: float | None = None
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return dataclasses.asdict(self)

    def numbers(self):
        """Everything except wall time; equal across reruns of the same config."""
        out = self.to_dict()
        out.pop("wall_time")
        return out

    def write(self, out_dir, stem="metrics"):
        """Write ``<stem>.json`` and the per-epoch curve ``<stem>_curve.csv``."""
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, f"{stem}.json")
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        os.replace(tmp, path)
        with open(os.path.join(out_dir, f"{stem}_curve.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss"])
            for i, tr in enumerate(self.train_loss):
                va = self.val_loss[i] if i < len(self.val_loss) else ""
                writer.writerow([i, repr(tr), repr(va)])
        return path

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            return cls(**json.load(fh))
